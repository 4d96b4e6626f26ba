import numpy as np
import pytest

from ringpipe.data import (
    BYTE_VOCAB,
    CHAR_VOCAB,
    BatchSource,
    DataError,
    encode_chars,
    load_corpus,
    seeded_permutation,
)


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text("the quick brown fox jumps over the lazy dog. " * 50)
    return str(path)


class TestLoadCorpus:
    def test_byte_mode_vocab_is_256(self, corpus_file):
        tokens, vocab = load_corpus(corpus_file, "byte")
        assert vocab == BYTE_VOCAB == 256
        assert tokens.dtype == np.int64
        assert tokens.max() < 256

    def test_char_mode_filters_to_27(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("Hello, World! 123")
        tokens, vocab = load_corpus(str(path), "char")
        assert vocab == CHAR_VOCAB == 27
        # "hello world" survives: letters and the space
        expect = [ord(c) - ord("a") + 1 if c != " " else 0 for c in "hello world"]
        assert tokens.tolist() == expect

    def test_missing_file(self):
        with pytest.raises(DataError):
            load_corpus("/nonexistent/corpus.txt", "byte")

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.txt"
        path.write_text("")
        with pytest.raises(DataError):
            load_corpus(str(path), "byte")

    def test_nothing_survives_filter(self, tmp_path):
        path = tmp_path / "digits.txt"
        path.write_text("0123456789")
        with pytest.raises(DataError):
            load_corpus(str(path), "char")

    def test_unknown_mode(self, corpus_file):
        with pytest.raises(DataError):
            load_corpus(corpus_file, "word")


class TestBatchSource:
    def test_shift_by_one_window(self):
        # "abcab" with seq len 2 gives one window: x=[a,b], y=[b,c]
        tokens = encode_chars(b"abcab")
        source = BatchSource(tokens, seq_len=2, batch_size=1, seed=0)
        assert source.n_windows == 1
        batch = source.batch_at(0)
        a, b, c = [ord(ch) - ord("a") + 1 for ch in "abc"]
        assert batch.x.tolist() == [[a, b]]
        assert batch.y.tolist() == [[b, c]]

    def test_same_seed_identical_order(self, corpus_file):
        tokens, _ = load_corpus(corpus_file, "byte")
        s1 = BatchSource(tokens, 8, 4, seed=42)
        s2 = BatchSource(tokens, 8, 4, seed=42)
        for t in range(20):
            assert s1.batch_at(t).x.tobytes() == s2.batch_at(t).x.tobytes()

    def test_different_seed_different_order(self, corpus_file):
        tokens, _ = load_corpus(corpus_file, "byte")
        s1 = BatchSource(tokens, 8, 4, seed=1)
        s2 = BatchSource(tokens, 8, 4, seed=2)
        assert any(
            s1.batch_at(t).x.tobytes() != s2.batch_at(t).x.tobytes() for t in range(5)
        )

    def test_random_access_matches_streaming(self, corpus_file):
        tokens, _ = load_corpus(corpus_file, "byte")
        s1 = BatchSource(tokens, 8, 2, seed=9)
        streamed = [s1.batch_at(t).x.tobytes() for t in range(12)]
        s2 = BatchSource(tokens, 8, 2, seed=9)
        assert s2.batch_at(7).x.tobytes() == streamed[7]

    def test_epoch_covers_every_window_once(self):
        tokens = np.arange(0, 120, dtype=np.int64) % 50
        source = BatchSource(tokens, seq_len=3, batch_size=1, seed=5)
        n = source.n_windows
        starts = set()
        for t in range(n):
            batch = source.batch_at(t)
            starts.add(int(batch.x[0, 0]))
        assert len(starts) == n

    def test_targets_are_inputs_shifted(self, corpus_file):
        tokens, _ = load_corpus(corpus_file, "byte")
        source = BatchSource(tokens, 8, 4, seed=3)
        batch = source.batch_at(5)
        assert np.array_equal(batch.x[:, 1:], batch.y[:, :-1])

    def test_too_small_corpus(self):
        with pytest.raises(DataError):
            BatchSource(np.arange(3, dtype=np.int64), seq_len=8, batch_size=1, seed=0)

    def test_seq_len_minimum(self):
        with pytest.raises(DataError):
            BatchSource(np.arange(100, dtype=np.int64), seq_len=1, batch_size=1, seed=0)


def test_seeded_permutation_is_a_permutation():
    perm = seeded_permutation(100, 7)
    assert sorted(perm.tolist()) == list(range(100))
    assert not np.array_equal(perm, np.arange(100))
    assert np.array_equal(perm, seeded_permutation(100, 7))
