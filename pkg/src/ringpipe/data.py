"""Corpus ingestion and the deterministic shuffled batch stream.

The batch at step t is a pure function of (corpus, seq_len, batch_size,
seed, t): non-overlapping windows are shuffled once per epoch with a
seeded Fisher-Yates, and global sample index t*B+j walks the epochs in
order.  Nothing here is stateful, which is what makes checkpoint resume
and the snapshot-replay oracle trivial.
"""

import os

import numpy as np

from .engine import BatchSample
from .tensor import SeededRng, mix64

BYTE_VOCAB = 256
CHAR_VOCAB = 27  # 'a'..'z' plus space


class DataError(ValueError):
    pass


def encode_bytes(raw):
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def encode_chars(raw):
    """Lowercase and keep only the 26 letters and space (ids 1..26, 0)."""
    text = raw.decode("utf-8", errors="ignore").lower()
    ids = []
    for ch in text:
        if ch == " ":
            ids.append(0)
        elif "a" <= ch <= "z":
            ids.append(ord(ch) - ord("a") + 1)
    return np.array(ids, dtype=np.int64)


def load_corpus(path, vocab_mode):
    """Read a text file into token ids; returns (tokens, vocab_size)."""
    if not os.path.isfile(path):
        raise DataError(f"corpus file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise DataError(f"corpus file is empty: {path}")
    if vocab_mode == "byte":
        return encode_bytes(raw), BYTE_VOCAB
    if vocab_mode == "char":
        tokens = encode_chars(raw)
        if tokens.size == 0:
            raise DataError("corpus has no a-z/space characters after filtering")
        return tokens, CHAR_VOCAB
    raise DataError(f"unknown vocab mode {vocab_mode!r}")


def seeded_permutation(n, seed):
    perm = np.arange(n, dtype=np.int64)
    u = SeededRng(seed).uniform((max(n - 1, 1),))
    for i in range(n - 1, 0, -1):
        j = int(u[n - 1 - i] * (i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


class BatchSource:
    """Shift-by-one next-token batches over shuffled corpus windows."""

    def __init__(self, tokens, seq_len, batch_size, seed):
        if seq_len < 2:
            raise DataError("sequence length must be >= 2")
        self.tokens = tokens
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.seed = seed
        self.window = seq_len + 1
        self.n_windows = len(tokens) // self.window
        if self.n_windows < 1:
            raise DataError(
                f"corpus too small: need at least {self.window} tokens, have {len(tokens)}"
            )
        self._perm_cache = {}

    def _perm(self, epoch):
        if epoch not in self._perm_cache:
            if len(self._perm_cache) > 2:
                self._perm_cache.pop(min(self._perm_cache))
            self._perm_cache[epoch] = seeded_permutation(
                self.n_windows, mix64(self.seed, epoch)
            )
        return self._perm_cache[epoch]

    def batch_at(self, t):
        xs = np.empty((self.batch_size, self.seq_len), dtype=np.int64)
        ys = np.empty((self.batch_size, self.seq_len), dtype=np.int64)
        for j in range(self.batch_size):
            g = t * self.batch_size + j
            epoch, offset = divmod(g, self.n_windows)
            start = int(self._perm(epoch)[offset]) * self.window
            xs[j] = self.tokens[start : start + self.seq_len]
            ys[j] = self.tokens[start + 1 : start + self.window]
        return BatchSample(xs, ys, t)
