"""Forward and hand-derived backward passes for the toy transformer LM.

Three layer kinds: token+position embedding (dropout on the summed
embedding), a pre-layer-norm single-head transformer block (attention +
2-layer ReLU feed-forward, residual, two dropout sites), and the output
projection with a fused softmax cross-entropy head.

The embedding and the projection share one weight matrix; both layers hold
a reference to the same array under the param key "tied", and their "tied"
gradients are reported separately so the caller controls how they combine.

Dropout masks are a pure function of a (seed, position) pair stored on the
tape, so a backward pass regenerates exactly the masks the forward drew,
and re-running a forward from its tape inputs is bit-identical.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import DimensionError, SeededRng, check_finite

LN_EPS = 1e-5


@dataclass
class LayerTape:
    """Everything a backward pass needs: the input, the dropout stream
    coordinates, and (for the store-all path) the forward intermediates."""

    inputs: object
    seed: int
    start_position: int
    train: bool
    saved: dict


def _fold(x):
    # [B,T,d] -> [B*T,d] view; matmuls run on rank-2
    return x.reshape(-1, x.shape[-1])


def _mm(a, b):
    return kernels.mm(a, b)


def _t(x):
    return np.ascontiguousarray(x.T)


def _bt(x):
    return np.ascontiguousarray(np.swapaxes(x, 1, 2))


def _dropout_mask(rng, shape, p):
    u = rng.uniform(shape)
    return (u >= p).astype(np.float64) * (1.0 / (1.0 - p))


def layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * istd
    return xhat * gain + bias, (xhat, istd)


def layer_norm_backward(grad_y, gain, xhat, istd):
    dxhat = grad_y * gain
    dgain = (grad_y * xhat).sum(axis=tuple(range(grad_y.ndim - 1)))
    dbias = grad_y.sum(axis=tuple(range(grad_y.ndim - 1)))
    dx = istd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def linear_backward(x2d, w, grad_y2d):
    """y = x @ w: returns (grad_x, grad_w). Kept separate because every
    projection in the block reduces to this closed form."""
    grad_x = _mm(grad_y2d, _t(w))
    grad_w = _mm(_t(x2d), grad_y2d)
    return grad_x, grad_w


def softmax_last(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


class EmbeddingLayer:
    """Token lookup into the tied matrix plus learned positions, then dropout."""

    kind = "embedding"

    def __init__(self, vocab_size, model_dim, max_seq_len, dropout_p):
        self.vocab_size = vocab_size
        self.model_dim = model_dim
        self.max_seq_len = max_seq_len
        self.dropout_p = dropout_p

    def init_params(self, rng, tied):
        scale = 1.0 / math.sqrt(self.model_dim)
        return {
            "tied": tied,
            "pos": rng.uniform_signed((self.max_seq_len, self.model_dim), scale),
        }

    def forward(self, params, tokens, rng, train):
        tokens = np.asarray(tokens)
        if tokens.max(initial=0) >= self.vocab_size:
            raise DimensionError("token id out of vocabulary range")
        T = tokens.shape[-1]
        h = params["tied"][tokens] + params["pos"][:T]
        tape = LayerTape(tokens, rng.seed, rng.position, train, {})
        if train:
            h = h * _dropout_mask(rng, h.shape, self.dropout_p)
        return check_finite(h, "embedding output"), tape

    def backward(self, params, tape, grad_out):
        tokens = tape.inputs
        g = grad_out
        if tape.train:
            rng = SeededRng(tape.seed, tape.start_position)
            g = g * _dropout_mask(rng, g.shape, self.dropout_p)
        T = tokens.shape[-1]
        grad_pos = np.zeros_like(params["pos"])
        grad_pos[:T] = g.sum(axis=0) if g.ndim == 3 else g
        grad_tied = np.zeros_like(params["tied"])
        np.add.at(grad_tied, tokens.reshape(-1), _fold(g))
        return None, {"tied": grad_tied, "pos": grad_pos}


class TransformerBlockLayer:
    """Pre-LN single-head attention + ReLU feed-forward with residuals."""

    kind = "block"

    def __init__(self, model_dim, ffn_dim, dropout_p):
        self.model_dim = model_dim
        self.ffn_dim = ffn_dim
        self.dropout_p = dropout_p

    def init_params(self, rng, tied=None):
        d, f = self.model_dim, self.ffn_dim
        sd = 1.0 / math.sqrt(d)
        sf = 1.0 / math.sqrt(f)
        return {
            "ln1_g": np.ones(d),
            "ln1_b": np.zeros(d),
            "wq": rng.uniform_signed((d, d), sd),
            "wk": rng.uniform_signed((d, d), sd),
            "wv": rng.uniform_signed((d, d), sd),
            "wo": rng.uniform_signed((d, d), sd),
            "ln2_g": np.ones(d),
            "ln2_b": np.zeros(d),
            "w1": rng.uniform_signed((d, f), sd),
            "b1": np.zeros(f),
            "w2": rng.uniform_signed((f, d), sf),
            "b2": np.zeros(d),
        }

    def forward(self, params, x, rng, train):
        if x.shape[-1] != self.model_dim:
            raise DimensionError(f"block expects dim {self.model_dim}, got {x.shape[-1]}")
        B, T, d = x.shape
        tape = LayerTape(x, rng.seed, rng.position, train, {})
        s = tape.saved

        a, s["ln1"] = layer_norm(x, params["ln1_g"], params["ln1_b"])
        a2 = _fold(a)
        q = _mm(a2, params["wq"]).reshape(B, T, d)
        k = _mm(a2, params["wk"]).reshape(B, T, d)
        v = _mm(a2, params["wv"]).reshape(B, T, d)
        scores = kernels.bmm(q, _bt(k)) * (1.0 / math.sqrt(d))
        scores = np.where(np.tril(np.ones((T, T), dtype=bool)), scores, -np.inf)
        probs = softmax_last(scores)
        ctx = kernels.bmm(probs, v)
        proj = _mm(_fold(ctx), params["wo"]).reshape(B, T, d)
        if train:
            proj = proj * _dropout_mask(rng, proj.shape, self.dropout_p)
        x1 = x + proj

        m, s["ln2"] = layer_norm(x1, params["ln2_g"], params["ln2_b"])
        z1 = _mm(_fold(m), params["w1"]) + params["b1"]
        h1 = np.maximum(z1, 0.0)
        h2 = (_mm(h1, params["w2"]) + params["b2"]).reshape(B, T, d)
        if train:
            h2 = h2 * _dropout_mask(rng, h2.shape, self.dropout_p)
        out = x1 + h2

        s.update(a=a, q=q, k=k, v=v, probs=probs, ctx=ctx, x1=x1, m=m, z1=z1, h1=h1)
        return check_finite(out, "block output"), tape

    def backward(self, params, tape, grad_out):
        x = tape.inputs
        B, T, d = x.shape
        s = tape.saved
        if s.get("x1") is None:
            raise DimensionError("tape does not carry forward intermediates")
        if grad_out.shape != x.shape:
            raise DimensionError("grad shape does not match block output")
        n = B * T * d
        if tape.train:
            base = SeededRng(tape.seed, tape.start_position)
            mask0 = _dropout_mask(base.at(tape.start_position), (B, T, d), self.dropout_p)
            mask1 = _dropout_mask(base.at(tape.start_position + n), (B, T, d), self.dropout_p)
        else:
            mask0 = mask1 = 1.0

        grads = {}
        # feed-forward branch
        g_h2 = (grad_out * mask1) if tape.train else grad_out
        g_h1, grads["w2"] = linear_backward(s["h1"], params["w2"], _fold(g_h2))
        grads["b2"] = _fold(g_h2).sum(axis=0)
        g_z1 = g_h1 * (s["z1"] > 0.0)
        g_m2, grads["w1"] = linear_backward(_fold(s["m"]), params["w1"], g_z1)
        grads["b1"] = g_z1.sum(axis=0)
        xhat2, istd2 = s["ln2"]
        g_x1, grads["ln2_g"], grads["ln2_b"] = layer_norm_backward(
            g_m2.reshape(B, T, d), params["ln2_g"], xhat2, istd2
        )
        g_x1 = g_x1 + grad_out

        # attention branch
        g_proj = (g_x1 * mask0) if tape.train else g_x1
        g_ctx, grads["wo"] = linear_backward(_fold(s["ctx"]), params["wo"], _fold(g_proj))
        g_ctx = g_ctx.reshape(B, T, d)
        g_probs = kernels.bmm(g_ctx, _bt(s["v"]))
        g_v = kernels.bmm(_bt(s["probs"]), g_ctx)
        p = s["probs"]
        g_scores = (g_probs - (g_probs * p).sum(axis=-1, keepdims=True)) * p
        inv = 1.0 / math.sqrt(d)
        g_q = kernels.bmm(g_scores, s["k"]) * inv
        g_k = kernels.bmm(_bt(g_scores), s["q"]) * inv
        g_a = _mm(_fold(g_q), _t(params["wq"]))
        g_a += _mm(_fold(g_k), _t(params["wk"]))
        g_a += _mm(_fold(g_v), _t(params["wv"]))
        a2 = _fold(s["a"])
        grads["wq"] = _mm(_t(a2), _fold(g_q))
        grads["wk"] = _mm(_t(a2), _fold(g_k))
        grads["wv"] = _mm(_t(a2), _fold(g_v))
        xhat1, istd1 = s["ln1"]
        g_x, grads["ln1_g"], grads["ln1_b"] = layer_norm_backward(
            g_a.reshape(B, T, d), params["ln1_g"], xhat1, istd1
        )
        g_x = g_x + g_x1
        return g_x, grads


class OutputProjectionLayer:
    """Logits against the tied matrix; pairs with the cross-entropy head."""

    kind = "projection"

    def __init__(self, vocab_size, model_dim):
        self.vocab_size = vocab_size
        self.model_dim = model_dim

    def init_params(self, rng, tied):
        return {"tied": tied}

    def forward(self, params, h, rng, train):
        logits = _mm(_fold(h), _t(params["tied"])).reshape(
            h.shape[0], h.shape[1], self.vocab_size
        )
        tape = LayerTape(h, rng.seed, rng.position, train, {})
        return check_finite(logits, "logits"), tape

    def backward(self, params, tape, grad_out):
        h = tape.inputs
        g2 = _fold(grad_out)
        grad_h = _mm(g2, params["tied"]).reshape(h.shape)
        grad_tied = _mm(_t(g2), _fold(h))
        return grad_h, {"tied": grad_tied}


def make_tied_matrix(vocab_size, model_dim, rng):
    return rng.uniform_signed((vocab_size, model_dim), 1.0 / math.sqrt(model_dim))


def cross_entropy(logits, targets):
    """Mean next-token cross-entropy in nats."""
    targets = np.asarray(targets)
    if targets.max(initial=0) >= logits.shape[-1] or targets.min(initial=0) < 0:
        raise DimensionError("target id out of range")
    z = _fold(logits)
    y = targets.reshape(-1)
    m = z.max(axis=-1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=-1))
    return float((lse - z[np.arange(y.size), y]).mean())


def loss_and_head_backward(h, tied, targets):
    """Fused projection + softmax cross-entropy, with analytic gradients.

    Returns (loss, grad wrt the projection input h, grad wrt the tied
    matrix as seen from the output side).
    """
    targets = np.asarray(targets)
    vocab = tied.shape[0]
    if targets.max(initial=0) >= vocab or targets.min(initial=0) < 0:
        raise DimensionError("target id out of range")
    h2 = _fold(h)
    z = _mm(h2, _t(tied))
    y = targets.reshape(-1)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    sum_e = e.sum(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(sum_e[:, 0])
    loss = float((lse - z[np.arange(y.size), y]).mean())
    p = e / sum_e
    p[np.arange(y.size), y] -= 1.0
    dz = p * (1.0 / y.size)
    grad_h = _mm(dz, tied).reshape(h.shape)
    grad_tied = _mm(_t(dz), h2)
    return loss, check_finite(grad_h, "head grad"), check_finite(grad_tied, "tied grad")
