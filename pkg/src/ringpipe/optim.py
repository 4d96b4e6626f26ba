"""Update rules applied to delayed-gradient packets, plus LR schedules.

Both optimizers treat the per-module gradients and the tied-embedding
gradient uniformly and share one global step counter for bias correction;
zero-padded early gradients feed the moment estimates as literal zeros.
"""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import NonFiniteError


@dataclass
class LrSchedule:
    """Stepsize sequence: fixed, diminishing 1/(1+t), or linear warm-up
    into a cosine decay that floors at zero when t reaches total_steps."""

    base: float
    mode: str = "fixed"  # fixed | diminishing | warmup-cosine
    warmup_steps: int = 0
    total_steps: int = 0

    def __post_init__(self):
        if self.base <= 0:
            raise ValueError("base learning rate must be positive")
        if self.mode not in ("fixed", "diminishing", "warmup-cosine"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.mode == "warmup-cosine" and self.warmup_steps >= self.total_steps:
            raise ValueError("warm-up must end before total_steps in cosine mode")

    def at(self, t):
        if t < 0:
            raise ValueError("step must be >= 0")
        if self.mode == "fixed":
            return self.base
        if self.mode == "diminishing":
            return self.base / (1.0 + t)
        if t < self.warmup_steps:
            return self.base * (t + 1) / self.warmup_steps
        frac = (t - self.warmup_steps) / (self.total_steps - self.warmup_steps)
        return self.base * 0.5 * (1.0 + math.cos(math.pi * frac))


def _check_finite_update(arr, name):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite update for {name}")


class SgdOptimizer:
    """Plain stepsize descent: w <- w - lr * g, tie updated once."""

    name = "sgd"

    def __init__(self, schedule):
        self.schedule = schedule

    def apply(self, t, packet, modules, tied):
        lr = self.schedule.at(t)
        # overflow is caught by the finiteness check, not left as a warning
        with np.errstate(over="ignore", invalid="ignore"):
            for module, grads in zip(modules, packet.module_grads):
                start = module.layer_range[0]
                for offset, params in enumerate(module.params):
                    for pname, arr in params.items():
                        if pname == "tied":
                            continue
                        key = f"L{start + offset}.{pname}"
                        arr -= lr * grads[key]
                        _check_finite_update(arr, key)
            tied -= lr * packet.emb_grad
            _check_finite_update(tied, "tied")
        return lr

    def state_arrays(self):
        return {}

    def load_state_arrays(self, arrays):
        if arrays:
            raise ValueError("sgd carries no optimizer state")


class AdamOptimizer:
    """Adam over delayed gradients with a single global bias-correction
    clock; moment buffers are created lazily per parameter."""

    name = "adam"

    def __init__(self, schedule, beta1=0.9, beta2=0.999, eps=1e-8):
        self.schedule = schedule
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}

    def _update(self, key, w, g, lr, t):
        if key not in self.m:
            self.m[key] = np.zeros_like(w)
            self.v[key] = np.zeros_like(w)
        m = self.m[key]
        v = self.v[key]
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * (g * g)
        mhat = m / (1.0 - self.beta1 ** (t + 1))
        vhat = v / (1.0 - self.beta2 ** (t + 1))
        w -= lr * mhat / (np.sqrt(vhat) + self.eps)
        _check_finite_update(w, key)

    def apply(self, t, packet, modules, tied):
        lr = self.schedule.at(t)
        with np.errstate(over="ignore", invalid="ignore"):
            for module, grads in zip(modules, packet.module_grads):
                start = module.layer_range[0]
                for offset, params in enumerate(module.params):
                    for pname, arr in params.items():
                        if pname == "tied":
                            continue
                        key = f"L{start + offset}.{pname}"
                        self._update(key, arr, grads[key], lr, t)
            self._update("tied", tied, packet.emb_grad, lr, t)
        return lr

    def state_arrays(self):
        out = {}
        for key, arr in self.m.items():
            out[f"adam.m.{key}"] = arr
        for key, arr in self.v.items():
            out[f"adam.v.{key}"] = arr
        return out

    def load_state_arrays(self, arrays):
        self.m.clear()
        self.v.clear()
        for name, arr in arrays.items():
            if name.startswith("adam.m."):
                self.m[name[len("adam.m."):]] = arr.copy()
            elif name.startswith("adam.v."):
                self.v[name[len("adam.v."):]] = arr.copy()
            else:
                raise ValueError(f"unexpected optimizer state entry {name!r}")


def make_optimizer(kind, schedule, beta1=0.9, beta2=0.999, eps=1e-8):
    if kind == "sgd":
        return SgdOptimizer(schedule)
    if kind == "adam":
        return AdamOptimizer(schedule, beta1, beta2, eps)
    raise ValueError(f"unknown optimizer {kind!r}")
