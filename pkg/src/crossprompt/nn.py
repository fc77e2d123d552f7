"""Layer building blocks on top of :mod:`crossprompt.autograd`."""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Parameter


def init_linear(rng: np.random.Generator, n_out: int, n_in: int, prefix: str) -> tuple[Parameter, Parameter]:
    bound = 1.0 / math.sqrt(n_in)
    w = Parameter(rng.uniform(-bound, bound, (n_out, n_in)), f"{prefix}.weight")
    b = Parameter(rng.uniform(-bound, bound, n_out), f"{prefix}.bias")
    return w, b


class MultiHeadAttention:
    """Scaled dot-product attention with separate q/k/v/out projections."""

    def __init__(self, width: int, n_heads: int, rng: np.random.Generator, prefix: str):
        if width % n_heads:
            raise ValueError(f"width {width} not divisible by {n_heads} heads")
        self.width, self.n_heads = width, n_heads
        limit = math.sqrt(6.0 / (2 * width))
        self.params = {}
        for name in ("q", "k", "v", "out"):
            w = Parameter(rng.uniform(-limit, limit, (width, width)), f"{prefix}.{name}.weight")
            b = Parameter(np.zeros(width), f"{prefix}.{name}.bias")
            self.params[name] = (w, b)

    def parameters(self) -> list[Parameter]:
        return [p for pair in self.params.values() for p in pair]

    def _heads(self, x):
        b, n, _ = x.shape
        dh = self.width // self.n_heads
        return ag.permute(ag.reshape(x, (b, n, self.n_heads, dh)), (0, 2, 1, 3))

    def __call__(self, query, key, value, key_mask=None):
        """Return ``(output, weights)``.

        ``key_mask`` is (B, Lk) with True marking usable keys; weights have
        shape (B, heads, Lq, Lk) and are exactly zero on masked keys.
        """
        q = self._heads(ag.linear(query, *self.params["q"]))
        k = self._heads(ag.linear(key, *self.params["k"]))
        v = self._heads(ag.linear(value, *self.params["v"]))
        scores = ag.matmul(q, ag.swap_last(k)) * (1.0 / math.sqrt(self.width // self.n_heads))
        mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[:, None, None, :]
        weights = ag.masked_softmax(scores, mask)
        ctx = ag.matmul(weights, v)
        b, _, n, _ = ctx.shape
        ctx = ag.reshape(ag.permute(ctx, (0, 2, 1, 3)), (b, n, self.width))
        return ag.linear(ctx, *self.params["out"]), weights


class LayerNorm:
    def __init__(self, width: int, prefix: str, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(width), f"{prefix}.gamma")
        self.beta = Parameter(np.zeros(width), f"{prefix}.beta")
        self.eps = eps

    def parameters(self):
        return [self.gamma, self.beta]

    def __call__(self, x):
        return ag.layer_norm(x, self.gamma, self.beta, self.eps)
