"""Trainable two-layer GELU projector with input-statistics taps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .exceptions import ShapeError
from .nn import init_linear
from .optim import ParamSet


@dataclass
class LayerTap:
    """Streaming sum of outer products of the rows fed into one linear layer."""

    gram: np.ndarray
    row_sum: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, d_in: int) -> "LayerTap":
        return cls(np.zeros((d_in, d_in)), np.zeros(d_in), 0)

    def observe(self, rows: np.ndarray):
        rows = rows.reshape(-1, rows.shape[-1])
        self.gram += rows.T @ rows
        self.row_sum += rows.sum(axis=0)
        self.count += rows.shape[0]

    def augmented_gram(self) -> np.ndarray:
        """Gram sum of ``[x; 1]``, the input seen by ``[W, b]``."""
        d = self.gram.shape[0]
        g = np.empty((d + 1, d + 1))
        g[:d, :d] = self.gram
        g[:d, d] = g[d, :d] = self.row_sum
        g[d, d] = self.count
        return g


class SharedProjector:
    """``w = W2 gelu(W1 x + b1) + b2`` applied row-wise."""

    layer_names = ("layer1", "layer2")

    def __init__(self, d_in: int, d_out: int, d_hidden: int | None = None, seed: int = 0):
        d_hidden = d_out if d_hidden is None else d_hidden
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9807]))
        self.d_in, self.d_hidden, self.d_out = d_in, d_hidden, d_out
        w1, b1 = init_linear(rng, d_hidden, d_in, "projector.layer1")
        w2, b2 = init_linear(rng, d_out, d_hidden, "projector.layer2")
        self.params = ParamSet([w1, b1, w2, b2])
        self.taps = {"layer1": LayerTap.empty(d_in), "layer2": LayerTap.empty(d_hidden)}

    def weight(self, layer: str):
        return self.params[f"projector.{layer}.weight"]

    def bias(self, layer: str):
        return self.params[f"projector.{layer}.bias"]

    def __call__(self, features, collect: bool = False):
        """Forward pass on (..., m, d_in) features; returns a Tensor.

        With ``collect`` each linear layer adds its input rows to its tap.
        """
        x = ag.as_tensor(features)
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"projector expects width {self.d_in}, got {x.shape[-1]}")
        if not np.all(np.isfinite(x.data)):
            raise ValueError("projector input must be finite")
        if collect:
            self.taps["layer1"].observe(x.data)
        h = ag.gelu(ag.linear(x, self.weight("layer1"), self.bias("layer1")))
        if collect:
            self.taps["layer2"].observe(h.data)
        return ag.linear(h, self.weight("layer2"), self.bias("layer2"))

    project = __call__

    def drain_taps(self, augmented: bool = False) -> dict[str, tuple[np.ndarray, int]]:
        """Return ``{layer: (gram_sum, count)}`` and reset the taps.

        With ``augmented`` the Gram sums are over ``[x; 1]`` so that a bias
        column can be projected together with the weights.
        """
        out = {}
        for name, tap in self.taps.items():
            g = tap.augmented_gram() if augmented else tap.gram
            out[name] = (0.5 * (g + g.T), tap.count)
            self.taps[name] = LayerTap.empty(tap.gram.shape[0])
        return out
