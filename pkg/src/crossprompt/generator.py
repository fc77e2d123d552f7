"""Instance-specific soft prompt generator.

Two stages. Instruction-aware query initialisation pools the valid
instruction rows into ``L_p`` segment summaries and lets them attend over the
whole instruction. Vision-guided synthesis lets those queries attend over the
projected visual rows, then an MLP head maps the result to decoder width.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .exceptions import ConfigurationError, DegenerateInputError, FrozenParameterError, ShapeError
from .nn import LayerNorm, MultiHeadAttention, init_linear
from .optim import ParamSet

MODES = ("segment", "mean", "static", "learnable")


def segment_bounds(s: int, n_segments: int) -> list[tuple[int, int]]:
    """Balanced partition: segment p covers ``[floor(p*s/n), floor((p+1)*s/n))``."""
    return [((p * s) // n_segments, ((p + 1) * s) // n_segments) for p in range(n_segments)]


def segment_pool(h: np.ndarray, mask: np.ndarray, n_segments: int) -> np.ndarray:
    """Masked mean within each segment as a (B, L_p, s) pooling matrix.

    Returned as weights so the pooling can be applied to a Tensor by matmul.
    Empty or fully masked segments get an all-zero row.
    """
    b, s = mask.shape
    weights = np.zeros((b, n_segments, s))
    for p, (lo, hi) in enumerate(segment_bounds(s, n_segments)):
        valid = mask[:, lo:hi].astype(np.float64)
        weights[:, p, lo:hi] = valid / np.maximum(valid.sum(axis=1, keepdims=True), 1.0)
    return weights


class PromptGenerator:
    """Maps projected visual rows ``w`` and instruction embeddings ``u`` to ``P``."""

    def __init__(
        self,
        d: int,
        hidden: int = 32,
        prompt_len: int = 4,
        n_heads: int = 4,
        dropout: float = 0.1,
        mode: str = "segment",
        cross_attention: bool = True,
        seed: int = 0,
        prefix: str = "generator",
    ):
        if mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
        if prompt_len < 1:
            raise ConfigurationError("prompt length must be >= 1")
        if hidden < n_heads or hidden % n_heads:
            raise ConfigurationError("hidden width must be a multiple of the head count")
        if not 0.0 <= dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        self.d, self.hidden, self.prompt_len, self.n_heads = d, hidden, prompt_len, n_heads
        self.dropout, self.mode, self.cross_attention = dropout, mode, cross_attention
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6E4]))
        self._dropout_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD40]))

        self.f_u = init_linear(rng, hidden, d, f"{prefix}.f_u")
        self.f_v = init_linear(rng, hidden, d, f"{prefix}.f_v")
        self.query_mha = MultiHeadAttention(hidden, n_heads, rng, f"{prefix}.query_mha")
        self.query_ln = LayerNorm(hidden, f"{prefix}.query_ln")
        self.cross_mha = MultiHeadAttention(hidden, n_heads, rng, f"{prefix}.cross_mha")
        self.cross_ln = LayerNorm(hidden, f"{prefix}.cross_ln")
        self.head1 = init_linear(rng, 2 * hidden, hidden, f"{prefix}.head1")
        self.head2 = init_linear(rng, d, 2 * hidden, f"{prefix}.head2")
        self.static_prompt = ag.Parameter(0.02 * rng.standard_normal((prompt_len, d)), f"{prefix}.static_prompt")
        self.learnable_queries = ag.Parameter(rng.standard_normal((prompt_len, hidden)), f"{prefix}.learnable_queries")

        self.params = ParamSet(self._active_params())
        self.frozen = False

    def _active_params(self):
        if self.mode == "static":
            return [self.static_prompt]
        ps = []
        if self.mode == "learnable":
            ps.append(self.learnable_queries)
        else:
            ps += [*self.f_u, *self.query_mha.parameters(), *self.query_ln.parameters()]
        if self.cross_attention:
            ps += [*self.f_v, *self.cross_mha.parameters(), *self.cross_ln.parameters()]
        ps += [*self.head1, *self.head2]
        return ps

    def freeze(self):
        for p in self._all_params():
            p.freeze()
        self.frozen = True

    def reseed_dropout(self, seed: int):
        if self.frozen:
            raise FrozenParameterError("generator is frozen")
        self._dropout_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD40]))

    # ------------------------------------------------------------ stages

    def init_queries(self, u, mask: np.ndarray) -> Tensor:
        """Instruction-aware queries ``Q`` of shape (B, L_p, H)."""
        u = ag.as_tensor(u)
        mask = np.asarray(mask, dtype=bool)
        if u.ndim == 2:
            return self.init_queries(ag.reshape(u, (1,) + u.shape), mask[None])[0]
        if u.shape[1] < 1:
            raise ShapeError("instruction sequence is empty")
        if mask.shape != u.shape[:2]:
            raise ShapeError("mask must match instruction rows")
        if not mask.any(axis=1).all():
            raise DegenerateInputError("every instruction needs at least one valid position")
        hu = ag.linear(u, *self.f_u)
        if self.mode == "mean":
            w = mask / mask.sum(axis=1, keepdims=True)
            pooled = ag.matmul(np.repeat(w[:, None, :], self.prompt_len, axis=1), hu)
        else:
            pooled = ag.matmul(segment_pool(hu.data, mask, self.prompt_len), hu)
        attended, _ = self.query_mha(pooled, hu, hu, key_mask=mask)
        return self.query_ln(attended)

    def synthesize(self, queries, w, train_mode: bool = False) -> Tensor:
        """Soft prompt ``P`` (B, L_p, d) from queries and projected visual rows."""
        return self._synthesize(queries, w, train_mode)[0]

    def _synthesize(self, queries, w, train_mode):
        q = ag.as_tensor(queries)
        w = ag.as_tensor(w)
        if q.ndim != 3 or w.ndim != 3 or q.shape[0] != w.shape[0]:
            raise ShapeError("synthesize expects batched (B, L_p, H) queries and (B, m, d) visual rows")
        if q.shape[-1] != self.hidden or w.shape[-1] != self.d:
            raise ShapeError("query or visual width mismatch")
        if self.cross_attention:
            hv = ag.linear(w, *self.f_v)
            ctx, weights = self.cross_mha(q, hv, hv)
            r = self.cross_ln(ag.add(q, ctx))
            attention = weights.data.mean(axis=1)
        else:
            r = q
            attention = None
        if train_mode and self.dropout > 0:
            keep = self._dropout_rng.random(r.shape) >= self.dropout
            r = ag.mul(r, keep / (1.0 - self.dropout))
        hid = ag.gelu(ag.linear(r, *self.head1))
        return ag.linear(hid, *self.head2), attention

    def generate(self, w, u, mask, train_mode: bool = False) -> Tensor:
        return self.generate_with_attention(w, u, mask, train_mode)[0]

    __call__ = generate

    def generate_with_attention(self, w, u, mask, train_mode: bool = False):
        """``(P, attention)`` where attention is the head-averaged (B, L_p, m)
        prompt-to-visual weight tensor, or None when no cross-attention ran."""
        w, u = ag.as_tensor(w), ag.as_tensor(u)
        if w.ndim == 2:
            p, att = self.generate_with_attention(
                ag.reshape(w, (1,) + w.shape), ag.reshape(u, (1,) + u.shape), np.asarray(mask)[None], train_mode
            )
            return p[0], None if att is None else att[0]
        b = w.shape[0]
        if self.mode == "static":
            return ag.add(ag.as_tensor(np.zeros((b, 1, 1))), self.static_prompt), None
        if self.mode == "learnable":
            q = ag.add(ag.as_tensor(np.zeros((b, 1, 1))), self.learnable_queries)
        else:
            q = self.init_queries(u, mask)
        return self._synthesize(q, w, train_mode)

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self._all_params()}

    def _all_params(self):
        return [
            *self.f_u, *self.f_v,
            *self.query_mha.parameters(), *self.query_ln.parameters(),
            *self.cross_mha.parameters(), *self.cross_ln.parameters(),
            *self.head1, *self.head2, self.static_prompt, self.learnable_queries,
        ]  # fmt: skip

    def load_state(self, arrays: dict[str, np.ndarray]):
        for p in self._all_params():
            p.data = arrays[p.name]
