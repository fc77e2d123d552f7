"""Frozen stand-ins for the vision encoder, the text embedder and the decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .exceptions import ShapeError, VocabError


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BackboneParams:
    phi: np.ndarray  # (d_vis, d_v)
    psi: np.ndarray  # (vocab, d)
    pos: np.ndarray  # (s_max, d)
    bos: np.ndarray  # (d,)
    answer_pos: np.ndarray  # (answer_len, d)
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    readout: np.ndarray  # (d, vocab)
    n_heads: int

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.__dict__.items() if isinstance(v, np.ndarray)}


@dataclass
class MultimodalSequence:
    """``z' = [P; w; u]`` kept in parts. ``prompt`` may be None (plain ``z``)."""

    prompt: Tensor | None  # (B, L_p, d)
    visual: Tensor  # (B, m, d)
    text: np.ndarray  # (B, s, d)
    text_mask: np.ndarray  # (B, s)

    @property
    def n_rows(self) -> int:
        lp = 0 if self.prompt is None else self.prompt.shape[1]
        return lp + self.visual.shape[1] + self.text.shape[1]

    def dense(self) -> np.ndarray:
        parts = [] if self.prompt is None else [self.prompt.data]
        return np.concatenate(parts + [self.visual.data, self.text], axis=1)


def make_backbone_params(
    vocab: int, s_max: int, d_v: int, d_vis: int, d: int, n_heads: int, answer_len: int, seed: int
) -> BackboneParams:
    if d % n_heads:
        raise ShapeError(f"decoder width {d} not divisible by {n_heads} heads")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBAC4B0]))
    s = 1.0 / math.sqrt(d)
    return BackboneParams(
        phi=_readonly(rng.standard_normal((d_vis, d_v)) / math.sqrt(d_v)),
        psi=_readonly(rng.standard_normal((vocab, d)) * s),
        pos=_readonly(rng.standard_normal((s_max, d)) * s),
        bos=_readonly(rng.standard_normal(d) * s),
        answer_pos=_readonly(rng.standard_normal((answer_len, d)) * s),
        wq=_readonly(rng.standard_normal((d, d)) * s),
        wk=_readonly(rng.standard_normal((d, d)) * s),
        wv=_readonly(rng.standard_normal((d, d)) * s),
        wo=_readonly(rng.standard_normal((d, d)) * s),
        readout=_readonly(rng.standard_normal((d, vocab))),
        n_heads=n_heads,
    )


class FrozenBackbone:
    """Vision encoder ``phi``, text embedder ``psi`` and a one-block causal decoder.

    Nothing here is trainable. Gradients flow *through* the decoder to the
    prompt rows and the projected visual rows only.
    """

    def __init__(self, params: BackboneParams):
        self.params = params
        self.vocab, self.d = params.psi.shape
        self.s_max = params.pos.shape[0]
        self.d_vis, self.d_v = params.phi.shape
        self.answer_len = params.answer_pos.shape[0]

    @classmethod
    def create(cls, vocab, s_max, d_v, d_vis, d, n_heads, answer_len, seed) -> "FrozenBackbone":
        return cls(make_backbone_params(vocab, s_max, d_v, d_vis, d, n_heads, answer_len, seed))

    # ------------------------------------------------------------ encoders

    def encode_image(self, visual: np.ndarray) -> np.ndarray:
        visual = np.asarray(visual, dtype=np.float64)
        if visual.ndim < 2 or visual.shape[-1] != self.d_v:
            raise ShapeError(f"expected (..., m, {self.d_v}) visual features, got {visual.shape}")
        return visual @ self.params.phi.T

    def embed_text(self, tokens: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        """Token + position embeddings. Invalid positions are embedded too."""
        tokens = np.asarray(tokens)
        if tokens.shape[-1] > self.s_max:
            raise ShapeError(f"sequence length {tokens.shape[-1]} exceeds s_max={self.s_max}")
        if mask is not None and np.shape(mask) != tokens.shape:
            raise ShapeError("mask shape must match tokens")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab):
            raise VocabError(f"token id outside [0, {self.vocab})")
        n = tokens.shape[-1]
        return self.params.psi[tokens] + self.params.pos[:n]

    def answer_inputs(self, answer: np.ndarray) -> np.ndarray:
        """Teacher-forcing rows ``[BOS, y_1, ..., y_{L-1}]`` plus answer positions."""
        answer = np.asarray(answer)
        if answer.ndim != 2 or answer.shape[1] < 1:
            raise ShapeError("answer must be (B, L) with L >= 1")
        if answer.max() >= self.vocab or answer.min() < 0:
            raise VocabError("answer token outside vocabulary")
        b, L = answer.shape
        if L > self.answer_len:
            raise ShapeError(f"answer length {L} exceeds {self.answer_len}")
        rows = np.empty((b, L, self.d))
        rows[:, 0] = self.params.bos
        if L > 1:
            rows[:, 1:] = self.params.psi[answer[:, :-1]]
        return rows + self.params.answer_pos[:L]

    # ------------------------------------------------------------ decoder

    def logits(self, seq: MultimodalSequence, answer_rows: np.ndarray) -> Tensor:
        """Next-token logits (B, L, vocab) at every answer position."""
        p = self.params
        b, L, _ = answer_rows.shape
        parts = [] if seq.prompt is None else [seq.prompt]
        ctx = ag.concat(parts + [seq.visual, seq.text, answer_rows], axis=1)
        n_ctx = ctx.shape[1] - L
        n_fixed = n_ctx - seq.text.shape[1]
        mask = np.zeros((b, L, n_ctx + L), dtype=bool)
        mask[:, :, :n_fixed] = True
        mask[:, :, n_fixed:n_ctx] = np.asarray(seq.text_mask, dtype=bool)[:, None, :]
        mask[:, :, n_ctx:] = np.tril(np.ones((L, L), dtype=bool))

        h, d = p.n_heads, self.d
        dh = d // h
        q = answer_rows @ p.wq.T  # constant
        q = np.transpose(q.reshape(b, L, h, dh), (0, 2, 1, 3))
        k = ag.permute(ag.reshape(ag.linear(ctx, p.wk), (b, n_ctx + L, h, dh)), (0, 2, 3, 1))
        v = ag.permute(ag.reshape(ag.linear(ctx, p.wv), (b, n_ctx + L, h, dh)), (0, 2, 1, 3))
        scores = ag.matmul(q, k) * (1.0 / math.sqrt(dh))
        att = ag.masked_softmax(scores, mask[:, None])
        out = ag.reshape(ag.permute(ag.matmul(att, v), (0, 2, 1, 3)), (b, L, d))
        hidden = ag.add(answer_rows, ag.linear(out, p.wo))
        return ag.matmul(hidden, p.readout)

    def check_sequence(self, seq: MultimodalSequence):
        if seq.visual.ndim != 3 or seq.visual.shape[-1] != self.d:
            raise ShapeError(f"visual rows must be (B, m, {self.d})")
        if seq.prompt is not None and (seq.prompt.ndim != 3 or seq.prompt.shape[-1] != self.d):
            raise ShapeError(f"prompt rows must be (B, L_p, {self.d})")
        if seq.text.shape[:2] != np.shape(seq.text_mask):
            raise ShapeError("text mask does not match text rows")

    def token_nll(self, seq: MultimodalSequence, answer: np.ndarray) -> Tensor:
        """Per-position negative log-likelihood, shape (B, L)."""
        self.check_sequence(seq)
        answer = np.asarray(answer)
        logp = ag.log_softmax(self.logits(seq, self.answer_inputs(answer)))
        return ag.neg(ag.pick(logp, answer))

    def nll_loss(self, seq: MultimodalSequence, answer: np.ndarray) -> Tensor:
        """Mean NLL over answer positions and batch."""
        return ag.mean(self.token_nll(seq, answer))

    def greedy_decode(self, seq: MultimodalSequence, length: int | None = None) -> np.ndarray:
        """Argmax decoding; ties go to the smallest token id."""
        self.check_sequence(seq)
        length = self.answer_len if length is None else length
        b = seq.visual.shape[0]
        pred = np.zeros((b, length), dtype=np.int64)
        with ag.no_grad():
            for j in range(length):
                logits = self.logits(seq, self.answer_inputs(pred[:, : j + 1])).data
                pred[:, j] = np.argmax(logits[:, j], axis=-1)
        return pred


def exact_match(pred: np.ndarray, gold: np.ndarray) -> np.ndarray:
    """1 where the whole predicted sequence equals the gold one, else 0."""
    pred, gold = np.atleast_2d(pred), np.atleast_2d(gold)
    return np.all(pred == gold, axis=-1).astype(np.int64)
