"""Seeded synthetic multimodal task streams.

Each task lives in its own visual subspace and carries its own instruction
vocabulary. The answer for a sample is a fixed per-task readout of the
sample's subspace coordinates and the instruction's intent token.

Token layout of the instruction sequence (length ``s_max``)::

    [intent, filler, ..., filler | answer copy (L tokens) | PAD ...]
     <------ valid -------------> <------------ invalid ----------->

The answer copy and padding are present in the sequence, as in an
instruction-tuning batch, and are masked out for prompt generation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .exceptions import BoundsError, ConfigurationError

PAD = 0
NOISE_RATIO = 0.05
TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class StreamConfig:
    n_tasks: int = 4
    samples_per_task: int = 250
    m: int = 8
    d_v: int = 16
    s_max: int = 8
    vocab: int = 64
    subspace_dim: int = 2
    separation: float = 10.0
    seed: int = 0
    answer_len: int = 1
    n_intents: int = 3
    n_fillers: int = 4
    n_answers: int = 4
    row_spread: float = 0.5

    def __post_init__(self):
        validate_stream_config(self)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def validate_stream_config(cfg: StreamConfig):
    def need(cond, msg):
        if not cond:
            raise ConfigurationError(msg)

    need(cfg.n_tasks >= 1, "n_tasks must be >= 1")
    need(cfg.vocab >= 2, "vocab must be >= 2")
    need(cfg.m >= 1 and cfg.d_v >= 1, "m and d_v must be >= 1")
    need(1 <= cfg.subspace_dim <= cfg.d_v, "subspace_dim must lie in [1, d_v]")
    need(cfg.separation >= 0, "separation must be >= 0")
    need(cfg.answer_len >= 1, "answer_len must be >= 1")
    need(cfg.s_max >= cfg.answer_len + 1, "s_max must leave room for an instruction and the answer")
    need(min(cfg.n_intents, cfg.n_fillers, cfg.n_answers) >= 1, "token group sizes must be >= 1")
    n_train = int(cfg.samples_per_task * TRAIN_FRACTION)
    need(n_train >= 1 and cfg.samples_per_task - n_train >= 1, "samples_per_task too small for an 80/20 split")
    need(0 <= cfg.seed < 2**64, "seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class Sample:
    visual: np.ndarray  # (m, d_v) raw vision features
    tokens: np.ndarray  # (s_max,) instruction sequence incl. answer copy and padding
    mask: np.ndarray  # (s_max,) True on instruction positions
    answer: np.ndarray  # (L,)
    task_id: int
    intent: int

    def __post_init__(self):
        for arr in (self.visual, self.tokens, self.mask, self.answer):
            arr.setflags(write=False)


@dataclass(frozen=True)
class Batch:
    visual: np.ndarray  # (B, m, d_v)
    tokens: np.ndarray  # (B, s)
    mask: np.ndarray  # (B, s)
    answer: np.ndarray  # (B, L)
    task_ids: np.ndarray  # (B,)

    def __len__(self):
        return self.visual.shape[0]


@dataclass(frozen=True)
class Task:
    id: int
    train: tuple
    test: tuple
    basis: np.ndarray  # (d_v, subspace_dim), never seen by the learner
    config: StreamConfig = field(repr=False)
    intent_tokens: tuple = ()
    filler_tokens: tuple = ()
    answer_tokens: tuple = ()

    def split(self, name: str) -> tuple:
        if name == "train":
            return self.train
        if name == "test":
            return self.test
        raise ValueError(f"unknown split {name!r}")


@dataclass(frozen=True)
class TaskStream:
    config: StreamConfig
    tasks: tuple

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i) -> Task:
        return self.tasks[i]


def _task_bases(cfg: StreamConfig, rng: np.random.Generator) -> list[np.ndarray]:
    k = cfg.subspace_dim
    if cfg.n_tasks * k <= cfg.d_v:
        q, _ = np.linalg.qr(rng.standard_normal((cfg.d_v, cfg.n_tasks * k)))
        return [q[:, t * k : (t + 1) * k].copy() for t in range(cfg.n_tasks)]
    # not enough room for mutually orthogonal subspaces
    return [np.linalg.qr(rng.standard_normal((cfg.d_v, k)))[0] for _ in range(cfg.n_tasks)]


def _task_tokens(cfg: StreamConfig, t: int) -> tuple[tuple, tuple, tuple]:
    per_task = cfg.n_intents + cfg.n_fillers + cfg.n_answers
    # token 0 is padding; the rest is dealt out task by task, wrapping if needed
    pool = cfg.vocab - 1 if cfg.vocab > 2 else cfg.vocab
    base = 1 if cfg.vocab > 2 else 0
    ids = [base + (t * per_task + i) % pool for i in range(per_task)]
    a, b = cfg.n_intents, cfg.n_intents + cfg.n_fillers
    return tuple(ids[:a]), tuple(ids[a:b]), tuple(ids[b:])


def answer_rule(
    coords: np.ndarray, intent: int, readout: np.ndarray, answer_tokens: Sequence[int]
) -> np.ndarray:
    """Answer tokens from centred subspace coordinates and the intent index.

    ``readout`` has shape (L, n_answers, subspace_dim + n_intents).
    """
    onehot = np.zeros(readout.shape[-1] - coords.shape[0])
    onehot[intent] = 1.0
    z = np.concatenate([coords, onehot])
    scores = readout @ z  # (L, n_answers)
    return np.asarray([answer_tokens[j] for j in np.argmax(scores, axis=-1)], dtype=np.int64)


def _make_task(cfg: StreamConfig, t: int, basis: np.ndarray, rng: np.random.Generator) -> Task:
    k, L = cfg.subspace_dim, cfg.answer_len
    intents, fillers, answers = _task_tokens(cfg, t)
    center = rng.standard_normal(k)
    center /= np.linalg.norm(center)
    center *= cfg.separation
    readout = rng.standard_normal((L, cfg.n_answers, k + cfg.n_intents))
    signal_scale = np.sqrt(cfg.separation**2 + k * (1.0 + cfg.row_spread**2))
    noise_std = NOISE_RATIO * signal_scale / np.sqrt(cfg.d_v)

    samples = []
    for _ in range(cfg.samples_per_task):
        coeff = rng.standard_normal(k)
        rows = center + coeff + cfg.row_spread * rng.standard_normal((cfg.m, k))
        visual = rows @ basis.T + noise_std * rng.standard_normal((cfg.m, cfg.d_v))
        intent = int(rng.integers(cfg.n_intents))
        n_instr = int(rng.integers(1, cfg.s_max - L + 1))
        tokens = np.full(cfg.s_max, PAD, dtype=np.int64)
        tokens[0] = intents[intent]
        if n_instr > 1:
            tokens[1:n_instr] = np.asarray(fillers)[rng.integers(len(fillers), size=n_instr - 1)]
        coords = basis.T @ visual.mean(axis=0) - center
        answer = answer_rule(coords, intent, readout, answers)
        tokens[n_instr : n_instr + L] = answer
        mask = np.zeros(cfg.s_max, dtype=bool)
        mask[:n_instr] = True
        samples.append(Sample(visual, tokens, mask, answer, t, intent))

    n_train = int(cfg.samples_per_task * TRAIN_FRACTION)
    basis = basis.copy()
    basis.setflags(write=False)
    return Task(
        id=t,
        train=tuple(samples[:n_train]),
        test=tuple(samples[n_train:]),
        basis=basis,
        config=cfg,
        intent_tokens=intents,
        filler_tokens=fillers,
        answer_tokens=answers,
    )


def generate_stream(cfg: StreamConfig) -> TaskStream:
    """Build the full task stream; a pure function of ``cfg``."""
    validate_stream_config(cfg)
    root = np.random.SeedSequence(cfg.seed)
    basis_seq, *task_seqs = root.spawn(cfg.n_tasks + 1)
    bases = _task_bases(cfg, np.random.default_rng(basis_seq))
    tasks = tuple(_make_task(cfg, t, bases[t], np.random.default_rng(task_seqs[t])) for t in range(cfg.n_tasks))
    return TaskStream(cfg, tasks)


def stack_samples(samples: Sequence[Sample], cfg: StreamConfig | None = None) -> Batch:
    if len(samples) == 0:
        if cfg is None:
            raise ValueError("empty batch needs a config for its shapes")
        return Batch(
            visual=np.zeros((0, cfg.m, cfg.d_v)),
            tokens=np.zeros((0, cfg.s_max), dtype=np.int64),
            mask=np.zeros((0, cfg.s_max), dtype=bool),
            answer=np.zeros((0, cfg.answer_len), dtype=np.int64),
            task_ids=np.zeros(0, dtype=np.int64),
        )
    return Batch(
        visual=np.stack([s.visual for s in samples]),
        tokens=np.stack([s.tokens for s in samples]),
        mask=np.stack([s.mask for s in samples]),
        answer=np.stack([s.answer for s in samples]),
        task_ids=np.asarray([s.task_id for s in samples], dtype=np.int64),
    )


def sample_batch(task: Task, split: str, indices: Sequence[int]) -> Batch:
    """Gather samples of one split in the given order."""
    pool = task.split(split)
    idx = list(indices)
    for i in idx:
        if not 0 <= i < len(pool):
            raise BoundsError(f"index {i} outside {split} split of size {len(pool)}")
    return stack_samples([pool[i] for i in idx], task.config)
