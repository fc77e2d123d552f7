"""Input validation helpers shared by the estimators."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .exceptions import EmptyBatchError, ShapeError
from .stream import Batch, Sample, stack_samples


def check_batch(X) -> Batch:
    """Accept a Batch or a sequence of Samples; reject empty or ragged input."""
    if isinstance(X, Sample):
        X = [X]
    if not isinstance(X, Batch):
        if not isinstance(X, Sequence) or len(X) == 0:
            raise EmptyBatchError("expected a non-empty Batch or sequence of Samples")
        X = stack_samples(list(X))
    if len(X) == 0:
        raise EmptyBatchError("batch is empty")
    b = len(X)
    if X.visual.ndim != 3:
        raise ShapeError("visual features must be (B, m, d_v)")
    if X.tokens.shape != X.mask.shape or X.tokens.shape[0] != b:
        raise ShapeError("tokens and mask must both be (B, s)")
    if X.answer.ndim != 2 or X.answer.shape[0] != b or X.answer.shape[1] < 1:
        raise ShapeError("answers must be (B, L) with L >= 1")
    if not np.all(np.isfinite(X.visual)):
        raise ValueError("visual features must be finite")
    return X


def check_square(M: np.ndarray, name: str = "matrix") -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeError(f"{name} must be square, got {M.shape}")
    return M
