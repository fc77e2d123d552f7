"""Continual-learning metrics on an accuracy matrix, and routing diagnostics.

The accuracy matrix is stored as ``A[s, t]`` (0-based): accuracy in percent
on task ``s`` after training up to task ``t``, defined for ``s <= t`` and NaN
elsewhere. Public functions take 1-based stage numbers to match the usual
notation ``B_t`` / ``M_t``.
"""

from __future__ import annotations

import csv
import io
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import IncompleteMatrixError, UndefinedStageError


class MalformedMatrixError(ValueError):
    pass


def as_accuracy_matrix(A) -> np.ndarray:
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise MalformedMatrixError(f"accuracy matrix must be square, got shape {A.shape}")
    upper = np.triu(np.ones(A.shape, dtype=bool))
    vals = A[upper & ~np.isnan(A)]
    if np.any((vals < 0) | (vals > 100)):
        raise MalformedMatrixError("accuracies must lie in [0, 100]")
    return A


def _check_stage(A: np.ndarray, t: int, first: int):
    T = A.shape[0]
    if not first <= t <= T:
        raise UndefinedStageError(f"stage {t} outside [{first}, {T}]")
    col = A[:t, t - 1]
    if np.any(np.isnan(col)):
        raise IncompleteMatrixError(f"stage {t} is missing entries")


def final_average(A) -> float:
    A = as_accuracy_matrix(A)
    T = A.shape[0]
    if np.any(np.isnan(A[:, T - 1])):
        raise IncompleteMatrixError("final stage has missing entries")
    return float(A[:, T - 1].mean())


def backward_transfer(A, t: int) -> float:
    """Mean drop from each earlier task's just-trained accuracy to stage ``t``."""
    A = as_accuracy_matrix(A)
    _check_stage(A, t, 2)
    s = np.arange(t - 1)
    if np.any(np.isnan(A[s, s])):
        raise IncompleteMatrixError("diagonal entries missing")
    return float(np.mean(A[s, s] - A[s, t - 1]))


def mean_accuracy(A, t: int) -> float:
    A = as_accuracy_matrix(A)
    _check_stage(A, t, 1)
    return float(A[:t, t - 1].mean())


def stage_metrics(A) -> dict:
    """B_t for t=2..T, M_t for t=1..T, and both averaged over t=2..T."""
    A = as_accuracy_matrix(A)
    T = A.shape[0]
    bwt = {t: backward_transfer(A, t) for t in range(2, T + 1)}
    ma = {t: mean_accuracy(A, t) for t in range(1, T + 1)}
    later = [t for t in range(2, T + 1)]
    return {
        "final_average": final_average(A),
        "bwt": bwt,
        "ma": ma,
        "bwt_mean": float(np.mean([bwt[t] for t in later])) if later else float("nan"),
        "ma_mean": float(np.mean([ma[t] for t in later])) if later else ma[1],
    }


def routing_confusion(log: Iterable[tuple[int, int]], n_tasks: int | None = None) -> tuple[np.ndarray, list, list]:
    """Row-normalised (percent) confusion of true vs routed task.

    Rows are the true tasks present in the log and columns the union of true
    and routed tasks; with ``n_tasks`` both are ``range(n_tasks)`` and every
    row must have at least one sample. Returns ``(matrix, row_labels, col_labels)``.
    """
    pairs = [(int(a), int(b)) for a, b in log]
    if not pairs:
        raise ValueError("empty routing log")
    if n_tasks is None:
        rows = sorted({a for a, _ in pairs})
        cols = sorted({a for a, _ in pairs} | {b for _, b in pairs})
    else:
        rows = cols = list(range(n_tasks))
    ri = {r: i for i, r in enumerate(rows)}
    ci = {c: i for i, c in enumerate(cols)}
    counts = np.zeros((len(rows), len(cols)))
    for a, b in pairs:
        if a not in ri or b not in ci:
            raise ValueError(f"task id outside range: {(a, b)}")
        counts[ri[a], ci[b]] += 1
    totals = counts.sum(axis=1, keepdims=True)
    if np.any(totals == 0):
        empty = [rows[i] for i in np.flatnonzero(totals[:, 0] == 0)]
        raise ValueError(f"tasks without routed samples: {empty}")
    return 100.0 * counts / totals, rows, cols


def round_half_up(x: float, places: int = 2) -> str:
    q = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


# ---------------------------------------------------------------- CSV


def read_matrix_csv(path_or_text) -> tuple[np.ndarray, list[str]]:
    """Parse an accuracy-matrix CSV given as a path or as CSV text.

    Layout: header ``stage,<task 1>,...,<task T>``; one row per stage (label
    then values, blank above the diagonal). Returns ``(A, task_names)`` with
    ``A[s, t]`` = task ``s`` after stage ``t``.
    """
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text):
        text = Path(path_or_text).read_text()
    else:
        text = str(path_or_text)
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise MalformedMatrixError("matrix CSV needs a header and at least one row")
    header, body = rows[0], rows[1:]
    names = [h.strip() for h in header[1:]]
    T = len(names)
    if T == 0 or len(body) != T:
        raise MalformedMatrixError(f"expected {T} stage rows, found {len(body)}")
    A = np.full((T, T), np.nan)
    for t, row in enumerate(body):
        cells = [c.strip() for c in row[1:]]
        if len(cells) > T:
            raise MalformedMatrixError(f"row {t + 1} has too many cells")
        for s, cell in enumerate(cells):
            if cell == "":
                continue
            if s > t:
                raise MalformedMatrixError(f"entry above the diagonal in row {t + 1}")
            try:
                A[s, t] = float(cell)
            except ValueError as exc:
                raise MalformedMatrixError(f"bad number {cell!r} in row {t + 1}") from exc
    return as_accuracy_matrix(A), names


def write_matrix_csv(A, names: Sequence[str] | None = None) -> str:
    A = as_accuracy_matrix(A)
    T = A.shape[0]
    names = list(names) if names is not None else [f"task_{i + 1}" for i in range(T)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", *names])
    for t in range(T):
        w.writerow([names[t]] + ["" if np.isnan(A[s, t]) else round_half_up(A[s, t]) for s in range(T)])
    return buf.getvalue()


def write_stage_metrics_csv(metrics: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "bwt", "mean_accuracy"])
    for t, ma in metrics["ma"].items():
        b = metrics["bwt"].get(t)
        w.writerow([t, "" if b is None else round_half_up(b), round_half_up(ma)])
    w.writerow(["average", round_half_up(metrics["bwt_mean"]), round_half_up(metrics["ma_mean"])])
    return buf.getvalue()


def write_confusion_csv(matrix: np.ndarray, rows: Sequence, cols: Sequence) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true_task", *[f"routed_{c + 1}" for c in cols]])
    for r, vals in zip(rows, matrix):
        w.writerow([r + 1, *[round_half_up(v) for v in vals]])
    return buf.getvalue()
