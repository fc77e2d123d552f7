"""Null-space gradient projection for the shared projector.

Per linear layer we keep the running mean ``M`` of outer products of the
layer's input rows. The leading eigen-directions that carry an ``eps``
fraction of the spectral mass are the retained subspace; weight gradients
are right-multiplied by the projector onto its orthogonal complement.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError, EmptyStatisticsError, ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MomentStats:
    M: np.ndarray
    N: int

    @classmethod
    def zeros(cls, d_in: int) -> "MomentStats":
        return cls(np.zeros((d_in, d_in)), 0)


@dataclass(frozen=True)
class ProjectionMatrix:
    proj: np.ndarray  # (d_in, d_in)
    rank: int
    v_perp: np.ndarray  # (d_in, d_in - rank)
    v_par: np.ndarray  # (d_in, rank)
    spectrum: np.ndarray  # descending

    @classmethod
    def identity(cls, d_in: int) -> "ProjectionMatrix":
        eye = np.eye(d_in)
        return cls(eye, 0, eye, np.zeros((d_in, 0)), np.zeros(d_in))


def update_moment(prev: MomentStats, gram_sum: np.ndarray, n_new: int) -> MomentStats:
    """Merge a new batch of outer-product sums into the running mean."""
    if n_new < 1:
        raise EmptyStatisticsError("no feature rows were observed for this task")
    gram_sum = np.asarray(gram_sum, dtype=np.float64)
    if gram_sum.shape != prev.M.shape:
        raise ShapeError(f"gram sum shape {gram_sum.shape} != moment shape {prev.M.shape}")
    n = prev.N + n_new
    M = (prev.N * prev.M + gram_sum) / n
    return MomentStats(0.5 * (M + M.T), n)


def sorted_eigh(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric PSD matrix, deterministic ordering.

    Eigenvalues descending (ties keep LAPACK's ascending-index order),
    negatives from round-off clipped to zero, and each eigenvector's first
    non-negligible component made positive.
    """
    vals, vecs = np.linalg.eigh(M)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    for j in range(vecs.shape[1]):
        col = vecs[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            vecs[:, j] = -col
    return vals, vecs


def energy_rank(spectrum: np.ndarray, eps: float) -> int:
    """Smallest r with cumulative energy fraction >= eps, clamped to [1, d-1]."""
    total = spectrum.sum()
    d = spectrum.shape[0]
    if total <= 0:
        return 0
    frac = np.cumsum(spectrum) / total
    # tolerate round-off right at the threshold
    r = int(np.searchsorted(frac, eps - 1e-12 * max(1.0, eps)) + 1)
    return max(1, min(r, d - 1))


def compute_projection(M: np.ndarray, eps: float) -> ProjectionMatrix:
    if not 0.0 < eps <= 1.0:
        raise ConfigurationError("eps must lie in (0, 1]")
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeError("moment matrix must be square")
    d = M.shape[0]
    if not np.any(M):
        warnings.warn("zero moment matrix: no directions retained, projection is the identity", stacklevel=2)
        return ProjectionMatrix.identity(d)
    vals, vecs = sorted_eigh(M)
    r = energy_rank(vals, eps)
    v_par, v_perp = vecs[:, :r].copy(), vecs[:, r:].copy()
    proj = v_perp @ v_perp.T
    return ProjectionMatrix(0.5 * (proj + proj.T), r, v_perp, v_par, vals)


def project_gradient(grad_w: np.ndarray, proj: ProjectionMatrix | np.ndarray) -> np.ndarray:
    P = proj.proj if isinstance(proj, ProjectionMatrix) else np.asarray(proj)
    grad_w = np.asarray(grad_w, dtype=np.float64)
    if grad_w.shape[-1] != P.shape[0]:
        raise ShapeError(f"gradient has {grad_w.shape[-1]} columns, projection is {P.shape}")
    return grad_w @ P


def interference_bound(grad_w: np.ndarray, proj: ProjectionMatrix, v_old: np.ndarray, eta: float) -> tuple[float, float]:
    """Output change of an old feature after one projected step, and its bound.

    lhs = ||eta (grad_w Pi) v_old||, rhs = eta sigma_max(grad_w) ||V_perp^T v_old||.
    """
    if eta <= 0:
        raise ConfigurationError("eta must be positive")
    lhs = float(np.linalg.norm(eta * project_gradient(grad_w, proj) @ v_old))
    rhs = float(eta * np.linalg.norm(grad_w, 2) * np.linalg.norm(proj.v_perp.T @ v_old))
    return lhs, rhs


def complement_energy(M: np.ndarray, proj: ProjectionMatrix) -> float:
    """Mean squared norm of old features inside the update subspace."""
    return float(np.trace(proj.v_perp.T @ M @ proj.v_perp))


class NullSpaceProjector(TransformerMixin, BaseEstimator):
    """Estimator view of one layer: ``partial_fit`` on feature rows, ``transform`` gradients.

    Parameters
    ----------
    eps : float, default=0.99
        Fraction of spectral energy kept in the retained subspace.
    """

    def __init__(self, eps: float = 0.99):
        self.eps = eps

    def partial_fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if not hasattr(self, "moments_"):
            self.moments_ = MomentStats.zeros(X.shape[1])
        elif X.shape[1] != self.moments_.M.shape[0]:
            raise ShapeError("feature width changed between calls")
        self.moments_ = update_moment(self.moments_, X.T @ X, X.shape[0])
        self.projection_ = compute_projection(self.moments_.M, self.eps)
        self.n_features_in_ = X.shape[1]
        return self

    def fit(self, X, y=None):
        for attr in ("moments_", "projection_"):
            self.__dict__.pop(attr, None)
        return self.partial_fit(X, y)

    def transform(self, X):
        """Right-project gradient rows (each row is one output unit's gradient)."""
        check_is_fitted(self, "projection_")
        return project_gradient(check_array(X, dtype=np.float64), self.projection_)
