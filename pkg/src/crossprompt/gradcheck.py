"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autograd import Parameter, Tensor, backward, no_grad


@dataclass
class GradcheckReport:
    tol: float
    errors: dict[str, float] = field(default_factory=dict)
    max_abs: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def lines(self) -> list[str]:
        out = [f"{name:<28s} rel_err={err:.3e} max_abs={self.max_abs[name]:.3e}" for name, err in self.errors.items()]
        out.append(f"max rel. err {self.max_rel_err:.3e} (tol {self.tol:.0e}): {'PASS' if self.passed else 'FAIL'}")
        return out


NORM_FLOOR = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = NORM_FLOOR) -> float:
    """Normwise relative error ``||a - n|| / max(||a||, ||n||, floor)``.

    The floor keeps gradients that vanish identically (for example attention
    key biases, which shift every score of a query equally) from turning
    round-off noise into a relative error of 1.
    """
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def numeric_gradient(
    loss_fn: Callable[[], Tensor],
    param: Parameter,
    step: float = 1e-4,
    indices: Sequence[tuple] | None = None,
) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. ``param`` entries.

    The step is scaled by ``max(1, |x|)`` per entry. Entries outside
    ``indices`` (when given) are left as NaN.
    """
    grad = np.full(param.shape, np.nan) if indices is not None else np.zeros(param.shape)
    data = param.data  # perturbed in place, restored afterwards
    it = indices if indices is not None else list(np.ndindex(param.shape))
    with no_grad():
        for idx in it:
            orig = data[idx]
            h = step * max(1.0, abs(orig))
            data[idx] = orig + h
            fp = float(loss_fn().data)
            data[idx] = orig - h
            fm = float(loss_fn().data)
            data[idx] = orig
            grad[idx] = (fp - fm) / (2 * h)
    return grad


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    tol: float = 1e-5,
    step: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    analytic: dict[str, np.ndarray] | None = None,
) -> GradcheckReport:
    """Compare ``backward`` against central differences for every parameter.

    ``max_entries`` caps the entries checked per parameter (seeded subsample).
    ``analytic`` overrides the reverse-mode gradients, which lets callers
    verify that the checker itself rejects a corrupted gradient.
    """
    if analytic is None:
        analytic = backward(loss_fn(), params)
    rng = np.random.default_rng(seed)
    report = GradcheckReport(tol=tol)
    for p in params:
        a = analytic.get(p.name, np.zeros(p.shape))
        indices = None
        if max_entries is not None and p.data.size > max_entries:
            flat = rng.choice(p.data.size, size=max_entries, replace=False)
            indices = [np.unravel_index(i, p.shape) for i in sorted(flat)]
        n = numeric_gradient(loss_fn, p, step=step, indices=indices)
        if indices is not None:
            sel = tuple(np.array(ix) for ix in zip(*indices))
            a, n = a[sel], n[sel]
        report.errors[p.name] = relative_error(a, n)
        report.max_abs[p.name] = float(np.max(np.abs(a))) if a.size else 0.0
    return report
