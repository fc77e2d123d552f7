"""Parameter groups, gradient hooks and the plain gradient-descent step."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .autograd import Parameter
from .exceptions import ConfigurationError, ShapeError

GradHook = Callable[[np.ndarray], np.ndarray]


class ParamSet:
    """Named collection of parameters with unique names."""

    def __init__(self, params: Iterable[Parameter] = ()):
        self._params: dict[str, Parameter] = {}
        for p in params:
            self.add(p)

    def add(self, p: Parameter):
        if p.name in self._params:
            raise ConfigurationError(f"duplicate parameter name {p.name!r}")
        self._params[p.name] = p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if not p.frozen]

    def freeze(self):
        for p in self._params.values():
            p.freeze()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}


def right_projection_hook(proj: np.ndarray) -> GradHook:
    """Hook mapping a (d_out, d_in) weight gradient ``G`` to ``G @ proj``."""
    proj = np.array(proj, dtype=np.float64, copy=True)
    proj.setflags(write=False)

    def hook(grad: np.ndarray) -> np.ndarray:
        if grad.shape[-1] != proj.shape[0]:
            raise ShapeError(f"gradient has {grad.shape[-1]} columns, projector is {proj.shape}")
        return grad @ proj

    return hook


def clip_scale(grads: Mapping[str, np.ndarray], max_norm: float | None) -> float:
    """Factor that brings the global L2 norm of ``grads`` down to ``max_norm``."""
    if max_norm is None:
        return 1.0
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    return 1.0 if total <= max_norm else max_norm / total


def sgd_step(
    params: Mapping[str, Parameter] | ParamSet,
    grads: Mapping[str, np.ndarray],
    lr: float | Mapping[str, float],
    hooks: Mapping[str, GradHook] | None = None,
    max_norm: float | None = None,
) -> dict[str, np.ndarray]:
    """Apply hooks, clip the global norm, then ``p <- p - lr * g``.

    ``lr`` may be a scalar or a per-parameter mapping. Clipping happens after
    the hooks, so a projected gradient stays in its subspace. Returns the
    gradients that were applied.
    """
    hooks = hooks or {}
    lookup = params if isinstance(params, ParamSet) else dict(params)
    hooked = {}
    for name, g in grads.items():
        p = lookup[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        hooked[name] = hooks[name](g) if name in hooks else g
    scale = clip_scale(hooked, max_norm)
    for name, g in hooked.items():
        rate = lr if isinstance(lr, (int, float)) else lr[name]
        if rate <= 0:
            raise ConfigurationError("learning rate must be positive")
        if scale != 1.0:
            g = g * scale
            hooked[name] = g
        lookup[name].data = lookup[name].data - rate * g
    return hooked


@dataclass
class CosineSchedule:
    """Linear warmup to ``peak`` then cosine decay to zero over ``total`` steps."""

    peak: float
    total: int
    warmup_ratio: float = 0.03
    warmup: int = field(init=False)

    def __post_init__(self):
        if self.total < 1:
            raise ConfigurationError("schedule needs at least one step")
        self.warmup = int(math.ceil(self.warmup_ratio * self.total))

    def __call__(self, step: int) -> float:
        if step < self.warmup:
            return self.peak * (step + 1) / self.warmup
        span = max(self.total - self.warmup, 1)
        progress = (step - self.warmup) / span
        return self.peak * 0.5 * (1.0 + math.cos(math.pi * progress))
