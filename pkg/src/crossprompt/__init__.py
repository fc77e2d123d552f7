"""Continual instruction tuning with instance-specific soft prompts, at desk scale."""

from importlib import import_module

_EXPORTS = {
    "FrozenBackbone": "backbone",
    "MultimodalSequence": "backbone",
    "exact_match": "backbone",
    "PromptGenerator": "generator",
    "NullSpaceProjector": "nullspace",
    "compute_projection": "nullspace",
    "project_gradient": "nullspace",
    "update_moment": "nullspace",
    "SharedProjector": "projector",
    "PrototypeRouter": "router",
    "RoutingEncoder": "router",
    "StreamConfig": "stream",
    "generate_stream": "stream",
    "sample_batch": "stream",
    "ContinualPromptTuner": "trainer",
}


def __getattr__(name):
    # submodules load on first use so light commands skip the sklearn import
    if name in _EXPORTS:
        return getattr(import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


__version__ = "0.1.0"

__all__ = [
    "ContinualPromptTuner",
    "FrozenBackbone",
    "MultimodalSequence",
    "NullSpaceProjector",
    "PromptGenerator",
    "PrototypeRouter",
    "RoutingEncoder",
    "SharedProjector",
    "StreamConfig",
    "compute_projection",
    "exact_match",
    "generate_stream",
    "project_gradient",
    "sample_batch",
    "update_moment",
]
