import numpy as np
import pytest

from crossprompt import SharedProjector
from crossprompt.exceptions import ShapeError
from crossprompt.projector import LayerTap


def test_zero_input_zero_bias_gives_zero():
    proj = SharedProjector(4, 6, seed=0)
    for layer in proj.layer_names:
        proj.bias(layer).data = np.zeros_like(proj.bias(layer).data)
    assert np.all(proj(np.zeros((3, 4))).data == 0)


def test_tap_counts_and_collect_flag(rng):
    proj = SharedProjector(4, 6, seed=0)
    for _ in range(3):
        proj(rng.standard_normal((2, 5, 4)), collect=True)
    proj(rng.standard_normal((2, 5, 4)), collect=False)
    drained = proj.drain_taps()
    assert drained["layer1"][1] == 30 and drained["layer2"][1] == 30
    assert all(count == 0 for _, count in proj.drain_taps().values())
    assert np.all(proj.drain_taps()["layer1"][0] == 0)


def test_tap_examples():
    tap = LayerTap.empty(2)
    tap.observe(np.array([[1.0, 0.0]]))
    np.testing.assert_array_equal(tap.gram, [[1, 0], [0, 0]])
    assert tap.count == 1
    tap = LayerTap.empty(2)
    tap.observe(np.array([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_array_equal(tap.gram, np.eye(2))
    assert tap.count == 2


def test_tap_symmetry_psd_and_trace(rng):
    proj = SharedProjector(5, 7, seed=3)
    x = rng.standard_normal((4, 6, 5))
    proj(x, collect=True)
    gram, count = proj.drain_taps()["layer1"]
    assert np.abs(gram - gram.T).max() < 1e-12
    assert np.linalg.eigvalsh(gram).min() >= -1e-10
    rows = x.reshape(-1, 5)
    assert abs(np.trace(gram) / count - np.mean(np.sum(rows**2, axis=1))) < 1e-10


def test_augmented_gram_includes_bias_column(rng):
    tap = LayerTap.empty(3)
    rows = rng.standard_normal((4, 3))
    tap.observe(rows)
    aug = np.hstack([rows, np.ones((4, 1))])
    np.testing.assert_allclose(tap.augmented_gram(), aug.T @ aug, atol=1e-12)


def test_projector_rejects_bad_input():
    proj = SharedProjector(4, 6)
    with pytest.raises(ShapeError):
        proj(np.zeros((2, 5)))
    with pytest.raises(ValueError):
        proj(np.full((2, 4), np.nan))
