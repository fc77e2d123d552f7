import numpy as np
import pytest

from crossprompt import autograd as ag
from crossprompt.exceptions import FrozenParameterError, MissingGradientError, ShapeError
from crossprompt.gradcheck import gradcheck, relative_error


def _param(rng, *shape, name="x"):
    return ag.Parameter(rng.standard_normal(shape), name)


def test_half_squared_norm_gradient_is_x(rng):
    x = _param(rng, 5)
    grads = ag.backward(ag.sum_(ag.mul(x, x)) * 0.5)
    np.testing.assert_allclose(grads["x"], x.data, rtol=0, atol=1e-15)


def test_linear_layer_gradcheck_is_tight(rng):
    x = rng.standard_normal((3, 4))
    W, b = _param(rng, 2, 4, name="W"), _param(rng, 2, name="b")
    report = gradcheck(lambda: ag.sum_(ag.mul(ag.linear(x, W, b), ag.linear(x, W, b))), [W, b])
    assert report.max_rel_err < 1e-8


def test_gelu_mlp_gradcheck(rng):
    x = rng.standard_normal((5, 3))
    W1, b1 = _param(rng, 6, 3, name="W1"), _param(rng, 6, name="b1")
    W2, b2 = _param(rng, 2, 6, name="W2"), _param(rng, 2, name="b2")

    def loss():
        h = ag.gelu(ag.linear(x, W1, b1))
        out = ag.linear(h, W2, b2)
        return ag.mean(ag.mul(out, out))

    assert gradcheck(loss, [W1, b1, W2, b2]).max_rel_err < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_attention_primitives_gradcheck(seed):
    rng = np.random.default_rng(seed)
    s = _param(rng, 2, 3, 5, name="scores")
    mask = rng.random((2, 3, 5)) > 0.3
    mask[..., 0] = True
    g = _param(rng, 5, name="g")
    beta = _param(rng, 5, name="beta")
    target = rng.integers(0, 5, size=(2, 3))

    def loss():
        a = ag.masked_softmax(s, mask)
        n = ag.layer_norm(ag.add(a, s), g, beta)
        lp = ag.log_softmax(ag.permute(ag.reshape(n, (2, 3, 5)), (1, 0, 2)))
        return ag.neg(ag.mean(ag.pick(lp, target.T)))

    assert gradcheck(loss, [s, g, beta]).max_rel_err < 1e-6


def test_masked_softmax_assigns_exact_zero(rng):
    scores = rng.standard_normal((4, 6)) * 50
    mask = np.array([[1, 0, 1, 0, 1, 1]] * 4, dtype=bool)
    p = ag.masked_softmax(scores, mask).data
    assert np.all(p[:, ~mask[0]] == 0.0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_concat_getitem_matmul_gradcheck(rng):
    a, b = _param(rng, 2, 3, name="a"), _param(rng, 2, 2, name="b")
    m = _param(rng, 5, 4, name="m")

    def loss():
        c = ag.concat([a, b], axis=1)
        return ag.sum_(ag.gelu(ag.matmul(c, m)[:, 1:3]))

    assert gradcheck(loss, [a, b, m]).max_rel_err < 1e-7


def test_frozen_parameter_gets_no_gradient(rng):
    x, y = _param(rng, 3, name="x"), _param(rng, 3, name="y")
    y.freeze()
    grads = ag.backward(ag.sum_(ag.mul(x, y)))
    assert set(grads) == {"x"}
    with pytest.raises(FrozenParameterError):
        y.data = np.zeros(3)
    with pytest.raises(ValueError):
        y.data[0] = 1.0


def test_detached_graph_raises(rng):
    x, y = _param(rng, 3, name="x"), _param(rng, 3, name="y")
    with pytest.raises(MissingGradientError):
        ag.backward(ag.sum_(ag.mul(x, x)), [x, y])
    with ag.no_grad():
        loss = ag.sum_(ag.mul(x, x))
    with pytest.raises(MissingGradientError):
        ag.backward(loss)


def test_backward_needs_scalar(rng):
    x = _param(rng, 3)
    with pytest.raises(ShapeError):
        ag.backward(ag.mul(x, x))


def test_repeated_backward_does_not_accumulate(rng):
    x = _param(rng, 4)
    g1 = ag.backward(ag.sum_(ag.mul(x, x)))["x"].copy()
    g2 = ag.backward(ag.sum_(ag.mul(x, x)))["x"]
    np.testing.assert_array_equal(g1, g2)


def test_corrupted_gradient_is_rejected(rng):
    x = rng.standard_normal((3, 4))
    W = _param(rng, 2, 4, name="W")

    def loss():
        return ag.sum_(ag.gelu(ag.linear(x, W)))

    good = ag.backward(loss(), [W])
    bad = {"W": good["W"].copy()}
    bad["W"][0, 0] += 1.0
    assert gradcheck(loss, [W], analytic=good).passed
    assert not gradcheck(loss, [W], analytic=bad).passed


def test_relative_error_floor_and_scale():
    a = np.array([1.0, 2.0])
    assert relative_error(a, a) == 0.0
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0
    assert relative_error(a, 2 * a) == pytest.approx(0.5)
