import math

import numpy as np
import pytest

from crossprompt import autograd as ag
from crossprompt.backbone import FrozenBackbone, MultimodalSequence, exact_match
from crossprompt.exceptions import ShapeError, VocabError
from crossprompt.gradcheck import gradcheck


def _backbone(vocab=12, answer_len=2, seed=0):
    return FrozenBackbone.create(vocab=vocab, s_max=5, d_v=6, d_vis=6, d=8, n_heads=2, answer_len=answer_len, seed=seed)


def _instance(bb, rng, b=2, lp=2, m=3, s=5):
    prompt = ag.Parameter(rng.standard_normal((b, lp, bb.d)), "prompt")
    visual = ag.Parameter(rng.standard_normal((b, m, bb.d)), "visual")
    tokens = rng.integers(0, bb.vocab, size=(b, s))
    mask = rng.random((b, s)) > 0.3
    mask[:, 0] = True
    return prompt, visual, bb.embed_text(tokens, mask), mask


def test_encode_image_is_linear_and_deterministic(rng):
    bb = _backbone()
    assert np.all(bb.encode_image(np.zeros((3, 6))) == 0)
    v = rng.standard_normal((3, 6))
    np.testing.assert_allclose(bb.encode_image(2 * v), 2 * bb.encode_image(v), atol=1e-14)
    assert bb.encode_image(v).tobytes() == _backbone().encode_image(v).tobytes()
    with pytest.raises(ShapeError):
        bb.encode_image(np.zeros((3, 5)))


def test_embed_text_definition():
    bb = _backbone()
    p = bb.params
    np.testing.assert_array_equal(bb.embed_text(np.array([0]))[0], p.psi[0] + p.pos[0])
    e = bb.embed_text(np.array([3, 3]))
    np.testing.assert_allclose(e[1] - e[0], p.pos[1] - p.pos[0], atol=1e-15)
    assert bb.embed_text(np.zeros(0, dtype=int)).shape == (0, bb.d)
    with pytest.raises(VocabError):
        bb.embed_text(np.array([12]))


def test_uniform_readout_gives_log_vocab(rng):
    bb = _backbone(vocab=64, answer_len=1)
    object.__setattr__(bb.params, "readout", np.zeros((bb.d, 64)))
    prompt, visual, text, mask = _instance(bb, rng)
    loss = bb.nll_loss(MultimodalSequence(prompt, visual, text, mask), np.array([[5], [9]]))
    assert float(loss.data) == pytest.approx(math.log(64), abs=1e-12)


def test_certain_answer_gives_zero_loss(rng):
    bb = _backbone(vocab=12, answer_len=1)
    prompt, visual, text, mask = _instance(bb, rng, b=1)
    seq = MultimodalSequence(prompt, visual, text, mask)
    answer = np.array([[4]])
    probe = np.zeros((bb.d, 12))
    probe[:, : bb.d] = np.eye(bb.d)
    object.__setattr__(bb.params, "readout", probe)
    hidden = bb.logits(seq, bb.answer_inputs(answer)).data[0, 0, : bb.d]
    readout = np.zeros((bb.d, 12))
    readout[:, 4] = 1e3 * hidden / np.linalg.norm(hidden)
    object.__setattr__(bb.params, "readout", readout)
    assert float(bb.nll_loss(seq, answer).data) == 0.0


@pytest.mark.parametrize("seed", range(100))
def test_loss_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    bb = _backbone(seed=seed)
    prompt, visual, text, mask = _instance(bb, rng)
    answer = rng.integers(0, bb.vocab, size=(2, 2))

    def loss():
        return bb.nll_loss(MultimodalSequence(prompt, visual, text, mask), answer)

    assert gradcheck(loss, [prompt, visual]).max_rel_err <= 1e-5


def test_causality(rng):
    bb = _backbone(answer_len=3)
    prompt, visual, text, mask = _instance(bb, rng)
    seq = MultimodalSequence(prompt, visual, text, mask)
    a = rng.integers(0, bb.vocab, size=(2, 3))
    b = a.copy()
    b[:, 1] = (b[:, 1] + 1) % bb.vocab
    la, lb = bb.token_nll(seq, a).data, bb.token_nll(seq, b).data
    np.testing.assert_array_equal(la[:, 0], lb[:, 0])
    assert np.all(la[:, 1] != lb[:, 1])


def test_invalid_text_rows_do_not_matter(rng):
    bb = _backbone()
    prompt, visual, text, mask = _instance(bb, rng)
    answer = np.array([[1, 2], [3, 4]])
    before = bb.nll_loss(MultimodalSequence(prompt, visual, text, mask), answer).data
    noisy = text.copy()
    noisy[~mask] = rng.standard_normal(noisy[~mask].shape) * 100
    after = bb.nll_loss(MultimodalSequence(prompt, visual, noisy, mask), answer).data
    assert before.tobytes() == after.tobytes()


def test_greedy_decode_and_ties(rng):
    bb = _backbone(answer_len=2)
    prompt, visual, text, mask = _instance(bb, rng)
    seq = MultimodalSequence(prompt, visual, text, mask)
    pred = bb.greedy_decode(seq)
    assert pred.shape == (2, 2)
    assert np.all(exact_match(pred, pred) == 1)
    other = pred.copy()
    other[0, 1] = (other[0, 1] + 1) % bb.vocab
    np.testing.assert_array_equal(exact_match(other, pred), [0, 1])
    object.__setattr__(bb.params, "readout", np.zeros((bb.d, bb.vocab)))
    assert np.all(bb.greedy_decode(seq) == 0)


def test_backbone_is_immutable():
    bb = _backbone()
    with pytest.raises(ValueError):
        bb.params.psi[0, 0] = 1.0
    np.testing.assert_array_equal(bb.params.psi, _backbone().params.psi)
