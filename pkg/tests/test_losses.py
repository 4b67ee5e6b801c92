import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from kneerecon import gradcheck
from kneerecon.losses import (content_loss, image_gradients, ngcc, ngcc_grad, reconstruction_loss,
                              total_loss, total_loss_grad, total_loss_logit_grad, weighted_cross_entropy,
                              weighted_cross_entropy_grad, zngcc)
from kneerecon.projection import ViewAxis, project_prediction_array

images = arrays(np.float64, (6, 7), elements=st.floats(-5, 5, allow_nan=False))


def nonconstant(img):
    g = image_gradients(img)
    return np.linalg.norm(g.gx) > 1e-3 and np.linalg.norm(g.gy) > 1e-3


def test_gradient_examples():
    g = image_gradients(np.full((4, 5), 3.0))
    assert not g.gx.any() and not g.gy.any()
    ramp = np.tile(np.arange(5.0), (4, 1))
    g = image_gradients(ramp)
    assert np.all(g.gx == 1) and not g.gy.any()
    with pytest.raises(ValueError):
        image_gradients(np.zeros((1, 5)))


def test_gradients_match_stencil_oracle():
    for seed in range(20):
        img = np.random.default_rng(seed).random((5, 5))
        g = image_gradients(img)
        gx, gy = oracles.image_gradients(img)
        assert np.array_equal(g.gx, gx) and np.array_equal(g.gy, gy)


@given(images)
def test_ngcc_self_and_negation(img):
    assume(nonconstant(img))
    assert ngcc(img, img) == pytest.approx(1, abs=1e-9)
    assert ngcc(img, -img) == pytest.approx(-1, abs=1e-9)
    assert zngcc(img, img) == pytest.approx(1, abs=1e-9)


@given(images, images)
def test_ngcc_symmetric_bounded(a, b):
    for f in (ngcc, zngcc):
        v = f(a, b)
        assert abs(v) <= 1 + 1e-9
        assert v == pytest.approx(f(b, a), abs=1e-12)


@given(images, images, st.floats(0.1, 10), st.floats(-10, 10))
def test_ngcc_affine_invariance(a, b, scale, offset):
    assert ngcc(scale * a + offset, b) == pytest.approx(ngcc(a, b), abs=1e-9)
    assert zngcc(scale * a + offset, b) == pytest.approx(zngcc(a, b), abs=1e-9)


@pytest.mark.parametrize("lam", [0.1, 1.0, 10.0])
def test_zngcc_ramp_invariance(lam):
    img = np.random.default_rng(3).random((8, 8))
    ramp = lam * np.tile(np.arange(8.0), (8, 1))
    assert zngcc(img + ramp, img) == pytest.approx(1, abs=1e-9)


def test_ngcc_constant_operand_contributes_zero():
    img = np.random.default_rng(0).random((5, 5))
    assert ngcc(np.zeros((5, 5)), img) == 0
    v, g = ngcc_grad(np.zeros((5, 5)), img)
    assert v == 0 and not g.any()
    with pytest.raises(ValueError):
        ngcc(np.zeros((4, 4)), np.zeros((4, 5)))


def test_ngcc_gradient_fd():
    errs = gradcheck.suite_ngcc(np.random.default_rng(8))
    assert max(errs) < 1e-5


def test_ce_closed_forms():
    p = np.full((5, 3, 3, 3), 0.2)
    lab = np.random.default_rng(0).integers(0, 5, (3, 3, 3))
    assert weighted_cross_entropy(p, lab, np.ones((3, 3, 3))) == pytest.approx(math.log(5), abs=1e-6)
    assert weighted_cross_entropy(p, lab, np.full((3, 3, 3), 9.0)) == pytest.approx(14.484941, abs=1e-5)
    onehot = (np.arange(5)[:, None, None, None] == lab[None]).astype(np.float64)
    assert weighted_cross_entropy(onehot, lab, np.ones((3, 3, 3))) <= 1e-10


def test_ce_clamps_and_shape_errors():
    p = np.zeros((5, 2, 2, 2))
    p[1] = 1
    lab = np.zeros((2, 2, 2), dtype=np.uint8)
    v, g = weighted_cross_entropy_grad(p, lab, np.ones((2, 2, 2)))
    assert v == pytest.approx(-math.log(1e-12)) and np.isfinite(g).all()
    with pytest.raises(ValueError):
        weighted_cross_entropy(p, np.zeros((2, 2, 3)), np.ones((2, 2, 2)))


def test_dwm_ones_is_unweighted_ce():
    r = np.random.default_rng(2)
    p = r.dirichlet(np.ones(5), size=(4, 4, 4)).transpose(3, 0, 1, 2)
    lab = r.integers(0, 5, (4, 4, 4))
    plain = -np.mean(np.log(np.take_along_axis(p, lab[None], 0)[0]))
    assert weighted_cross_entropy(p, lab, np.ones((4, 4, 4))) == pytest.approx(plain, rel=1e-12)


def _bone_prob(bone_map):
    p = np.zeros((5,) + bone_map.shape)
    p[1] = bone_map
    p[0] = 1 - bone_map
    return p


def test_reconstruction_loss_limits():
    b = np.random.default_rng(4).random((6, 6, 6))
    p = _bone_prob(b)
    ap, lat = project_prediction_array(p, ViewAxis.AP), project_prediction_array(p, ViewAxis.LAT)
    assert reconstruction_loss(p, ap, lat) == pytest.approx(0, abs=1e-9)
    assert reconstruction_loss(p, -ap, -lat) == pytest.approx(2, abs=1e-9)
    with pytest.raises(ValueError):
        reconstruction_loss(p, ap[:5], lat)


def test_reconstruction_loss_gradient_fd():
    assert max(gradcheck.suite_reconstruction_loss(np.random.default_rng(9))) < 1e-4


def _case(seed=0):
    r = np.random.default_rng(seed)
    p = r.dirichlet(np.ones(5), size=(6, 6, 6)).transpose(3, 0, 1, 2).copy()
    lab = r.integers(0, 5, (6, 6, 6))
    dwm = r.uniform(1, 9, (6, 6, 6))
    return p, lab, dwm, r.random((6, 6)), r.random((6, 6))


def test_total_loss_is_mean_of_parts():
    p, lab, dwm, ap, lat = _case()
    v, g, parts = total_loss_grad(p, lab, dwm, ap, lat)
    assert v == pytest.approx((parts["ce"] + parts["reconst"]) / 2, abs=1e-15)
    _, g_ce = weighted_cross_entropy_grad(p, lab, dwm)
    from kneerecon.losses import reconstruction_loss_grad
    _, g_rec = reconstruction_loss_grad(p, ap, lat)
    assert np.array_equal(g, (g_ce + g_rec) / 2)


def test_total_loss_arithmetic_example():
    assert (1.6094379 + 1.0) / 2 == pytest.approx(1.3047190, abs=1e-7)
    # both parts zero: one-hot prediction of a ball whose own projections are the inputs
    idx = np.indices((8, 8, 8)) - 3.5
    lab = ((idx ** 2).sum(0) <= 9).astype(np.uint8)
    p = (np.arange(5)[:, None, None, None] == lab[None]).astype(np.float64)
    ap, lat = project_prediction_array(p, ViewAxis.AP), project_prediction_array(p, ViewAxis.LAT)
    assert total_loss(p, lab, np.ones(lab.shape), ap, lat) <= 1e-10


def test_ablation_toggles():
    p, lab, dwm, ap, lat = _case(1)
    v, g, parts = total_loss_grad(p, lab, dwm, ap, lat, use_reconstruction=False)
    v_ce, g_ce = weighted_cross_entropy_grad(p, lab, dwm)
    assert v == v_ce and np.array_equal(g, g_ce) and parts["reconst"] is None
    v, _, parts = total_loss_grad(p, lab, dwm, ap, lat, use_dwm=False)
    assert parts["ce"] == weighted_cross_entropy(p, lab, np.ones(lab.shape))
    v2, g_prob, g_logits, parts2 = total_loss_logit_grad(p, lab, dwm, ap, lat, use_dwm=False)
    assert v2 == v and parts2 == parts


def test_total_loss_gradient_fd():
    assert max(gradcheck.suite_total_loss(np.random.default_rng(10))) < 1e-4


def test_content_loss_examples():
    r = np.random.default_rng(5)
    i, j = r.random((7, 7)), r.random((7, 7))
    assert content_loss(i, i, i, i) == pytest.approx(0, abs=1e-9)
    assert content_loss(i, -i, j, -j) == pytest.approx(2, abs=1e-9)
    assert content_loss(i, 2.5 * i + 3, j, j) == pytest.approx(0, abs=1e-9)
    with pytest.raises(ValueError):
        content_loss(i, i[:6], j, j)
