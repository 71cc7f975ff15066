import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import rel_entr

from gazeforge import ops
from gazeforge.backbone import TEXTURE_LAYERS
from gazeforge.gradcheck import gradcheck
from gazeforge.losses import (LossDiagnosticsError, LossWeights, adv_discriminator_loss, adv_generator_loss,
                              feature_loss, feature_mse, gram, gram_distance, kl_per_sample, saliency_loss,
                              texture_loss, texture_loss_from_features, total_loss)
from gazeforge.tensor import ShapeError, Tensor


def plane(values):
    return np.asarray(values, dtype=np.float64).reshape(1, 1, 2, 2)


def test_kl_identity_and_hand_values():
    p = plane([0.1, 0.2, 0.3, 0.4])
    assert saliency_loss(p, Tensor(p)).item() == 0.0
    # p_t uniform against [0.4, 0.2, 0.2, 0.2]: 0.25 * (log(0.25/0.4) + 3 log(0.25/0.2))
    got = saliency_loss(plane([0.25] * 4), Tensor(plane([0.4, 0.2, 0.2, 0.2]))).item()
    assert got == pytest.approx(0.0499, abs=1e-4)
    assert got == pytest.approx(rel_entr([0.25] * 4, [0.4, 0.2, 0.2, 0.2]).sum(), rel=1e-13)
    onehot = saliency_loss(plane([1, 0, 0, 0]), Tensor(plane([0.25] * 4))).item()
    assert onehot == pytest.approx(math.log(4), rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 1, 3, 3), elements=st.floats(-8, 8)),
       arrays(np.float64, (2, 1, 3, 3), elements=st.floats(-8, 8)))
def test_kl_nonnegative_and_matches_scipy(a, b):
    p = ops.softmax_spatial(Tensor(a)).data
    q = ops.softmax_spatial(Tensor(b)).data
    per = kl_per_sample(p, Tensor(q)).data
    assert (per >= -1e-15).all()
    expected = rel_entr(p, np.maximum(q, 1e-12)).sum(axis=(1, 2, 3))
    np.testing.assert_allclose(per, expected, rtol=1e-10, atol=1e-14)


def test_kl_eps_and_shape_guard():
    val = saliency_loss(plane([0.5, 0.5, 0, 0]), Tensor(plane([1, 0, 0, 0]))).item()
    assert val == pytest.approx(0.5 * math.log(0.5 / 1.0) + 0.5 * math.log(0.5 / 1e-12), rel=1e-13)
    with pytest.raises(ShapeError):
        saliency_loss(np.ones((1, 1, 2, 2)), Tensor(np.ones((1, 1, 2, 3))))


def test_kl_gradient(rng):
    p = ops.softmax_spatial(Tensor(rng.standard_normal((2, 1, 3, 3)))).data
    assert gradcheck(lambda s: saliency_loss(p, ops.softmax_spatial(s)), Tensor(rng.standard_normal(p.shape))) < 1e-6


def test_feature_mse(rng):
    f = rng.standard_normal((2, 4, 3, 3))
    assert feature_mse(Tensor(f), Tensor(f)).item() == 0.0
    assert feature_mse(Tensor(f + 2.0), Tensor(f)).item() == pytest.approx(4.0)


def test_feature_loss_identity(backbone, rng):
    img = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)))
    assert feature_loss(backbone, img, img).item() == 0.0


def test_gram_hand_cases():
    g = gram(Tensor(np.full((5, 1), 3.0))).data
    np.testing.assert_allclose(g, [[9.0]])
    f = np.array([[1.0, 2.0], [3.0, 4.0]])  # columns (1,3) and (2,4), M = 2
    np.testing.assert_allclose(gram(Tensor(f)).data, np.array([[10.0, 14.0], [14.0, 20.0]]) / 2)
    ortho = np.array([[1.0, 0.0], [0.0, 2.0]])
    g = gram(Tensor(ortho)).data
    assert g[0, 1] == 0.0 and g[1, 0] == 0.0


def test_gram_matches_exact_rational_product():
    f = np.array([[1, -2, 3], [4, 0, -1], [2, 2, 2], [0, 1, 5]], dtype=np.float64)
    exact = [[sum(Fraction(int(f[m, i])) * int(f[m, j]) for m in range(4)) / 4 for j in range(3)] for i in range(3)]
    np.testing.assert_array_equal(gram(Tensor(f)).data, np.array(exact, dtype=np.float64))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3, 4, 4), elements=st.floats(-3, 3)))
def test_gram_symmetric_psd(f):
    g = gram(Tensor(f)).data
    np.testing.assert_allclose(g, g.transpose(0, 2, 1), atol=1e-14)
    assert (np.linalg.eigvalsh(g) >= -1e-10).all()


def test_texture_is_permutation_invariant(rng):
    feats = {name: Tensor(rng.standard_normal((1, 4, 6, 6))) for name in TEXTURE_LAYERS}
    perm = rng.permutation(36)
    shuffled = {}
    for name, t in feats.items():
        flat = t.data.reshape(1, 4, 36)[:, :, perm]
        shuffled[name] = Tensor(flat.reshape(1, 4, 6, 6))
    weights = [1.0] * len(TEXTURE_LAYERS)
    assert texture_loss_from_features(shuffled, feats, TEXTURE_LAYERS, weights).item() < 1e-28
    for name in TEXTURE_LAYERS:
        assert gram_distance(gram(shuffled[name]), gram(feats[name])).item() < 1e-28


def test_texture_loss_identity(backbone, rng):
    img = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)))
    assert texture_loss(backbone, img, img).item() == 0.0


@pytest.mark.parametrize("h,w", [(2, 2), (3, 5)])
def test_lsgan_values(h, w):
    def d(v):
        return Tensor(np.full((1, 1, h, w), v))

    assert adv_generator_loss(d(1.0)).item() == 0.0
    assert adv_generator_loss(d(0.0)).item() == h * w
    assert adv_generator_loss(d(0.5)).item() == 0.25 * h * w
    assert adv_discriminator_loss(d(0.0), d(1.0)).item() == 0.0
    assert adv_discriminator_loss(d(1.0), d(0.0)).item() == h * w
    assert adv_discriminator_loss(d(0.5), d(0.5)).item() == 0.25 * h * w


def test_lsgan_batch_mean():
    out = Tensor(np.stack([np.zeros((1, 2, 2)), np.ones((1, 2, 2))]))
    assert adv_generator_loss(out).item() == 2.0
    with pytest.raises(ShapeError):
        adv_discriminator_loss(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_total_loss_cases():
    zero = LossWeights(0, 0, 0, 0)
    assert total_loss({"L_sal": 3.0, "L_feat": 1.0, "L_tex": 1.0, "L_adv": 1.0}, zero)[1].total == 0.0
    assert total_loss({"L_sal": 1.0, "L_feat": 0.0, "L_tex": 0.0, "L_adv": 0.0})[1].total == 1.0
    total, report = total_loss({"L_sal": 2.0, "L_feat": 10.0, "L_tex": 5.0, "L_adv": 4.0})
    assert total == pytest.approx(2.6, abs=1e-12)
    assert report.total == pytest.approx(2.0 + 0.1 + 0.1 + 0.4, abs=1e-12)


def test_total_loss_is_differentiable_and_guarded():
    x = Tensor([2.0], requires_grad=True)
    total, _ = total_loss({"L_sal": ops.sum(x * x), "L_feat": 0.0, "L_tex": 0.0, "L_adv": 0.0})
    assert isinstance(total, Tensor)
    with pytest.raises(LossDiagnosticsError) as info:
        total_loss({"L_sal": float("nan"), "L_feat": 0.0, "L_tex": 0.0, "L_adv": 0.0})
    assert info.value.term == "L_sal"


def test_weights_defaults_and_validation():
    assert LossWeights().as_tuple() == (1.0, 1e-2, 2e-2, 1e-1)
    assert LossWeights().replace(adv=0.0).adv == 0.0
    with pytest.raises(ValueError):
        LossWeights(sal=-1.0)
    with pytest.raises(ValueError):
        LossWeights(texture_weights=(1.0,))
