import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from ktdkit import losses
from ktdkit.losses import ArcFaceConfig, DistillConfig, PCConfig


def test_softmax_examples():
    np.testing.assert_allclose(losses.softmax([0.0, 0.0, 0.0], 5), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(losses.softmax([1.0, 0.0], 1), [0.7310585786300049, 0.2689414213699951], atol=1e-12)
    np.testing.assert_allclose(losses.softmax([1.0, 0.0], 10), [0.52497918747894, 0.47502081252106], atol=1e-12)


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_softmax_rejects_nonpositive_temperature(bad):
    with pytest.raises(ValueError):
        losses.softmax([1.0, 2.0], bad)


def test_softmax_rejects_empty_and_nonfinite():
    with pytest.raises(ValueError):
        losses.softmax([])
    with pytest.raises(ValueError):
        losses.softmax([1.0, np.inf])


def test_softmax_survives_huge_logits():
    p = losses.softmax([1000.0, 0.0, -1000.0])
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0)


logit_rows = arrays(np.float64, st.integers(2, 8), elements=st.floats(-30, 30))


@settings(max_examples=200, deadline=None)
@given(z=logit_rows, shift=st.floats(-50, 50), t=st.sampled_from([1.0, 5.0, 10.0]))
def test_softmax_simplex_and_shift_invariance(z, shift, t):
    p = losses.softmax(z, t)
    assert abs(p.sum() - 1.0) <= 1e-9
    assert np.all(p >= 0)
    np.testing.assert_allclose(losses.softmax(z + shift, t), p, atol=1e-12)


def _entropy(p):
    return -np.sum(p * np.log(np.maximum(p, 1e-300)))


@settings(max_examples=100, deadline=None)
@given(z=logit_rows)
def test_entropy_grows_with_temperature(z):
    if np.ptp(z) < 1e-6:
        return
    ents = [_entropy(losses.softmax(z, t)) for t in np.linspace(1, 20, 40)]
    assert all(b >= a - 1e-12 for a, b in zip(ents, ents[1:]))


def test_cross_entropy_examples():
    assert losses.cross_entropy([1.0, 0.0, 0.0], 0) == 0.0
    assert losses.cross_entropy([1 / 3] * 3, 2) == pytest.approx(math.log(3), abs=1e-12)
    assert losses.cross_entropy([0.5, 0.3, 0.2], 0) == pytest.approx(math.log(2), abs=1e-12)


def test_cross_entropy_floor_and_range():
    assert losses.cross_entropy([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))
    with pytest.raises(ValueError):
        losses.cross_entropy([0.5, 0.5], 2)
    with pytest.raises(ValueError):
        losses.cross_entropy([0.5, 0.5], -1)


def test_pc_loss_examples():
    cfg = PCConfig(0.8)
    assert losses.pc_loss([[1.0, 0.0, 0.0]], [0], cfg) == 0.0
    assert losses.pc_loss([[1 / 3] * 3], [0], cfg) == pytest.approx(1.6, abs=1e-12)
    two = [[0.5, 0.3, 0.2], [0.2, 0.7, 0.1]]
    assert losses.pc_loss(two, [0, 1], cfg) == pytest.approx(0.8, abs=1e-12)


def test_pc_loss_rejects_empty_and_bad_config():
    with pytest.raises(ValueError):
        losses.pc_loss(np.zeros((0, 3)), [], PCConfig())
    with pytest.raises(ValueError):
        PCConfig(0.0)
    with pytest.raises(ValueError):
        PCConfig(1.5)


def _random_probs(rng, n, k):
    return losses.softmax(rng.normal(scale=3, size=(n, k)))


@pytest.mark.parametrize("seed", range(20))
def test_pc_loss_zero_iff_margin_met(seed):
    rng = np.random.default_rng(seed)
    xi = rng.uniform(0.05, 0.6)
    k = int(rng.integers(2, 6))
    labels = rng.integers(0, k, size=5)
    # satisfied by construction: target gets xi + 0.01 more than every other
    p = np.full((5, k), (1 - xi - 0.01) / k)
    p[np.arange(5), labels] += xi + 0.01
    assert losses.pc_loss(p, labels, PCConfig(xi)) == 0.0
    # break one sample's margin
    p2 = p.copy()
    other = (labels[0] + 1) % k
    p2[0, other] += 0.02
    p2[0, labels[0]] -= 0.02
    assert losses.pc_loss(p2, labels, PCConfig(xi)) > 0.0


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_pc_loss_permutation_and_mean(seed):
    rng = np.random.default_rng(seed)
    p = _random_probs(rng, 7, 4)
    y = rng.integers(0, 4, size=7)
    cfg = PCConfig(0.8)
    perm = rng.permutation(7)
    assert losses.pc_loss(p[perm], y[perm], cfg) == pytest.approx(losses.pc_loss(p, y, cfg), abs=1e-12)
    singles = [losses.pc_loss(p[i:i + 1], y[i:i + 1], cfg) for i in range(7)]
    assert losses.pc_loss(p, y, cfg) == pytest.approx(np.mean(singles), abs=1e-12)


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_arcface_examples():
    rng = np.random.default_rng(0)
    w = _unit(rng.normal(size=(4, 6)))
    f = _unit(rng.normal(size=6))
    np.testing.assert_allclose(losses.arcface_logits(f, w, 1, ArcFaceConfig(1.0, 0.0)), w @ f, atol=1e-15)
    e = np.eye(4, 6)
    aligned = losses.arcface_logits(e[2], e, 2, ArcFaceConfig(30.0, 0.5))
    assert aligned[2] == pytest.approx(26.327476856711183, abs=1e-9)


@pytest.mark.parametrize("theta", np.linspace(0, math.pi - 0.5, 25))
def test_arcface_margin_never_raises_target(theta):
    cfg = ArcFaceConfig(30.0, 0.5)
    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    f = np.array([math.cos(theta), math.sin(theta)])
    plain = losses.arcface_logits(f, w, 0, ArcFaceConfig(30.0, 0.0))
    margined = losses.arcface_logits(f, w, 0, cfg)
    assert margined[0] <= plain[0] + 1e-12
    assert margined[1] == plain[1]


def test_arcface_rejects_unnormalised():
    w = np.eye(3)
    with pytest.raises(ValueError):
        losses.arcface_logits([1.0, 1.0, 0.0], w, 0)
    with pytest.raises(ValueError):
        losses.arcface_logits([1.0, 0.0, 0.0], 2 * w, 0)
    with pytest.raises(ValueError):
        ArcFaceConfig(30.0, math.pi / 2)


def test_kd_loss_examples():
    cfg = DistillConfig(alpha=1.0, temperature=1.0, student_loss="softmax")
    # scalar KL oracle value, frozen
    assert losses.kd_loss([0.0, 0.0], [1.0, 0.0], 0, cfg) == pytest.approx(0.11094407167172737, abs=1e-12)


@pytest.mark.parametrize("kind", ["softmax", "pc", "arcface"])
def test_kd_loss_alpha_zero_is_student_loss(kind):
    rng = np.random.default_rng(1)
    zs, zt = rng.normal(size=(6, 3)) * 5, rng.normal(size=(6, 3)) * 5
    y = rng.integers(0, 3, size=6)
    cfg = DistillConfig(alpha=0.0, temperature=5.0, student_loss=kind)
    plain, _ = losses.classification_loss_grad(zs, y, cfg)
    assert losses.kd_loss(zs, zt, y, cfg) == plain


@pytest.mark.parametrize("alpha", [0.0, 0.3, 1.0])
def test_kd_loss_identical_logits_leave_only_student_term(alpha):
    rng = np.random.default_rng(2)
    z = rng.normal(size=(5, 3))
    y = rng.integers(0, 3, size=5)
    cfg = DistillConfig(alpha=alpha, temperature=4.0, student_loss="pc")
    plain, _ = losses.classification_loss_grad(z, y, cfg)
    assert abs(losses.kl_divergence(losses.softmax(z, 4.0), losses.softmax(z, 4.0))).max() <= 1e-12
    assert losses.kd_loss(z, z, y, cfg) == pytest.approx((1 - alpha) * plain, abs=1e-12)


def test_kd_loss_rejects_mismatch_and_bad_config():
    with pytest.raises(ValueError):
        losses.kd_loss([0.0, 1.0], [0.0, 1.0, 2.0], 0, DistillConfig())
    with pytest.raises(ValueError):
        DistillConfig(alpha=1.2)
    with pytest.raises(ValueError):
        DistillConfig(temperature=0.5)
    with pytest.raises(ValueError):
        DistillConfig(student_loss="focal")


# ---------------------------------------------------------------- gradients w.r.t. logits

def _check_logit_grad(fn, z, tol=1e-4):
    loss, g = fn(z)
    num = oracles.central_difference(lambda: fn(z)[0], z)
    assert oracles.rel_error(g, num) <= tol, (g, num)


@pytest.mark.parametrize("seed", range(10))
def test_softmax_ce_gradient(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(4, 3)) * 2
    y = rng.integers(0, 3, size=4)
    _check_logit_grad(lambda z: losses.softmax_ce_grad(z, y), z)


@pytest.mark.parametrize("seed", range(10))
def test_pc_gradient_away_from_kinks(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, size=4)
    while True:
        z = rng.normal(size=(4, 3)) * 2
        p = losses.softmax(z)
        h = p + 0.8 - p[np.arange(4), y][:, None]
        h[np.arange(4), y] = 1.0
        if np.all(np.abs(h) > 1e-4):
            break
    _check_logit_grad(lambda z: losses.pc_loss_grad(z, y, PCConfig(0.8)), z)


@pytest.mark.parametrize("seed", range(10))
def test_arcface_ce_gradient(seed):
    rng = np.random.default_rng(seed)
    # keep cosines small so the target probability stays above the log floor
    z = rng.uniform(-3, 3, size=(4, 3))
    y = rng.integers(0, 3, size=4)
    _check_logit_grad(lambda z: losses.arcface_ce_grad(z, y, ArcFaceConfig()), z)


@pytest.mark.parametrize("kind", ["softmax", "pc", "arcface"])
def test_kd_gradient(kind):
    rng = np.random.default_rng(3)
    zs = rng.uniform(-5, 5, size=(4, 3))
    zt = rng.normal(size=(4, 3)) * 3
    y = rng.integers(0, 3, size=4)
    cfg = DistillConfig(alpha=0.6, temperature=3.0, student_loss=kind)
    _check_logit_grad(lambda z: losses.kd_loss_grad(z, zt, y, cfg), zs)


def test_bce_gradient():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(3, 5)) * 3
    t = (rng.random((3, 5)) < 0.3).astype(float)
    _check_logit_grad(lambda z: losses.bce_with_logits_grad(z, t), z)
