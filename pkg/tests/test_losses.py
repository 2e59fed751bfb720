"""Loss functions: analytic gradients vs finite differences, invariances."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dnc.errors import ConfigError, NumericError
from dnc.losses import (
    ContrastiveBatch,
    distill_loss,
    distill_loss_grad,
    info_nce,
    info_nce_grad,
    moclr_loss,
    moclr_loss_grad,
    regression_mse,
    regression_mse_grad,
)


def _fd(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def _relerr(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


# --- InfoNCE ------------------------------------------------------------------


def test_info_nce_gradients_match_fd(rng):
    z = rng.normal(size=(4, 3))
    zp = rng.normal(size=(4, 3))
    loss, dz, dzp = info_nce_grad(ContrastiveBatch(z, zp, 0.2))
    fd_z = _fd(lambda: info_nce(ContrastiveBatch(z, zp, 0.2)), z)
    fd_zp = _fd(lambda: info_nce(ContrastiveBatch(z, zp, 0.2)), zp)
    assert _relerr(fd_z, dz) < 1e-7
    assert _relerr(fd_zp, dzp) < 1e-7


def test_info_nce_single_pair_is_exactly_zero(rng):
    z = rng.normal(size=(1, 5))
    zp = rng.normal(size=(1, 5))
    assert info_nce(ContrastiveBatch(z, zp)) == 0.0


def test_info_nce_identical_rows_is_ln_n(rng):
    row = rng.normal(size=6)
    z = np.tile(row, (5, 1))
    zp = np.tile(rng.normal(size=6), (5, 1))
    assert abs(info_nce(ContrastiveBatch(z, zp)) - math.log(5)) < 1e-14


def test_info_nce_scale_invariance(rng):
    z = rng.normal(size=(5, 4))
    zp = rng.normal(size=(5, 4))
    base = info_nce(ContrastiveBatch(z, zp, 0.1))
    scales = rng.uniform(0.1, 10.0, size=(5, 1))
    scaled = info_nce(ContrastiveBatch(z * scales, zp * 7.3, 0.1))
    assert abs(base - scaled) < 1e-12


def test_info_nce_permutation_invariance(rng):
    z = rng.normal(size=(6, 4))
    zp = rng.normal(size=(6, 4))
    perm = np.random.default_rng(0).permutation(6)
    a, dz, dzp = info_nce_grad(ContrastiveBatch(z, zp))
    b, dz_p, dzp_p = info_nce_grad(ContrastiveBatch(z[perm], zp[perm]))
    assert abs(a - b) < 1e-12
    np.testing.assert_allclose(dz[perm], dz_p, atol=1e-12)
    np.testing.assert_allclose(dzp[perm], dzp_p, atol=1e-12)


def test_info_nce_perfect_alignment_beats_random(rng):
    z = rng.normal(size=(8, 16))
    aligned = info_nce(ContrastiveBatch(z, z.copy(), 0.1))
    shuffled = info_nce(ContrastiveBatch(z, np.roll(z, 1, axis=0), 0.1))
    assert aligned < math.log(8) < shuffled


def test_info_nce_gradient_orthogonal_to_rows(rng):
    # Scale invariance implies the gradient has no radial component.
    z = rng.normal(size=(5, 4))
    zp = rng.normal(size=(5, 4))
    _, dz, dzp = info_nce_grad(ContrastiveBatch(z, zp))
    np.testing.assert_allclose((dz * z).sum(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose((dzp * zp).sum(axis=1), 0.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 7), st.integers(2, 6), st.floats(0.05, 2.0))
def test_info_nce_bounded_below_by_zero_property(n, d, tau):
    rng = np.random.default_rng(n * 100 + d)
    z = rng.normal(size=(n, d))
    zp = rng.normal(size=(n, d))
    loss = info_nce(ContrastiveBatch(z, zp, tau))
    # Cross entropy against a softmax is nonnegative and finite.
    assert 0.0 <= loss < 2 * math.log(n) + 2.0 / tau


def test_info_nce_rejects_bad_inputs(rng):
    with pytest.raises(ConfigError):
        info_nce(ContrastiveBatch(rng.normal(size=(3, 2)), rng.normal(size=(4, 2))))
    with pytest.raises(ConfigError):
        info_nce(ContrastiveBatch(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), 0.0))
    with pytest.raises(NumericError):
        z = rng.normal(size=(3, 2))
        z[1] = 0.0
        info_nce(ContrastiveBatch(z, rng.normal(size=(3, 2))))
    with pytest.raises(NumericError):
        z = rng.normal(size=(3, 2))
        z[0, 0] = np.nan
        info_nce(ContrastiveBatch(z, rng.normal(size=(3, 2))))


def test_info_nce_large_magnitudes_are_stable(rng):
    z = rng.normal(size=(4, 3)) * 1e6
    zp = rng.normal(size=(4, 3)) * 1e-6
    loss = info_nce(ContrastiveBatch(z, zp, 0.05))
    assert np.isfinite(loss)


# --- Symmetrized (two-view) loss ---------------------------------------------


def test_moclr_is_sum_of_two_directions(rng):
    a, b, c, d = (rng.normal(size=(5, 4)) for _ in range(4))
    total = moclr_loss(a, b, c, d, 0.15)
    parts = info_nce(ContrastiveBatch(a, b, 0.15)) + info_nce(ContrastiveBatch(c, d, 0.15))
    assert abs(total - parts) < 1e-12


def test_moclr_grad_slots_match_pairwise_grads(rng):
    a, b, c, d = (rng.normal(size=(4, 3)) for _ in range(4))
    loss, ga, gb, gc, gd = moclr_loss_grad(a, b, c, d)
    _, ga1, gb1 = info_nce_grad(ContrastiveBatch(a, b))
    _, gc1, gd1 = info_nce_grad(ContrastiveBatch(c, d))
    np.testing.assert_allclose(ga, ga1, atol=1e-15)
    np.testing.assert_allclose(gb, gb1, atol=1e-15)
    np.testing.assert_allclose(gc, gc1, atol=1e-15)
    np.testing.assert_allclose(gd, gd1, atol=1e-15)


def test_moclr_gradients_match_fd(rng):
    arrays = [rng.normal(size=(3, 3)) for _ in range(4)]
    loss, *grads = moclr_loss_grad(*arrays, 0.3)
    for arr, g in zip(arrays, grads):
        fd = _fd(lambda: moclr_loss(*arrays, 0.3), arr)
        assert _relerr(fd, g) < 1e-7


# --- Regression / distillation ------------------------------------------------


def test_regression_mse_zero_at_normalized_target(rng):
    t_raw = rng.normal(size=(4, 5)) * 3.0
    t = t_raw / np.linalg.norm(t_raw, axis=1, keepdims=True)
    loss, grad = regression_mse_grad(t, t_raw)
    assert loss < 1e-30
    np.testing.assert_allclose(grad, 0.0, atol=1e-15)


def test_regression_mse_value_oracle():
    pred = np.array([[1.0, 0.0], [0.0, 0.0]])
    target = np.array([[2.0, 0.0], [0.0, 5.0]])  # normalizes to e1, e2
    # Row 0 matches exactly; row 1 misses by a unit vector: loss = 0.5 * 1 / 2.
    loss = regression_mse(pred, target)
    assert abs(loss - 0.25) < 1e-15


def test_regression_mse_gradients_match_fd(rng):
    pred = rng.normal(size=(3, 4))
    target = rng.normal(size=(3, 4))
    loss, grad = regression_mse_grad(pred, target)
    fd = _fd(lambda: regression_mse(pred, target), pred)
    assert _relerr(fd, grad) < 1e-8


def test_regression_target_is_frozen(rng):
    # The loss treats targets as constants: doubling the raw teacher output
    # changes nothing because only its direction enters.
    pred = rng.normal(size=(4, 6))
    target = rng.normal(size=(4, 6))
    a = regression_mse(pred, target)
    b = regression_mse(pred, target * 2.0)
    assert abs(a - b) < 1e-12


def test_distill_loss_is_sum_of_terms(rng):
    pb, pk, tb, tk = (rng.normal(size=(5, 3)) for _ in range(4))
    total, db, dk = distill_loss_grad(pb, pk, tb, tk)
    assert abs(total - regression_mse(pb, tb) - regression_mse(pk, tk)) < 1e-13
    np.testing.assert_allclose(db, regression_mse_grad(pb, tb)[1], atol=1e-15)
    np.testing.assert_allclose(dk, regression_mse_grad(pk, tk)[1], atol=1e-15)


def test_distill_loss_exact_zero_for_perfect_regressors(rng):
    tb = rng.normal(size=(4, 5))
    tk = rng.normal(size=(4, 5))
    pb = tb / np.linalg.norm(tb, axis=1, keepdims=True)
    pk = tk / np.linalg.norm(tk, axis=1, keepdims=True)
    assert distill_loss(pb, pk, tb, tk) < 1e-30


def test_distill_teacher_scale_invariance(rng):
    pb, pk, tb, tk = (rng.normal(size=(4, 5)) for _ in range(4))
    a = distill_loss(pb, pk, tb, tk)
    b = distill_loss(pb, pk, tb * 2.0, tk * 0.5)
    assert abs(a - b) < 1e-12


def test_regression_rejects_zero_norm_target(rng):
    target = rng.normal(size=(3, 4))
    target[2] = 0.0
    with pytest.raises(NumericError):
        regression_mse(rng.normal(size=(3, 4)), target)


def test_regression_rejects_shape_mismatch(rng):
    with pytest.raises(ConfigError):
        regression_mse(rng.normal(size=(3, 4)), rng.normal(size=(4, 3)))
