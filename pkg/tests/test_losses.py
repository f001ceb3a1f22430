import math

import numpy as np
import pytest

from nsl.errors import ConfigError, LossError, ShapeError
from nsl import losses as ls
from nsl.numerics import pool3, sigmoid

from conftest import fd_grad, rel_err


# ------------------------------------------------------------- nc loss value


def test_nc_zero_when_equal():
    p = np.array([1.0, 0.0])
    for q in (1.0, 1.5, 2.0):
        assert ls.nc_loss(p, p, q) == 0.0


def test_nc_hand_values():
    p = np.array([0.5, 0.5])
    g = np.array([1.0, 0.0])
    assert abs(ls.nc_loss(p, g, 1.0) - 0.6666666666666666) < 1e-9
    assert abs(ls.nc_loss(p, g, 2.0) - 0.3333333333333333) < 1e-9


def test_nc_zero_denominator_raises():
    z = np.zeros(4)
    with pytest.raises(LossError, match="denominator"):
        ls.nc_loss(z, z, 1.0)


def test_nc_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ls.nc_loss(np.zeros(3), np.ones(4), 1.0)


def test_nc_positive_iff_different(rng):
    p = rng.uniform(0.01, 0.99, size=(1, 8, 8))
    g = (rng.uniform(size=(1, 8, 8)) > 0.5).astype(float)
    assert ls.nc_loss(p, g, 1.5) > 0.0
    assert ls.nc_loss(g, g, 1.5) == 0.0


def test_nc_permutation_invariant(rng):
    p = rng.uniform(0.0, 1.0, size=64)
    g = (rng.uniform(size=64) > 0.4).astype(float)
    perm = rng.permutation(64)
    assert abs(ls.nc_loss(p, g, 1.3) - ls.nc_loss(p[perm], g[perm], 1.3)) < 1e-12


# ---------------------------------------------------------------- nc grads


def test_nc_grad_detached_hand_value():
    p = np.array([0.5, 0.5])
    g = np.array([1.0, 0.0])
    grad = ls.nc_grad(p, g, 1.0, "detached_denominator")
    np.testing.assert_allclose(grad, [-2.0 / 3.0, 2.0 / 3.0], atol=1e-9)


def test_nc_grad_exact_hand_value():
    p = np.array([0.5, 0.5])
    g = np.array([1.0, 0.0])
    grad = ls.nc_grad(p, g, 1.0, "exact")
    # g=1 pixel: quotient-rule denominator term vanishes, leaves -1/den
    # g=0 pixel: (1*1.5 - 1*1)/1.5^2 = 2/9
    np.testing.assert_allclose(grad, [-2.0 / 3.0, 2.0 / 9.0], atol=1e-9)


@pytest.mark.parametrize("q", [1.0, 1.5, 2.0])
@pytest.mark.parametrize("seed", range(7))
def test_nc_grad_exact_vs_fd(q, seed):
    rng = np.random.default_rng(200 + seed)
    # keep |p-g| away from 0 so the q=1 kink cannot sit inside an fd step
    g = (rng.uniform(size=(3, 5)) > 0.5).astype(float)
    p = np.where(g > 0.5, rng.uniform(0.05, 0.9, g.shape),
                 rng.uniform(0.1, 0.95, g.shape))
    grad = ls.nc_grad(p, g, q, "exact")
    f = fd_grad(lambda t: ls.nc_loss(t, g, q), p)
    assert rel_err(grad, f) < 1e-4


def test_nc_grad_unknown_mode():
    with pytest.raises(ConfigError):
        ls.nc_grad(np.array([0.5]), np.array([1.0]), 1.0, "both")


def test_detached_q1_equal_magnitudes(rng):
    g = (rng.uniform(size=(16, 16)) > 0.3).astype(float)
    p = rng.uniform(0.0, 1.0, size=(16, 16))
    grad = ls.nc_grad(p, g, 1.0, "detached_denominator")
    den = p.sum() + g.sum() - (p * g).sum()
    mags = np.abs(grad[p != g])
    assert np.max(np.abs(mags - 1.0 / den)) < 1e-12


def test_exact_equals_detached_on_foreground_pixels(rng):
    g = (rng.uniform(size=(12, 12)) > 0.5).astype(float)
    g[0, 0] = 1.0
    p = rng.uniform(0.01, 0.99, size=(12, 12))
    ge = ls.nc_grad(p, g, 1.0, "exact")
    gd = ls.nc_grad(p, g, 1.0, "detached_denominator")
    fg = g == 1.0
    np.testing.assert_array_equal(ge[fg], gd[fg])  # bitwise, by construction


# -------------------------------------------- noise-tolerance sign property


def _flip_exact(g, rho, rng):
    """Flip exactly rho * count labels in each class; rho grid is chosen so
    the products are integers, keeping the statement combinatorial."""
    out = g.copy()
    for val in (0.0, 1.0):
        idx = np.flatnonzero(g == val)
        k = rho * idx.size
        assert abs(k - round(k)) < 1e-9
        pick = rng.choice(idx, size=round(k), replace=False)
        out[pick] = 1.0 - val
    return out


@pytest.mark.parametrize("f", [0.2, 0.35, 0.65, 0.8])
@pytest.mark.parametrize("rho", [0.1, 0.3, 0.45])
def test_sign_preserved_under_symmetric_flips(f, rho):
    n = 400
    n1 = round(f * n)
    g = np.zeros(n)
    g[:n1] = 1.0
    rng = np.random.default_rng(int(f * 100) * 1000 + int(rho * 100))
    noisy = _flip_exact(g, rho, rng)
    for b in (-1.0, 0.3, 2.0):
        p = np.full(n, float(sigmoid(np.array([b]))[0]))

        def db(labels):
            gr = ls.nc_grad(p, labels, 1.0, "detached_denominator")
            sig = p * (1.0 - p)
            return float((gr * sig).sum())

        clean, corrupted = db(g), db(noisy)
        assert clean != 0.0 and corrupted != 0.0
        assert math.copysign(1.0, clean) == math.copysign(1.0, corrupted)


# ------------------------------------------------------------------- q_at


def test_q_at_examples():
    spec = ls.LossSpec(kind="nc", switch_epoch=20)
    assert ls.q_at(spec, 0) == 2.0
    assert ls.q_at(spec, 19) == 2.0
    assert ls.q_at(spec, 20) == 1.0
    spec60 = ls.LossSpec(kind="nc", switch_epoch=60)
    assert ls.q_at(spec60, 59) == 2.0
    with pytest.raises(ConfigError):
        ls.q_at(spec, -1)


def test_loss_spec_validation():
    with pytest.raises(ConfigError):
        ls.LossSpec(kind="focal")
    with pytest.raises(ConfigError):
        ls.LossSpec(q_early=2.5)
    with pytest.raises(ConfigError):
        ls.LossSpec(q_early=1.0, q_late=2.0)
    with pytest.raises(ConfigError):
        ls.LossSpec(gce_q=0.0)
    with pytest.raises(ConfigError):
        ls.LossSpec(grad_mode="semi")
    d = ls.LossSpec(switch_epoch=40).to_dict()
    assert ls.LossSpec.from_dict(d) == ls.LossSpec(switch_epoch=40)


# ---------------------------------------------------------------- baselines


def test_iou_values():
    assert ls.baseline_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0]), "iou").value == 0.0
    r = ls.baseline_loss(np.array([0.5, 0.5]), np.array([1.0, 0.0]), "iou")
    assert abs(r.value - (1.0 - 0.5 / 1.5)) < 1e-9


def test_ce_value_at_half():
    p = np.full((4, 4), 0.5)
    g = (np.arange(16).reshape(4, 4) % 2).astype(float)
    r = ls.baseline_loss(p, g, "ce")
    assert abs(r.value - math.log(2.0)) < 1e-9


def test_gce_values():
    one = ls.baseline_loss(np.array([1.0 - 1e-7]), np.array([1.0]), "gce")
    assert abs(one.value) < 1e-6
    half = ls.baseline_loss(np.array([0.5]), np.array([1.0]), "gce")
    # direct evaluation: (1 - 0.5^0.7) / 0.7
    expect = (1.0 - math.exp(0.7 * math.log(0.5))) / 0.7
    assert abs(half.value - expect) < 1e-9
    assert abs(half.value - 0.5492) < 5e-5


def test_mae_value_and_equal_magnitude_grads():
    r = ls.baseline_loss(np.array([0.5, 0.5]), np.array([1.0, 0.0]), "mae")
    assert abs(r.value - 0.5) < 1e-12
    np.testing.assert_allclose(r.grad, [-0.5, 0.5], atol=1e-12)
    assert np.unique(np.abs(r.grad)).size == 1


@pytest.mark.parametrize("kind", ["ce", "iou", "mae", "gce"])
@pytest.mark.parametrize("seed", range(20))
def test_baseline_grads_vs_fd(kind, seed):
    rng = np.random.default_rng(300 + seed)
    g = (rng.uniform(size=(4, 5)) > 0.5).astype(float)
    g.reshape(-1)[0] = 1.0  # keep iou union nonzero
    p = np.where(g > 0.5, rng.uniform(0.05, 0.9, g.shape),
                 rng.uniform(0.1, 0.95, g.shape))
    r = ls.baseline_loss(p, g, kind)
    f = fd_grad(lambda t: ls.baseline_loss(t, g, kind).value, p)
    assert rel_err(r.grad, f) < 1e-4


def test_clamp_counter():
    ls.reset_clamp_count()
    p = np.array([0.0, 0.5, 1.0])
    g = np.array([0.0, 1.0, 1.0])
    r = ls.baseline_loss(p, g, "ce")
    assert np.isfinite(r.value)
    assert ls.clamp_count() == 2
    ls.baseline_loss(p, g, "gce")
    assert ls.clamp_count() == 4
    ls.reset_clamp_count()
    assert ls.clamp_count() == 0


def test_baseline_unknown_kind():
    with pytest.raises(ConfigError):
        ls.baseline_loss(np.zeros(2), np.zeros(2), "dice")


# ------------------------------------------------------------ boundary dice


def _brute_boundary(x):
    h, w = x.shape
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            win = x[max(0, i - 1):min(h, i + 2), max(0, j - 1):min(w, j + 2)]
            out[i, j] = win.max() - win.min()
    return out


def _brute_dice(p, g):
    bp = _brute_boundary(p)
    bg = _brute_boundary(g)
    eps = 1.0
    return 1.0 - (2.0 * (bp * bg).sum() + eps) / (bp.sum() + bg.sum() + eps)


def test_dice_zero_for_identical_binary_mask():
    g = np.zeros((8, 8))
    g[2:6, 3:7] = 1.0
    r = ls.dice_boundary_loss(g, g)
    assert abs(r.value) < 1e-9


def test_dice_zero_for_empty_masks():
    z = np.zeros((6, 6))
    assert abs(ls.dice_boundary_loss(z, z).value) < 1e-12


def test_dice_dilated_blob_vs_brute_force(rng):
    g = np.zeros((10, 10))
    g[3:7, 2:6] = 1.0
    dil, _ = pool3(g, "max")
    r = ls.dice_boundary_loss(dil, g)
    assert r.value > 0.0
    assert abs(r.value - _brute_dice(dil, g)) < 1e-9


@pytest.mark.parametrize("seed", range(20))
def test_dice_grad_vs_fd(seed):
    rng = np.random.default_rng(400 + seed)
    # well-separated distinct values so pooling argmax is stable under fd
    p = rng.permutation(np.linspace(0.05, 0.95, 16)).reshape(4, 4)
    g = np.zeros((4, 4))
    g[1:3, 1:3] = 1.0
    r = ls.dice_boundary_loss(p, g)
    f = fd_grad(lambda t: ls.dice_boundary_loss(t, g).value, p)
    assert rel_err(r.grad, f) < 1e-4


# ---------------------------------------------------------------- composite


def test_composite_degenerate_single_output():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(1, 4, 4))
    g = (rng.uniform(size=(1, 4, 4)) > 0.5).astype(float)
    g[0, 0, 0] = 1.0
    spec = ls.LossSpec(kind="nc", switch_epoch=0)
    r = ls.composite_loss([logits], g, spec, epoch=5, lambda_dice=0.0)
    expect = ls.nc_loss(sigmoid(logits), g, 1.0)
    assert abs(r.value - expect) < 1e-12
    assert len(r.grad) == 1 and r.grad[0].shape == logits.shape


def test_composite_five_identical_outputs():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(1, 4, 4))
    g = (rng.uniform(size=(1, 4, 4)) > 0.5).astype(float)
    g[0, 1, 1] = 1.0
    spec = ls.LossSpec(kind="nc", switch_epoch=10)
    one = ls.composite_loss([logits], g, spec, epoch=0)
    five = ls.composite_loss([logits] * 5, g, spec, epoch=0)
    assert abs(one.value - five.value) < 1e-12


def test_composite_empty_raises():
    with pytest.raises(ShapeError):
        ls.composite_loss([], np.zeros((1, 2, 2)), ls.LossSpec(), 0)


@pytest.mark.parametrize("kind", ["nc", "ce", "iou", "mae", "gce", "composite", "dice"])
def test_composite_grad_vs_fd(kind):
    rng = np.random.default_rng(7)
    k = 2
    logits = [rng.normal(scale=0.8, size=(1, 4, 4)) for _ in range(k)]
    g = (rng.uniform(size=(1, 4, 4)) > 0.5).astype(float)
    g[0, 2, 2] = 1.0
    spec = ls.LossSpec(kind=kind, q_early=1.5, q_late=1.5, switch_epoch=0)
    r = ls.composite_loss(logits, g, spec, epoch=3)
    for i in range(k):
        def scalar(t, i=i):
            cur = list(logits)
            cur[i] = t
            return ls.composite_loss(cur, g, spec, epoch=3).value

        f = fd_grad(scalar, logits[i])
        assert rel_err(r.grad[i], f) < 1e-4
