import numpy as np
import pytest

from nsl.errors import ShapeError
from nsl.wavelet import Subbands, dwt_haar, dwt_haar_grad, idwt_haar

from conftest import fd_grad, rel_err


def test_constant_block():
    x = np.ones((1, 2, 2))
    s = dwt_haar(x)
    assert s.ll[0, 0, 0] == 2.0
    assert s.lh[0, 0, 0] == 0.0
    assert s.hl[0, 0, 0] == 0.0
    assert s.hh[0, 0, 0] == 0.0


def test_checker_block():
    x = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    s = dwt_haar(x)
    assert s.ll[0, 0, 0] == 1.0
    assert s.hl[0, 0, 0] == 0.0
    assert s.lh[0, 0, 0] == 0.0
    assert s.hh[0, 0, 0] == 1.0


def test_energy_conservation():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 8, 8))
    s = dwt_haar(x)
    e_sub = (s.ll ** 2 + s.lh ** 2 + s.hl ** 2 + s.hh ** 2).sum()
    assert abs(e_sub - (x ** 2).sum()) < 1e-10


def test_round_trip():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 16, 16))
    assert np.max(np.abs(idwt_haar(dwt_haar(x)) - x)) < 1e-10


def test_zero_subbands_to_zero_image():
    z = np.zeros((2, 4, 4))
    x = idwt_haar(Subbands(ll=z, lh=z, hl=z, hh=z))
    np.testing.assert_array_equal(x, np.zeros((2, 8, 8)))


def test_ll_only_constant():
    ll = np.full((1, 2, 2), 2.0)
    z = np.zeros_like(ll)
    x = idwt_haar(Subbands(ll=ll, lh=z, hl=z, hh=z))
    assert np.max(np.abs(x - 1.0)) == 0.0


def test_linearity():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 8, 8))
    y = rng.normal(size=(2, 8, 8))
    a, b = 1.7, -0.4
    s1 = dwt_haar(a * x + b * y)
    sx, sy = dwt_haar(x), dwt_haar(y)
    for name in ("ll", "lh", "hl", "hh"):
        lhs = getattr(s1, name)
        rhs = a * getattr(sx, name) + b * getattr(sy, name)
        assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_odd_extent_raises():
    with pytest.raises(ShapeError, match="even"):
        dwt_haar(np.zeros((1, 5, 4)))


def test_subband_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        Subbands(ll=np.zeros((1, 2, 2)), lh=np.zeros((1, 2, 2)),
                 hl=np.zeros((1, 2, 2)), hh=np.zeros((1, 3, 2)))


def test_dwt_grad_vs_fd():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 4, 4))
    r = {n: rng.normal(size=(1, 2, 2)) for n in ("ll", "lh", "hl", "hh")}

    def scalar(t):
        s = dwt_haar(t)
        return float(sum((getattr(s, n) * r[n]).sum() for n in r))

    g = dwt_haar_grad(Subbands(ll=r["ll"], lh=r["lh"], hl=r["hl"], hh=r["hh"]))
    f = fd_grad(scalar, x)
    assert rel_err(g, f) < 1e-6
