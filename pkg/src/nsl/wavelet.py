"""Single-level orthonormal 2-d Haar transform and its inverse.

Per non-overlapping 2x2 block [[a,b],[c,d]] the four subband samples are

    ll = (a+b+c+d)/2    hl = (a-b+c-d)/2
    lh = (a+b-c-d)/2    hh = (a-b-c+d)/2

which is the separable orthonormal Haar pair, so energy is conserved and the
inverse is the transpose of the forward map.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

__all__ = ["Subbands", "dwt_haar", "idwt_haar", "dwt_haar_grad"]


@dataclass
class Subbands:
    """The four half-resolution subbands of one decomposition level."""

    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray

    def __post_init__(self):
        s = self.ll.shape
        for name in ("lh", "hl", "hh"):
            if getattr(self, name).shape != s:
                raise ShapeError(f"Subbands: {name} shape mismatch vs ll {s}")


def _corners(x):
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return a, b, c, d


def dwt_haar(x) -> Subbands:
    """x: (..., H, W) with H, W even -> four (..., H/2, W/2) subbands."""
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise ShapeError(f"dwt_haar: extents must be even, got {H}x{W}")
    a, b, c, d = _corners(x)
    ll = (a + b + c + d) * 0.5
    hl = (a - b + c - d) * 0.5
    lh = (a + b - c - d) * 0.5
    hh = (a - b - c + d) * 0.5
    return Subbands(ll=ll, lh=lh, hl=hl, hh=hh)


def idwt_haar(s: Subbands):
    """Exact inverse; output shape doubles both trailing extents."""
    ll, lh, hl, hh = s.ll, s.lh, s.hl, s.hh
    out_shape = ll.shape[:-2] + (2 * ll.shape[-2], 2 * ll.shape[-1])
    x = np.empty(out_shape, dtype=ll.dtype)
    x[..., 0::2, 0::2] = (ll + hl + lh + hh) * 0.5
    x[..., 0::2, 1::2] = (ll - hl + lh - hh) * 0.5
    x[..., 1::2, 0::2] = (ll + hl - lh - hh) * 0.5
    x[..., 1::2, 1::2] = (ll - hl - lh + hh) * 0.5
    return x


def dwt_haar_grad(gs: Subbands):
    """Gradient of dwt_haar: the transpose map, which for an orthonormal
    transform is exactly the inverse."""
    return idwt_haar(gs)
