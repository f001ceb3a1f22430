"""
Haar wavelet decomposition of camouflage images
===============================================

The auxiliary network's frequency branch runs on orthonormal Haar
subbands. The transform is exactly invertible and preserves energy, so
nothing is lost by splitting an image into a low-pass band (ll) and
three detail bands (lh, hl, hh); camouflage tends to live in the detail
bands, where texture grain differs even when color does not.
"""
import numpy as np

from nsl.data import synth_camo
from nsl.wavelet import dwt_haar, idwt_haar

s = synth_camo(seed=21, size=64, difficulty=0.6)
x = s.image[None]  # transforms are batched: (B,C,H,W) -> (B,C,H/2,W/2) x4

sub = dwt_haar(x)
print("subband shapes:", sub.ll.shape)

tot = float((x ** 2).sum())
for name in ("ll", "lh", "hl", "hh"):
    band = getattr(sub, name)
    print(f"{name}: {100 * float((band ** 2).sum()) / tot:5.2f}% of energy")

rec = idwt_haar(sub)
print(f"reconstruction max error: {np.abs(rec - x).max():.2e}")

# detail energy concentrates around the object boundary: compare the
# mean |hh| inside a band around the mask edge vs far from it
hh = np.abs(sub.hh).mean(axis=(0, 1))
gt_half = s.gt[0][::2, ::2] > 0.5
edge = gt_half ^ np.roll(gt_half, 1, 0) | (gt_half ^ np.roll(gt_half, 1, 1))
print(f"mean |hh| on boundary {hh[edge].mean():.4f} "
      f"vs elsewhere {hh[~edge].mean():.4f}")
