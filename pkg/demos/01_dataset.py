"""
Synthetic camouflage data: samples, boxes, label noise
======================================================

Every image is a procedural texture; the foreground is a blob that shares
the background's texture statistics, so it is hard to see by intensity
alone. Ground truth is the blob mask, and each sample carries a bounding
box derived from it.
"""
import numpy as np

from nsl.data import (derive_box, disagreement_rate, generate_dataset,
                      inject_noise, load_dataset, split_dataset, synth_camo,
                      write_pgm, write_ppm)

# one sample: image is (3,H,W) in [0,1], gt is (1,H,W) binary
s = synth_camo(seed=7, size=64, difficulty=0.55)
fg = float(s.gt.mean())
print(f"sample {s.id}: image {s.image.shape}, gt {s.gt.shape}, "
      f"foreground fraction {fg:.3f}")
print(f"tight box: {s.box}")

# difficulty 0 gives an obvious object, 1 a nearly invisible one
for diff in (0.0, 0.5, 1.0):
    t = synth_camo(seed=7, size=64, difficulty=diff)
    inside = t.image[:, t.gt[0] > 0.5].mean()
    outside = t.image[:, t.gt[0] <= 0.5].mean()
    print(f"difficulty {diff:.1f}: mean intensity fg {inside:.3f} "
          f"vs bg {outside:.3f}")

# boxes can be jittered to mimic sloppy human annotation
jit = derive_box(s.gt, jitter=0.15, seed=3)
print(f"jittered box: {jit}")

# structured label corruption: morphological resize + false blobs +
# a missing boundary sector, tuned to hit a target disagreement rate
for rho in (0.1, 0.25, 0.4):
    noisy = inject_noise(s.gt, rho=rho, seed=11)
    rate, fp_r, fn_r = disagreement_rate(noisy.mask, s.gt)
    print(f"rho {rho:.2f}: realized {rate:.3f} (fp {fp_r:.3f}, fn {fn_r:.3f})")

# a dataset on disk is a manifest.json plus PPM images and PGM masks
root = generate_dataset("/tmp/demo_ds", count=24, size=48, seed=5)
man, samples = load_dataset(root)
print(f"dataset: {len(man.ids('train'))} train / {len(man.ids('test'))} test "
      f"at {man.size}x{man.size}")

# the weakly supervised split: frac_m of train keeps full masks (D_m),
# the rest keeps only boxes (D_n)
sp = split_dataset(man, frac_m=0.25, seed=5)
print(f"split: {len(sp.ids('d_m'))} fully labeled, {len(sp.ids('d_n'))} box-only")

write_ppm("/tmp/demo_img.ppm", s.image)
write_pgm("/tmp/demo_gt.pgm", s.gt)
print("wrote /tmp/demo_img.ppm and /tmp/demo_gt.pgm")
