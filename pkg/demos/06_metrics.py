"""
Segmentation metrics used throughout the harness
================================================

Four standard saliency/camouflage metrics (MAE, adaptive-threshold
F-measure, enhanced-alignment E, structure S) plus plain thresholded
IoU. All take a soft prediction in [0,1] and a binary ground truth.
"""
import numpy as np

from nsl.data import synth_camo
from nsl.metrics import mean_report, single_report

s = synth_camo(seed=33, size=64, difficulty=0.5)
g = s.gt[0]

cases = {
    "perfect": g.astype(float),
    "blurred": np.clip(g + 0.25 * np.random.default_rng(0).standard_normal(g.shape), 0, 1),
    "half missing": np.where(np.arange(g.shape[1])[None, :] < 32, g, 0.0),
    "all background": np.zeros_like(g),
    "all 0.5": np.full_like(g, 0.5),
}
hdr = f"{'case':>15}  {'mae':>6} {'f_beta':>6} {'e_phi':>6} {'s_alpha':>7} {'iou':>6}"
print(hdr)
for name, p in cases.items():
    r = single_report(p, g)
    print(f"{name:>15}  {r.mae:6.3f} {r.f_beta:6.3f} {r.e_phi:6.3f} "
          f"{r.s_alpha:7.3f} {r.iou:6.3f}")

# reports aggregate by averaging each metric over samples
batch = [single_report(cases["blurred"], g), single_report(cases["perfect"], g)]
agg = mean_report(batch)
print(f"\nmean over 2 samples: f_beta {agg.f_beta:.3f}, n = {agg.n_samples}")
