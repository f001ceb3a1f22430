"""Evaluation measures between a soft predicted mask and a binary GT.

Conventions are fixed and recorded in run summaries: F_beta uses the adaptive
threshold min(2*mean(p), 1) with beta^2 = 0.3; E_phi is the single-map
enhanced-alignment score of the mean-centered soft maps; S_alpha mixes
object- and region-aware structural similarity with alpha = 0.5; IoU
binarizes at 0.5. Degenerate ground truths (all background / all foreground)
fall back to comparing means, as the measures' reference definitions do.
"""

from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import as_f64

_EPS = np.spacing(1)

METRIC_CONVENTIONS = {
    "f_beta": "adaptive threshold min(2*mean,1), beta2=0.3",
    "e_phi": "soft single-map enhanced alignment",
    "s_alpha": "object/region structure measure, alpha=0.5",
    "iou": "threshold 0.5",
}


def _pair(p, g):
    p = as_f64(p)
    g = as_f64(g)
    if p.shape != g.shape:
        raise ShapeError(f"metric: p shape {p.shape} != g shape {g.shape}")
    return p, g


def mae_metric(p, g) -> float:
    p, g = _pair(p, g)
    return float(np.abs(p - g).mean())


def f_measure(p, g, beta2: float = 0.3, threshold="adaptive") -> float:
    p, g = _pair(p, g)
    gt = g > 0.5
    if not gt.any():
        raise ConfigError("f_measure: ground truth has no foreground")
    if threshold == "adaptive":
        t = min(2.0 * float(p.mean()), 1.0)
    else:
        t = float(threshold)
    bin_p = p >= t
    tp = float(np.logical_and(bin_p, gt).sum())
    if tp == 0.0:
        return 0.0
    precision = tp / float(bin_p.sum())
    recall = tp / float(gt.sum())
    return (1.0 + beta2) * precision * recall / (beta2 * precision + recall)


def iou_score(p, g, threshold: float = 0.5) -> float:
    p, g = _pair(p, g)
    bin_p = p >= threshold
    gt = g > 0.5
    union = float(np.logical_or(bin_p, gt).sum())
    if union == 0.0:
        return 1.0
    return float(np.logical_and(bin_p, gt).sum()) / union


# ------------------------------------------------------------- e-measure


def e_measure(p, g) -> float:
    p, g = _pair(p, g)
    mg = float(g.mean())
    if mg == 0.0:  # nothing to align with, compare means
        return 1.0 - float(p.mean())
    if mg == 1.0:
        return float(p.mean())
    phi_p = p - p.mean()
    phi_g = g - mg
    align = 2.0 * phi_p * phi_g / (phi_p ** 2 + phi_g ** 2 + _EPS)
    enhanced = (align + 1.0) ** 2 / 4.0
    return float(np.clip(enhanced.mean(), 0.0, 1.0))


# ------------------------------------------------------------- s-measure


def _s_object_half(x_vals):
    """2x/(x^2+1+sigma_x) similarity of a foreground slice to the ideal 1."""
    if x_vals.size == 0:
        return 0.0
    x = float(x_vals.mean())
    sigma = float(x_vals.std(ddof=1)) if x_vals.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + _EPS)


def _s_object(p, g):
    gt = g > 0.5
    u = float(g.mean())
    fg_score = _s_object_half(p[gt])
    bg_score = _s_object_half((1.0 - p)[~gt])
    return u * fg_score + (1.0 - u) * bg_score


def _ssim(x, y):
    n = x.size
    if n == 0:
        return 0.0
    mx, my = float(x.mean()), float(y.mean())
    nv = n - 1 if n > 1 else 1
    vx = float(((x - mx) ** 2).sum()) / nv
    vy = float(((y - my) ** 2).sum()) / nv
    vxy = float(((x - mx) * (y - my)).sum()) / nv
    a = 4.0 * mx * my * vxy
    b = (mx * mx + my * my) * (vx + vy)
    if a != 0.0:
        return a / (b + _EPS)
    return 1.0 if b == 0.0 else 0.0


def _centroid(g):
    h, w = g.shape
    total = g.sum()
    if total == 0:
        return round(h / 2), round(w / 2)
    rows = (g.sum(axis=1) * np.arange(1, h + 1)).sum() / total
    cols = (g.sum(axis=0) * np.arange(1, w + 1)).sum() / total
    return int(round(rows)), int(round(cols))


def _s_region(p, g):
    cy, cx = _centroid(g)
    h, w = g.shape
    area = h * w
    score = 0.0
    for rs, cs, in ((slice(0, cy), slice(0, cx)), (slice(0, cy), slice(cx, w)),
                    (slice(cy, h), slice(0, cx)), (slice(cy, h), slice(cx, w))):
        gp = g[rs, cs]
        weight = gp.size / area
        if weight > 0.0:
            score += weight * _ssim(p[rs, cs], gp)
    return score


def s_measure(p, g, alpha: float = 0.5) -> float:
    p, g = _pair(p, g)
    if p.ndim == 3 and p.shape[0] == 1:
        p, g = p[0], g[0]
    if p.ndim != 2:
        raise ShapeError(f"s_measure: expected a single 2-d map, got {p.shape}")
    mg = float(g.mean())
    if mg == 0.0:
        return 1.0 - float(p.mean())
    if mg == 1.0:
        return float(p.mean())
    sm = alpha * _s_object(p, g) + (1.0 - alpha) * _s_region(p, g)
    return float(np.clip(sm, 0.0, 1.0))


# ---------------------------------------------------------------- reports


@dataclass
class MetricReport:
    """Mean metrics over n_samples maps; one row of any results table."""

    mae: float
    e_phi: float
    f_beta: float
    s_alpha: float
    iou: float
    n_samples: int

    CSV_HEADER = "mae,e_phi,f_beta,s_alpha,iou,n_samples"

    def to_csv_row(self) -> str:
        return (f"{self.mae!r},{self.e_phi!r},{self.f_beta!r},"
                f"{self.s_alpha!r},{self.iou!r},{self.n_samples}")

    def to_json_dict(self):
        return asdict(self)

    @classmethod
    def from_json_dict(cls, d):
        return cls(**d)


def single_report(p, g) -> MetricReport:
    """All five measures for one prediction/GT pair."""
    p, g = _pair(p, g)
    if p.ndim == 3 and p.shape[0] == 1:
        p, g = p[0], g[0]
    return MetricReport(
        mae=mae_metric(p, g),
        e_phi=e_measure(p, g),
        f_beta=f_measure(p, g),
        s_alpha=s_measure(p, g),
        iou=iou_score(p, g),
        n_samples=1,
    )


def mean_report(reports) -> MetricReport:
    """Sample-weighted mean in listed order (fixed-order reduction)."""
    reports = list(reports)
    if not reports:
        raise ConfigError("mean_report: no reports to aggregate")
    n = sum(r.n_samples for r in reports)
    acc = {k: 0.0 for k in ("mae", "e_phi", "f_beta", "s_alpha", "iou")}
    for r in reports:
        for k in acc:
            acc[k] += getattr(r, k) * r.n_samples
    return MetricReport(n_samples=n, **{k: v / n for k, v in acc.items()})
