"""Noise-correction segmentation loss and ablation baselines.

The main loss for a soft prediction p and (possibly noisy, possibly soft)
label g is

    L(p, g; q) = sum_i |p_i - g_i|^q / (sum_i (p_i + g_i) - sum_i p_i g_i)

with q in [1, 2]. q = 2 behaves like a soft-IoU loss and fits fast; q = 1 is
an MAE-style form whose per-pixel gradient magnitude is constant, which stops
confidently-wrong label pixels from dominating late training. Training
schedules switch q from 2 to 1 at a preset epoch.

Two gradient modes are provided. 'exact' is the full quotient rule.
'detached_denominator' treats the denominator as a constant, which at q = 1
reduces to sign(p_i - g_i)/den, the equal-magnitude form this loss is built
around.

All reductions run over every axis except an optional leading batch axis in
the *_b variants; reduction order is fixed, so results are bit-deterministic.
"""

from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, LossError, ShapeError
from .numerics import as_f64, pool3, pool3_bwd, sigmoid

_P_CLAMP = 1e-7
_DICE_EPS = 1.0

LOSS_KINDS = ("nc", "ce", "iou", "mae", "gce", "dice", "composite")

# counts pixels that log-based losses had to pull away from exactly 0/1;
# purely diagnostic, reset at will
_clamp_count = 0


def clamp_count() -> int:
    return _clamp_count


def reset_clamp_count():
    global _clamp_count
    _clamp_count = 0


@dataclass
class LossSpec:
    """Which loss to train with, and how q evolves over epochs.

    kind 'nc' is the scheduled noise-correction loss; 'ce', 'iou', 'mae',
    'gce', 'dice' are single baselines; 'composite' is the conventional
    CE + IoU sum used as an ablation baseline.
    """

    kind: str = "nc"
    q_early: float = 2.0
    q_late: float = 1.0
    switch_epoch: int = 0
    gce_q: float = 0.7
    grad_mode: str = "exact"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"LossSpec: unknown kind {self.kind!r}")
        for name in ("q_early", "q_late"):
            v = getattr(self, name)
            if not (1.0 <= v <= 2.0):
                raise ConfigError(f"LossSpec: {name}={v} outside [1, 2]")
        if self.q_late > self.q_early:
            raise ConfigError("LossSpec: q_late must be <= q_early")
        if self.switch_epoch < 0:
            raise ConfigError("LossSpec: switch_epoch must be >= 0")
        if not (0.0 < self.gce_q <= 1.0):
            raise ConfigError(f"LossSpec: gce_q={self.gce_q} outside (0, 1]")
        if self.grad_mode not in ("exact", "detached_denominator"):
            raise ConfigError(
                f"LossSpec: unknown grad_mode {self.grad_mode!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LossResult:
    """Scalar loss plus its gradient w.r.t. the prediction(s)."""

    value: float
    grad: object  # ndarray, or list of ndarrays for composite_loss


def q_at(spec: LossSpec, epoch: int) -> float:
    if epoch < 0:
        raise ConfigError(f"q_at: epoch must be >= 0, got {epoch}")
    return spec.q_early if epoch < spec.switch_epoch else spec.q_late


# ------------------------------------------------------------------ helpers


def _flat(p, g):
    p = as_f64(p)
    g = as_f64(g)
    if p.shape != g.shape:
        raise ShapeError(f"loss: p shape {p.shape} != g shape {g.shape}")
    return p.reshape(p.shape[0], -1), g.reshape(g.shape[0], -1)


def _abs_pow(absd, q):
    if q == 1.0:
        return absd
    if q == 2.0:
        return absd * absd
    return absd ** q


# --------------------------------------------------------- noise-correction


def _nc_den(p2, g2):
    den = p2.sum(axis=1) + g2.sum(axis=1) - (p2 * g2).sum(axis=1)
    if np.any(den <= 0.0):
        raise LossError("nc loss: zero denominator (p and g both all-zero)")
    return den


def nc_value_b(p, g, q):
    """Batched values: p, g (B, ...) -> (B,)."""
    p2, g2 = _flat(p, g)
    den = _nc_den(p2, g2)
    return _abs_pow(np.abs(p2 - g2), q).sum(axis=1) / den


def nc_grad_b(p, g, q, mode: str = "exact"):
    p2, g2 = _flat(p, g)
    den = _nc_den(p2, g2)[:, None]
    d = p2 - g2
    if q == 1.0:
        term1 = np.sign(d) / den
    else:
        absd = np.abs(d)
        term1 = q * _abs_pow(absd, q - 1.0) * np.sign(d) / den
    if mode == "detached_denominator":
        grad = term1
    elif mode == "exact":
        num = _abs_pow(np.abs(d), q).sum(axis=1)[:, None]
        grad = term1 - num * (1.0 - g2) / (den * den)
    else:
        raise ConfigError(f"nc_grad: unknown mode {mode!r}")
    return grad.reshape(np.shape(p))


def nc_loss(p, g, q: float) -> float:
    """Scalar loss over the whole tensor (no batch axis)."""
    return float(nc_value_b(as_f64(p)[None], as_f64(g)[None], q)[0])


def nc_grad(p, g, q: float, mode: str = "exact"):
    return nc_grad_b(as_f64(p)[None], as_f64(g)[None], q, mode)[0]


# ------------------------------------------------------------------ baselines


def _clamp01(p2):
    global _clamp_count
    hit = (p2 < _P_CLAMP) | (p2 > 1.0 - _P_CLAMP)
    n = int(hit.sum())
    if n:
        _clamp_count += n
        p2 = np.clip(p2, _P_CLAMP, 1.0 - _P_CLAMP)
    return p2


def ce_b(p, g):
    p2, g2 = _flat(p, g)
    p2 = _clamp01(p2)
    m = p2.shape[1]
    val = -(g2 * np.log(p2) + (1.0 - g2) * np.log1p(-p2)).sum(axis=1) / m
    grad = (p2 - g2) / (p2 * (1.0 - p2)) / m
    return val, grad.reshape(np.shape(p))


def iou_b(p, g):
    p2, g2 = _flat(p, g)
    inter = (p2 * g2).sum(axis=1)
    union = p2.sum(axis=1) + g2.sum(axis=1) - inter
    if np.any(union <= 0.0):
        raise LossError("iou loss: empty union (p and g both all-zero)")
    val = 1.0 - inter / union
    u = union[:, None]
    grad = (inter[:, None] * (1.0 - g2) - g2 * u) / (u * u)
    return val, grad.reshape(np.shape(p))


def mae_b(p, g):
    p2, g2 = _flat(p, g)
    m = p2.shape[1]
    d = p2 - g2
    val = np.abs(d).sum(axis=1) / m
    grad = np.sign(d) / m
    return val, grad.reshape(np.shape(p))


def gce_b(p, g, gce_q: float):
    p2, g2 = _flat(p, g)
    p2 = _clamp01(p2)
    m = p2.shape[1]
    pt = g2 * p2 + (1.0 - g2) * (1.0 - p2)
    val = ((1.0 - pt ** gce_q) / gce_q).sum(axis=1) / m
    grad = -(pt ** (gce_q - 1.0)) * (2.0 * g2 - 1.0) / m
    return val, grad.reshape(np.shape(p))


def baseline_loss(p, g, kind: str, gce_q: float = 0.7) -> LossResult:
    p4, g4 = as_f64(p)[None], as_f64(g)[None]
    if kind == "ce":
        val, grad = ce_b(p4, g4)
    elif kind == "iou":
        val, grad = iou_b(p4, g4)
    elif kind == "mae":
        val, grad = mae_b(p4, g4)
    elif kind == "gce":
        val, grad = gce_b(p4, g4, gce_q)
    else:
        raise ConfigError(f"baseline_loss: unknown kind {kind!r}")
    return LossResult(value=float(val[0]), grad=grad[0])


# --------------------------------------------------------------- boundary


def dice_b(p, g):
    """Soft-boundary DICE: morphological gradient (3x3 max minus min pool)
    of both maps, then eps-smoothed DICE overlap of the two boundary maps."""
    p = as_f64(p)
    g = as_f64(g)
    if p.shape != g.shape:
        raise ShapeError(f"dice: p shape {p.shape} != g shape {g.shape}")
    pmax, imax = pool3(p, "max")
    pmin, imin = pool3(p, "min")
    bp = pmax - pmin
    gmax, _ = pool3(g, "max")
    gmin, _ = pool3(g, "min")
    bg = gmax - gmin
    red = tuple(range(1, p.ndim))
    inter = (bp * bg).sum(axis=red)
    sp = bp.sum(axis=red)
    sg = bg.sum(axis=red)
    den = sp + sg + _DICE_EPS
    val = 1.0 - (2.0 * inter + _DICE_EPS) / den
    shp = (slice(None),) + (None,) * (p.ndim - 1)
    dbp = ((2.0 * inter + _DICE_EPS)[shp] - 2.0 * bg * den[shp]) / (den * den)[shp]
    grad = pool3_bwd(dbp, imax, p.shape) - pool3_bwd(dbp, imin, p.shape)
    return val, grad


def dice_boundary_loss(p, g) -> LossResult:
    val, grad = dice_b(as_f64(p)[None], as_f64(g)[None])
    return LossResult(value=float(val[0]), grad=grad[0])


# --------------------------------------------------------------- composite


def primary_terms_b(p_prob, g, spec: LossSpec, q: float):
    """Value/grad of the configured primary term on probabilities."""
    if spec.kind == "nc":
        return (nc_value_b(p_prob, g, q),
                nc_grad_b(p_prob, g, q, spec.grad_mode))
    if spec.kind == "composite":  # conventional CE + IoU sum
        v1, g1 = ce_b(p_prob, g)
        v2, g2 = iou_b(p_prob, g)
        return v1 + v2, g1 + g2
    if spec.kind == "ce":
        return ce_b(p_prob, g)
    if spec.kind == "iou":
        return iou_b(p_prob, g)
    if spec.kind == "mae":
        return mae_b(p_prob, g)
    if spec.kind == "gce":
        return gce_b(p_prob, g, spec.gce_q)
    if spec.kind == "dice":
        return dice_b(p_prob, g)
    raise ConfigError(f"unknown loss kind {spec.kind!r}")


def composite_loss_b(p_list, g, spec: LossSpec, epoch: int,
                     lambda_dice: float = 0.5):
    """Deep-supervision objective over a batch.

    p_list: logit maps [B,1,H,W], one per supervised output, all at g's size.
    Returns per-sample values (B,) and per-output gradients w.r.t. the
    logits, already divided by the output count (not by B).
    """
    if not p_list:
        raise ShapeError("composite loss: empty output list")
    g = as_f64(g)
    q = q_at(spec, epoch)
    k_outputs = len(p_list)
    total = 0.0
    grads = []
    for logits in p_list:
        s = sigmoid(as_f64(logits))
        val, gp = primary_terms_b(s, g, spec, q)
        if lambda_dice != 0.0 and spec.kind != "dice":
            dval, dgrad = dice_b(s, g)
            val = val + lambda_dice * dval
            gp = gp + lambda_dice * dgrad
        total = total + val
        grads.append(gp * s * (1.0 - s) / k_outputs)
    return total / k_outputs, grads


def composite_loss(p_k, g, spec: LossSpec, epoch: int,
                   lambda_dice: float = 0.5) -> LossResult:
    """Single-sample wrapper; grad is a list, one array per output."""
    p4 = [as_f64(p)[None] for p in p_k]
    vals, grads = composite_loss_b(p4, as_f64(g)[None], spec, epoch,
                                   lambda_dice)
    return LossResult(value=float(vals[0]), grad=[gr[0] for gr in grads])
