"""Dense tensor kernels with hand-written backward passes.

All tensors are plain numpy arrays. The public ops take single samples in
[C,H,W] layout and normalize to float64; the *_b kernels take a stacked batch
[B,C,H,W], follow the dtype of their inputs (float32 training roughly halves
both GEMM time and memory traffic on AVX-512 machines), and are what the
model actually calls, because one BLAS call over a batch beats eight over
single samples. Nothing here keeps state: every backward takes whatever the
forward needs recomputed or passed back in.

Also hosts the Adam optimizer state/step and the warmup-cosine learning-rate
schedule used by every training loop.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ShapeError

DTYPE = np.float64


def as_f64(x):
    return np.asarray(x, dtype=DTYPE)


# ---------------------------------------------------------------- parameters


class Param:
    """One learnable array: value plus gradient plus Adam moments.

    float32 values are kept as float32; anything else is normalized to
    float64. Grad and moment buffers always match the value dtype.
    """

    __slots__ = ("name", "value", "grad", "m", "v")

    def __init__(self, value, name: str = ""):
        self.name = name
        value = np.asarray(value)
        if value.dtype != np.float32:
            value = value.astype(DTYPE, copy=False)
        self.value = value
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad.fill(0.0)

    @property
    def shape(self):
        return self.value.shape


def adam_step(p: Param, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, t: int = 1) -> Param:
    """Bias-corrected Adam update, in place on p. t counts steps from 1.

    The in-place ops replay the textbook expression with the exact same
    floating-point sequence, just without the temporaries:
        m = b1*m + (1-b1)*g ; v = b2*v + (1-b2)*g^2
        value -= lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)
    """
    if t < 1:
        raise ConfigError(f"adam_step: t must be >= 1, got {t}")
    g = p.grad
    p.m *= beta1
    p.m += (1.0 - beta1) * g
    gg = g * g
    gg *= (1.0 - beta2)
    p.v *= beta2
    p.v += gg
    m_hat = p.m / (1.0 - beta1 ** t)
    v_hat = p.v / (1.0 - beta2 ** t)
    np.sqrt(v_hat, out=v_hat)
    v_hat += eps
    m_hat *= lr
    m_hat /= v_hat
    p.value -= m_hat
    return p


@dataclass
class LrSchedule:
    """Linear warmup to lr_peak, then cosine annealing to lr_final."""

    lr_init: float = 1e-7
    lr_peak: float = 1e-4
    lr_final: float = 1e-7
    warmup_epochs: int = 10
    total_epochs: int = 100

    def __post_init__(self):
        if not (0 < self.lr_init <= self.lr_peak):
            raise ConfigError("LrSchedule: need 0 < lr_init <= lr_peak")
        if not (0 <= self.warmup_epochs < self.total_epochs):
            raise ConfigError("LrSchedule: need warmup_epochs < total_epochs")


def lr_at(sched: LrSchedule, epoch: int) -> float:
    if epoch < 0 or epoch > sched.total_epochs:
        raise ConfigError(
            f"lr_at: epoch {epoch} outside [0, {sched.total_epochs}]")
    w = sched.warmup_epochs
    if w > 0 and epoch <= w:
        return sched.lr_init + (sched.lr_peak - sched.lr_init) * (epoch / w)
    span = sched.total_epochs - w
    cos_part = (1.0 + math.cos(math.pi * (epoch - w) / span)) / 2.0
    return sched.lr_final + (sched.lr_peak - sched.lr_final) * cos_part


# -------------------------------------------------------------- convolution


def _conv_out_extent(n, k, stride, pad, dilation):
    eff = dilation * (k - 1) + 1
    out = (n + 2 * pad - eff) // stride + 1
    if out < 1:
        raise ShapeError(
            f"conv2d: spatial extent {n} too small for kernel {k} "
            f"(stride={stride}, pad={pad}, dilation={dilation})")
    return out


def _same_pad(k, dilation):
    return dilation * (k - 1) // 2


def _cfirst_padded(x, pad):
    """(B,C,H,W) -> contiguous (C,B,H+2p,W+2p); pad and transpose in one copy."""
    B, c, H, W = x.shape
    xt = np.zeros((c, B, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
    xt[:, :, pad:pad + H, pad:pad + W] = x.transpose(1, 0, 2, 3)
    return xt


def _im2col_hwc(x, pad, kh, kw):
    """x: (B,C,H,W) -> columns (B*ho*wo, kh*kw*C), channels-last so every
    patch row is three contiguous W-runs; unit stride and dilation only."""
    B, c, H, W = x.shape
    xh = np.zeros((B, H + 2 * pad, W + 2 * pad, c), dtype=x.dtype)
    xh[:, pad:pad + H, pad:pad + W, :] = x.transpose(0, 2, 3, 1)
    win = np.lib.stride_tricks.sliding_window_view(xh, (kh, kw), axis=(1, 2))
    # (B,ho,wo,C,kh,kw) view -> rows ordered (ki,kj,c)
    col = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    ho, wo = H + 2 * pad - kh + 1, W + 2 * pad - kw + 1
    return col.reshape(B * ho * wo, kh * kw * c)


def conv2d_b(x, w, b, stride: int = 1, pad=None, dilation: int = 1, ctx=None):
    """Cross-correlation. x: (B,Cin,H,W), w: (Cout,Cin,k,k) -> (B,Cout,H',W').

    pad=None means 'same' padding for the given dilation (exact only for odd k).
    Unit stride and dilation go through a single im2col GEMM; other cases use
    one plain 2-d GEMM per kernel tap. Batched 3-d matmul is avoided on
    purpose, its broadcast path misses BLAS. If ctx is a dict, the column
    matrix is stashed there so a following backward can skip the re-gather.
    """
    B, cin, H, W = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin_w != cin:
        raise ShapeError(
            f"conv2d: input channels {cin} != weight in_channels {cin_w}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    if pad is None:
        pad = _same_pad(kh, dilation)
    ho = _conv_out_extent(H, kh, stride, pad, dilation)
    wo = _conv_out_extent(W, kw, stride, pad, dilation)
    if stride == 1 and dilation == 1:
        col = _im2col_hwc(x, pad, kh, kw)
        w2 = np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(
            kh * kw * cin, cout)
        if ctx is not None:
            ctx["col"] = col
        yn = np.dot(col, w2)
        yn += b
        return np.ascontiguousarray(
            yn.reshape(B, ho, wo, cout).transpose(0, 3, 1, 2))
    xt = _cfirst_padded(x, pad)
    n = B * ho * wo
    wt = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
    acc = np.zeros((cout, n), dtype=x.dtype)
    tmp = np.empty((cout, n), dtype=x.dtype)
    for i in range(kh):
        i0 = i * dilation
        for j in range(kw):
            j0 = j * dilation
            xs = np.ascontiguousarray(
                xt[:, :, i0:i0 + stride * (ho - 1) + 1:stride,
                   j0:j0 + stride * (wo - 1) + 1:stride]).reshape(cin, n)
            np.dot(wt[i, j], xs, out=tmp)
            acc += tmp
    y = acc.reshape(cout, B, ho, wo).transpose(1, 0, 2, 3) + b[:, None, None]
    return y


def conv2d_bwd_b(x, w, gy, stride: int = 1, pad=None, dilation: int = 1,
                 ctx=None):
    """Gradients of conv2d_b w.r.t. (x, w, b) given upstream gy."""
    B, cin, H, W = x.shape
    cout, _, kh, kw = w.shape
    if pad is None:
        pad = _same_pad(kh, dilation)
    _, _, ho, wo = gy.shape
    n = B * ho * wo
    if stride == 1 and dilation == 1 and pad <= kh - 1:
        gyn = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(n, cout)
        gb = gyn.sum(axis=0)
        if ctx is not None and "col" in ctx:
            col = ctx["col"]
        else:
            col = _im2col_hwc(x, pad, kh, kw)
        gw = np.ascontiguousarray(
            np.dot(col.T, gyn).reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1))
        # input gradient as a convolution of gy with the flipped kernel,
        # swapped channel roles; avoids the 9-pass overlap fold
        colg = _im2col_hwc(gy, kh - 1 - pad, kh, kw)
        wf = np.ascontiguousarray(
            w[:, :, ::-1, ::-1].transpose(2, 3, 0, 1)).reshape(
                kh * kw * cout, cin)
        gxn = np.dot(colg, wf)
        gx = np.ascontiguousarray(
            gxn.reshape(B, H, W, cin).transpose(0, 3, 1, 2))
        return gx, gw, gb
    gyt = np.ascontiguousarray(gy.transpose(1, 0, 2, 3)).reshape(cout, n)
    gb = gyt.sum(axis=1)
    gw = np.empty_like(w)
    xt = _cfirst_padded(x, pad)
    wt = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
    gxt = np.zeros_like(xt)
    tmpx = np.empty((cin, n), dtype=x.dtype)
    for i in range(kh):
        i0 = i * dilation
        for j in range(kw):
            j0 = j * dilation
            sl = (slice(None), slice(None),
                  slice(i0, i0 + stride * (ho - 1) + 1, stride),
                  slice(j0, j0 + stride * (wo - 1) + 1, stride))
            xs = np.ascontiguousarray(xt[sl]).reshape(cin, n)
            gw[:, :, i, j] = np.dot(gyt, xs.T)
            np.dot(wt[i, j].T, gyt, out=tmpx)
            gxt[sl] += tmpx.reshape(cin, B, ho, wo)
    gx = np.ascontiguousarray(
        gxt[:, :, pad:pad + H, pad:pad + W].transpose(1, 0, 2, 3))
    return gx, gw, gb


def conv2d(x, w, b, stride: int = 1, pad=None, dilation: int = 1):
    """Single-sample wrapper: x (Cin,H,W) -> (Cout,H',W')."""
    x = as_f64(x)
    if x.ndim != 3:
        raise ShapeError(f"conv2d: expected 3-d input, got shape {x.shape}")
    return conv2d_b(x[None], as_f64(w), as_f64(b), stride, pad, dilation)[0]


def conv2d_grad(x, w, gy, stride: int = 1, pad=None, dilation: int = 1):
    """Single-sample gradient wrapper; returns (gx, gw, gb)."""
    gx, gw, gb = conv2d_bwd_b(as_f64(x)[None], as_f64(w), as_f64(gy)[None],
                              stride, pad, dilation)
    return gx[0], gw, gb


# -------------------------------------------------------------- activations


def relu(x):
    return np.maximum(x, 0.0)


def relu_bwd(x, gy):
    return gy * (x > 0)


def sigmoid(x):
    # split by sign so neither exp overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_bwd(y, gy):
    """Takes the forward output y, not the input."""
    return gy * y * (1.0 - y)


def activation(x, kind: str):
    x = as_f64(x)
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"activation: unknown kind {kind!r}")


def activation_grad(x, gy, kind: str):
    x, gy = as_f64(x), as_f64(gy)
    if kind == "relu":
        return relu_bwd(x, gy)
    if kind == "sigmoid":
        return sigmoid_bwd(sigmoid(x), gy)
    raise ConfigError(f"activation_grad: unknown kind {kind!r}")


# ---------------------------------------------------------------- resampling


@lru_cache(maxsize=None)
def _resize_matrix(n_in: int, n_out: int, dtype=DTYPE):
    """1-d bilinear interpolation matrix (n_out, n_in), half-pixel centers.

    Weights are computed in float64 and only cast at the end, so the float32
    matrix is the correctly-rounded float64 one.
    """
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    if n_in == 1:
        m[:, 0] = 1.0
    else:
        scale = n_in / n_out
        for o in range(n_out):
            src = (o + 0.5) * scale - 0.5
            src = min(max(src, 0.0), n_in - 1.0)
            i0 = min(int(math.floor(src)), n_in - 2)
            f = src - i0
            m[o, i0] += 1.0 - f
            m[o, i0 + 1] += f
    if dtype != DTYPE:
        m = m.astype(dtype)
    m.setflags(write=False)
    return m


def _sep_apply(x, mh, mw):
    """Row matrix on H, column matrix on W, via flat 2-d GEMMs."""
    B, C, H, W = x.shape
    ho, wo = mh.shape[0], mw.shape[0]
    t = np.dot(mh, x.reshape(B * C, H, W).transpose(1, 0, 2).reshape(H, B * C * W))
    t = t.reshape(ho, B * C, W).transpose(1, 0, 2).reshape(B * C * ho, W)
    y = np.dot(t, mw.T)
    return y.reshape(B, C, ho, wo)


def resize_bilinear_b(x, out_hw):
    """x: (B,C,H,W) -> (B,C,ho,wo). Separable matrix product per axis."""
    ho, wo = out_hw
    B, C, H, W = x.shape
    if (H, W) == (ho, wo):
        return x
    dt = x.dtype.type
    return _sep_apply(x, _resize_matrix(H, ho, dt), _resize_matrix(W, wo, dt))


def resize_bilinear_bwd_b(gy, in_hw):
    h, w = in_hw
    B, C, ho, wo = gy.shape
    if (h, w) == (ho, wo):
        return gy
    dt = gy.dtype.type
    return _sep_apply(gy, _resize_matrix(h, ho, dt).T.copy(),
                      _resize_matrix(w, wo, dt).T.copy())


def avgpool2_b(x):
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"down2: extents must be even, got {H}x{W}")
    return x.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))


def avgpool2_bwd_b(gy):
    g = np.repeat(np.repeat(gy, 2, axis=2), 2, axis=3)
    g *= 0.25
    return g


def resample(x, factor: str):
    """x: (C,H,W); factor 'up2' (bilinear) or 'down2' (2x2 average pool)."""
    x = as_f64(x)
    if x.ndim != 3:
        raise ShapeError(f"resample: expected 3-d input, got {x.shape}")
    _, H, W = x.shape
    if factor == "up2":
        return resize_bilinear_b(x[None], (2 * H, 2 * W))[0]
    if factor == "down2":
        return avgpool2_b(x[None])[0]
    raise ConfigError(f"resample: unknown factor {factor!r}")


def resample_grad(gy, factor: str, in_hw):
    gy = as_f64(gy)
    if factor == "up2":
        return resize_bilinear_bwd_b(gy[None], in_hw)[0]
    if factor == "down2":
        return avgpool2_bwd_b(gy[None])[0]
    raise ConfigError(f"resample_grad: unknown factor {factor!r}")


# ------------------------------------------------------------- concatenation


def concat_channels(xs):
    """Stack [C_i,H,W] maps along the channel axis, argument order kept."""
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    hw = xs[0].shape[-2:]
    for k, t in enumerate(xs):
        if t.shape[-2:] != hw:
            raise ShapeError(
                f"concat_channels: input {k} spatial {t.shape[-2:]} != {hw}")
    axis = xs[0].ndim - 3
    return np.concatenate(xs, axis=axis)


def split_channels(gy, counts):
    """Inverse of concat_channels on the gradient side."""
    axis = gy.ndim - 3
    edges = np.cumsum(counts)[:-1]
    return np.split(gy, edges, axis=axis)


# ---------------------------------------------------- 3x3 min/max pooling


def _pool3_stack(x):
    """All nine 3x3-neighborhood shifts of x (..., H, W), edge-replicated."""
    H, W = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    xp = np.pad(x, pad, mode="edge")
    views = [xp[..., i:i + H, j:j + W] for i in range(3) for j in range(3)]
    return np.stack(views, axis=0)


def pool3(x, mode: str):
    """3x3 stride-1 max or min pool with edge replication.

    Returns (y, idx); idx stores the winning tap (first hit on ties) and is
    what the backward needs to route gradients.
    """
    st = _pool3_stack(x)
    if mode == "max":
        idx = np.argmax(st, axis=0)
    elif mode == "min":
        idx = np.argmin(st, axis=0)
    else:
        raise ConfigError(f"pool3: unknown mode {mode!r}")
    y = np.take_along_axis(st, idx[None], axis=0)[0]
    return y, idx


def pool3_bwd(gy, idx, shape):
    """Scatter gy back through the tap recorded in idx."""
    H, W = shape[-2:]
    pad_shape = tuple(shape[:-2]) + (H + 2, W + 2)
    gxp = np.zeros(pad_shape, dtype=gy.dtype)
    for t in range(9):
        i, j = divmod(t, 3)
        gxp[..., i:i + H, j:j + W] += gy * (idx == t)
    # fold the replicated border rows/columns back onto the edge pixels
    gxp[..., 1, :] += gxp[..., 0, :]
    gxp[..., H, :] += gxp[..., H + 1, :]
    gxp[..., :, 1] += gxp[..., :, 0]
    gxp[..., :, W] += gxp[..., :, W + 1]
    return gxp[..., 1:H + 1, 1:W + 1]
