"""Two small segmentation networks built from hand-rolled kernels.

CamoNet("anet") is the two-branch auxiliary network: the image and the
box-masked proposal go through one shared encoder (siamese), each branch gets
its own frequency-fusion block, the branches are merged by per-level fusion
gates, and a reverse decoder emits five full-resolution logit maps. The
initial mask m4 comes from an ASPP head fed directly with the raw deepest
encoder features.

CamoNet("pnet") is the single-stream primary network: same pieces minus the
proposal branch and the branch-fusion gates.

The backward pass is manual. Every tracked op records a closure on a Tape;
running the tape in reverse accumulates gradients into Param.grad and input
buffers. With tape=None the same code paths run forward-only, so evaluation
on a frozen model is reentrant.
"""

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .data import Box, make_rng
from .errors import ConfigError, DataError, ShapeError
from .numerics import (DTYPE, Param, as_f64, concat_channels, conv2d_b,
                       conv2d_bwd_b, relu as _relu_np, relu_bwd,
                       resize_bilinear_b, resize_bilinear_bwd_b, sigmoid,
                       split_channels)
from .wavelet import Subbands, dwt_haar, dwt_haar_grad

_S_INIT = 11  # seed stream tag for weight init

CKPT_MAGIC = b"NSL-CKPT-v1\n"


@dataclass(frozen=True)
class EncoderConfig:
    stages: int = 4
    stage_channels: tuple = (16, 32, 64, 128)
    unified_channels: int = 64
    blocks_per_stage: int = 2

    def __post_init__(self):
        if len(self.stage_channels) != self.stages:
            raise ConfigError("EncoderConfig: one channel count per stage")

    def to_dict(self):
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["stage_channels"] = tuple(d["stage_channels"])
        return cls(**d)


@dataclass
class FeaturePyramid:
    """Four unified 64-channel levels on the dyadic ladder H/4 .. H/32."""

    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray
    f4: np.ndarray

    def as_list(self):
        return [self.f1, self.f2, self.f3, self.f4]


@dataclass
class Predictions:
    """Five logit maps at full input resolution; p1 is the main output."""

    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray
    p4: np.ndarray
    m4: np.ndarray

    def as_list(self):
        return [self.p1, self.p2, self.p3, self.p4, self.m4]


# ------------------------------------------------------------ tape autodiff


class T:
    """A tracked batched tensor: value plus lazily-created gradient."""

    __slots__ = ("v", "g")

    def __init__(self, v):
        self.v = v
        self.g = None


class Tape:
    """Records one backward closure per op, runs them in reverse."""

    __slots__ = ("ops",)

    def __init__(self):
        self.ops = []

    def record(self, fn):
        self.ops.append(fn)

    def backward(self):
        for fn in reversed(self.ops):
            fn()


def _acc(t: T, g):
    t.g = g if t.g is None else t.g + g


def t_conv(model, tape, name, x: T, stride: int = 1, dilation: int = 1) -> T:
    w = model.params[name + ".w"]
    b = model.params[name + ".b"]
    ctx = {} if tape is not None else None
    y = T(conv2d_b(x.v, w.value, b.value, stride=stride, dilation=dilation,
                   ctx=ctx))
    if tape is not None:
        def bwd():
            if y.g is None:
                return
            gx, gw, gb = conv2d_bwd_b(x.v, w.value, y.g, stride=stride,
                                      dilation=dilation, ctx=ctx)
            w.grad += gw
            b.grad += gb
            _acc(x, gx)
        tape.record(bwd)
    return y


def t_relu(tape, x: T) -> T:
    y = T(_relu_np(x.v))
    if tape is not None:
        def bwd():
            if y.g is not None:
                _acc(x, relu_bwd(x.v, y.g))
        tape.record(bwd)
    return y


def t_add(tape, a: T, b: T) -> T:
    y = T(a.v + b.v)
    if tape is not None:
        def bwd():
            if y.g is not None:
                _acc(a, y.g)
                _acc(b, y.g)
        tape.record(bwd)
    return y


def t_rev(tape, x: T) -> T:
    """1 - sigmoid(x); the reverse-attention map of the decoder."""
    s = sigmoid(x.v)
    y = T(1.0 - s)
    if tape is not None:
        def bwd():
            if y.g is not None:
                _acc(x, y.g * (s * s - s))
        tape.record(bwd)
    return y


def t_resize(tape, x: T, out_hw) -> T:
    in_hw = x.v.shape[-2:]
    if tuple(in_hw) == tuple(out_hw):
        return x
    y = T(resize_bilinear_b(x.v, out_hw))
    if tape is not None:
        def bwd():
            if y.g is not None:
                _acc(x, resize_bilinear_bwd_b(y.g, in_hw))
        tape.record(bwd)
    return y


def t_concat(tape, xs) -> T:
    y = T(concat_channels([x.v for x in xs]))
    if tape is not None:
        counts = [x.v.shape[-3] for x in xs]

        def bwd():
            if y.g is None:
                return
            for x, g in zip(xs, split_channels(y.g, counts)):
                _acc(x, g)
        tape.record(bwd)
    return y


def t_dwt(tape, x: T):
    s = dwt_haar(x.v)
    outs = tuple(T(v) for v in (s.ll, s.lh, s.hl, s.hh))
    if tape is not None:
        def bwd():
            gs = [o.g for o in outs]
            if all(g is None for g in gs):
                return
            gs = [np.zeros_like(outs[0].v) if g is None else g for g in gs]
            _acc(x, dwt_haar_grad(Subbands(ll=gs[0], lh=gs[1],
                                           hl=gs[2], hh=gs[3])))
        tape.record(bwd)
    return outs


def t_gate(model, tape, prefix, a: T, b: T) -> T:
    """Adaptive fusion: resize b to a's grid, concat, conv-relu-conv."""
    b = t_resize(tape, b, a.v.shape[-2:])
    h = t_concat(tape, [a, b])
    h = t_relu(tape, t_conv(model, tape, prefix + ".c1", h))
    return t_conv(model, tape, prefix + ".c2", h)


# ------------------------------------------------------------- the network


def _gate_specs(prefix, ca, cb, u):
    return [(f"{prefix}.c1", u, ca + cb, 3), (f"{prefix}.c2", u, u, 3)]


def _conv_specs(kind: str, cfg: EncoderConfig):
    """Fixed-order list of (name, c_out, c_in, k); order defines init draws
    and the checkpoint blob layout."""
    sc, u = cfg.stage_channels, cfg.unified_channels
    specs = [("enc.stem", sc[0], 3, 3)]
    cin = sc[0]
    for k, c in enumerate(sc, start=1):
        specs.append((f"enc.s{k}.down", c, cin, 3))
        for j in range(1, cfg.blocks_per_stage + 1):
            specs.append((f"enc.s{k}.b{j}", c, c, 3))
        specs.append((f"enc.u{k}", u, c, 3))
        cin = c
    stack_c = 4 * u
    ft_prefixes = ("ft_x", "ft_b") if kind == "anet" else ("ft",)
    for pref in ft_prefixes:
        for k in range(1, 5):
            specs += _gate_specs(f"{pref}.g{k}", u, stack_c, u)
    if kind == "anet":
        for k in range(1, 5):
            specs += _gate_specs(f"fuse.g{k}", u, u, u)
    aspp_in = 2 * u if kind == "anet" else u
    specs += [("aspp.d1", u, aspp_in, 3), ("aspp.d2", u, aspp_in, 3),
              ("aspp.d4", u, aspp_in, 3), ("aspp.mix", u, 3 * u, 1),
              ("aspp.m4", 1, u, 3)]
    for k in range(1, 5):
        specs += _gate_specs(f"dec.l{k}.ga", u, 1, u)
        specs += _gate_specs(f"dec.l{k}.gb", u, 1, u)
        specs.append((f"dec.l{k}.proj", 1, u, 3))
    return specs


class CamoNet:
    """Parameter container for one network; forwards live in free functions.

    dtype picks the working precision: float64 for gradient checking and
    diagnostics, float32 for training runs where it roughly halves the wall
    time. Weights are always drawn in float64 and then cast, so a float32
    model is the rounded image of the float64 one at the same seed.
    """

    def __init__(self, kind: str, seed: int, config: EncoderConfig = None,
                 dtype=DTYPE):
        if kind not in ("anet", "pnet"):
            raise ConfigError(f"CamoNet: kind must be 'anet' or 'pnet', got {kind!r}")
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ConfigError(f"CamoNet: dtype must be float32/float64, got {dtype!r}")
        self.kind = kind
        self.seed = int(seed)
        self.config = config or EncoderConfig()
        self.params = {}
        rng = make_rng(self.seed, _S_INIT)
        for name, cout, cin, k in _conv_specs(kind, self.config):
            fan_in = cin * k * k
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
            self.params[name + ".w"] = Param(w.astype(self.dtype),
                                             name=name + ".w")
            self.params[name + ".b"] = Param(np.zeros(cout, dtype=self.dtype),
                                             name=name + ".b")

    def parameters(self):
        return [self.params[n] for n in sorted(self.params)]

    def n_params(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()


# ------------------------------------------------------- component forwards


def _encode_t(model, tape, x: T):
    B, c, H, W = x.v.shape
    if c != 3:
        raise ShapeError(f"encode: expected 3 input channels, got {c}")
    if H % 32 or W % 32:
        raise ShapeError(f"encode: extents must be divisible by 32, got {H}x{W}")
    cfg = model.config
    h = t_relu(tape, t_conv(model, tape, "enc.stem", x, stride=2))
    feats = []
    for k in range(1, cfg.stages + 1):
        h = t_relu(tape, t_conv(model, tape, f"enc.s{k}.down", h, stride=2))
        for j in range(1, cfg.blocks_per_stage + 1):
            h = t_relu(tape, t_add(tape, h, t_conv(model, tape, f"enc.s{k}.b{j}", h)))
        feats.append(t_conv(model, tape, f"enc.u{k}", h))
    return feats


def _ft_block_t(model, tape, pyr, prefix: str):
    """Frequency fusion: shallow levels get the diagonal detail band, deep
    levels the approximation band, of the level-1-aligned feature stack."""
    size1 = pyr[0].v.shape[-2:]
    stack = t_concat(tape, [pyr[0]] + [t_resize(tape, p, size1) for p in pyr[1:]])
    ll, _, _, hh = t_dwt(tape, stack)
    out = []
    for k, p in enumerate(pyr, start=1):
        band = hh if k <= 2 else ll
        out.append(t_gate(model, tape, f"{prefix}.g{k}", p, band))
    return out


def _fuse_branches_t(model, tape, px, pb):
    for a, b in zip(px, pb):
        if a.v.shape != b.v.shape:
            raise ShapeError(
                f"fuse_branches: level shapes differ, {a.v.shape} vs {b.v.shape}")
    return [t_gate(model, tape, f"fuse.g{k}", a, b)
            for k, (a, b) in enumerate(zip(px, pb), start=1)]


def _aspp_t(model, tape, f4: T, out_hw):
    branches = [t_relu(tape, t_conv(model, tape, f"aspp.d{d}", f4, dilation=d))
                for d in (1, 2, 4)]
    deep = t_conv(model, tape, "aspp.mix", t_concat(tape, branches))
    m4 = t_resize(tape, t_conv(model, tape, "aspp.m4", deep), out_hw)
    return deep, m4


def _reverse_decode_t(model, tape, fc, m4: T, out_hw):
    """Coarse-to-fine refinement: each level gates its features with the
    previous mask and with its reversal, then adds the mask back in logit
    space. The residual propagates at level resolution; full-size maps are
    produced by a final upsample."""
    prev = m4
    level_maps = {}
    for k in range(4, 0, -1):
        f = fc[k - 1]
        sz = f.v.shape[-2:]
        mask_k = t_resize(tape, prev, sz)
        rev_k = t_resize(tape, t_rev(tape, prev), sz)
        h = t_gate(model, tape, f"dec.l{k}.ga", f, mask_k)
        h = t_gate(model, tape, f"dec.l{k}.gb", h, rev_k)
        pk = t_add(tape, t_conv(model, tape, f"dec.l{k}.proj", h), mask_k)
        level_maps[k] = pk
        prev = pk
    outs = [t_resize(tape, level_maps[k], out_hw) for k in (1, 2, 3, 4)]
    return outs + [m4]


def _make_proposal_b(x, boxes):
    _, _, H, W = x.shape
    out = np.empty_like(x)
    for i, box in enumerate(boxes):
        out[i] = x[i] * np.asarray(box.indicator(H, W), dtype=x.dtype)
    return out


def anet_forward_t(model, tape, x: T, boxes):
    if model.kind != "anet":
        raise ConfigError(f"anet_forward: model kind is {model.kind!r}")
    H, W = x.v.shape[-2:]
    xb = T(_make_proposal_b(x.v, boxes))  # box mask is constant, no grad path
    px = _encode_t(model, tape, x)
    pb = _encode_t(model, tape, xb)
    fx = _ft_block_t(model, tape, px, "ft_x")
    fb = _ft_block_t(model, tape, pb, "ft_b")
    fc = _fuse_branches_t(model, tape, fx, fb)
    f4 = t_concat(tape, [px[3], pb[3]])
    _, m4 = _aspp_t(model, tape, f4, (H, W))
    return _reverse_decode_t(model, tape, fc, m4, (H, W))


def pnet_forward_t(model, tape, x: T):
    if model.kind != "pnet":
        raise ConfigError(f"pnet_forward: model kind is {model.kind!r}")
    H, W = x.v.shape[-2:]
    pyr = _encode_t(model, tape, x)
    fc = _ft_block_t(model, tape, pyr, "ft")
    _, m4 = _aspp_t(model, tape, pyr[3], (H, W))
    return _reverse_decode_t(model, tape, fc, m4, (H, W))


# ------------------------------------------------- per-sample public surface


def _pyr_t(pyr: FeaturePyramid):
    return [T(as_f64(f)[None]) for f in pyr.as_list()]


def _pyr_np(levels):
    return FeaturePyramid(*(t.v[0] for t in levels))


def encode(model, x) -> FeaturePyramid:
    return _pyr_np(_encode_t(model, None, T(as_f64(x)[None])))


def ft_block(model, pyr: FeaturePyramid, prefix: str = None) -> FeaturePyramid:
    if prefix is None:
        prefix = "ft" if model.kind == "pnet" else "ft_x"
    return _pyr_np(_ft_block_t(model, None, _pyr_t(pyr), prefix))


def fuse_branches(model, px: FeaturePyramid, pb: FeaturePyramid) -> FeaturePyramid:
    if model.kind != "anet":
        raise ConfigError("fuse_branches: only the two-branch network has fusion gates")
    return _pyr_np(_fuse_branches_t(model, None, _pyr_t(px), _pyr_t(pb)))


def aspp(model, f4, out_hw):
    deep, m4 = _aspp_t(model, None, T(as_f64(f4)[None]), out_hw)
    return deep.v[0], m4.v[0]


def rev(p):
    """1 - sigmoid(p), elementwise; complements sigmoid exactly."""
    return 1.0 - sigmoid(as_f64(p))


def make_proposal(x, box: Box):
    """Zero out everything outside the (inclusive) box."""
    x = as_f64(x)
    if x.ndim != 3:
        raise ShapeError(f"make_proposal: expected [3,H,W], got {x.shape}")
    return x * box.indicator(x.shape[-2], x.shape[-1])


def reverse_decode(model, fc: FeaturePyramid, m4) -> Predictions:
    m4 = as_f64(m4)
    outs = _reverse_decode_t(model, None, _pyr_t(fc), T(m4[None]),
                             m4.shape[-2:])
    return Predictions(*(t.v[0] for t in outs))


def anet_forward(model, x, box: Box) -> Predictions:
    outs = anet_forward_t(model, None, T(as_f64(x)[None]), [box])
    return Predictions(*(t.v[0] for t in outs))


def pnet_forward(model, x) -> Predictions:
    outs = pnet_forward_t(model, None, T(as_f64(x)[None]))
    return Predictions(*(t.v[0] for t in outs))


# --------------------------------------------------------------- checkpoint


def save_checkpoint(model: CamoNet, path):
    """Text JSON header + concatenated little-endian float64 blobs, in
    sorted parameter-name order; byte-stable across platforms.

    Blobs are 64-bit regardless of the model's working dtype; a float32
    value widens exactly, so save/load round-trips are bit-true either way.
    """
    names = sorted(model.params)
    header = {
        "format": 1,
        "kind": model.kind,
        "seed": model.seed,
        "dtype": model.dtype.name,
        "config": model.config.to_dict(),
        "params": [{"name": n, "shape": list(model.params[n].shape)}
                   for n in names],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for n in names:
            f.write(np.ascontiguousarray(model.params[n].value,
                                         dtype="<f8").tobytes())
    return Path(path)


def load_checkpoint(path) -> CamoNet:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise DataError(f"checkpoint {path}: bad magic")
    off = len(CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    header = json.loads(raw[off:off + hlen].decode())
    off += hlen
    if header.get("format") != 1:
        raise DataError(f"checkpoint {path}: unsupported format {header.get('format')}")
    dtype = np.dtype(header.get("dtype", "float64"))
    model = CamoNet(header["kind"], header["seed"],
                    EncoderConfig.from_dict(header["config"]), dtype=dtype)
    for entry in header["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in model.params or model.params[name].shape != shape:
            raise DataError(f"checkpoint {path}: unexpected parameter {name} {shape}")
        n_bytes = int(np.prod(shape)) * 8
        arr = np.frombuffer(raw[off:off + n_bytes], dtype="<f8").reshape(shape)
        model.params[name].value = arr.astype(dtype)
        off += n_bytes
    if off != len(raw):
        raise DataError(f"checkpoint {path}: {len(raw) - off} trailing bytes")
    return model
