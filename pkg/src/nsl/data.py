"""Procedural camouflage dataset: synthesis, boxes, label noise, persistence.

Images are multi-octave value-noise textures; the foreground is a smooth blob
whose texture comes from the same family, pulled toward the background as
difficulty rises. Labels can be corrupted with structured, spatially
correlated noise whose realized disagreement rate is tuned by bisection.

Everything is deterministic: every random draw comes from a Generator seeded
through SeedSequence([seed, stream]) with fixed stream tags, and images are
quantized to 8 bits before they ever leave the generator, so saved files
round-trip bit-identically.
"""

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, ShapeError
from .numerics import DTYPE, as_f64, resize_bilinear_b

SCHEMA = "nsl-manifest-v1"

# seed-stream tags, one per consumer
_S_SAMPLE = 1
_S_NOISE = 2
_S_SPLIT = 3
_S_JITTER = 4


def make_rng(*keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(keys))))


def derived_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base, index]).generate_state(1, np.uint64)[0])


# ------------------------------------------------------------------- types


@dataclass(frozen=True)
class Box:
    """Inclusive pixel-coordinate corners: (x0, y0) top-left, (x1, y1)
    bottom-right."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (0 <= self.x0 <= self.x1 and 0 <= self.y0 <= self.y1):
            raise ConfigError(f"Box: bad corners {self}")

    def to_list(self):
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def from_list(cls, v):
        return cls(*(int(c) for c in v))

    def indicator(self, h: int, w: int):
        if self.x1 >= w or self.y1 >= h:
            raise ConfigError(f"Box: {self} outside {w}x{h} image")
        m = np.zeros((1, h, w), dtype=DTYPE)
        m[0, self.y0:self.y1 + 1, self.x0:self.x1 + 1] = 1.0
        return m


@dataclass
class SegSample:
    """One image with its binary mask and (possibly jittered) box prompt."""

    id: str
    image: np.ndarray  # [3,H,W] in [0,1], 8-bit quantized
    gt: np.ndarray     # [1,H,W] binary
    box: Box
    jittered: bool = False


@dataclass
class PseudoLabel:
    """A soft or hard training label standing in for the clean mask."""

    sample_id: str
    mask: np.ndarray  # [1,H,W] in [0,1]
    source: str       # 'anet' or 'injected'
    fp_rate: float
    fn_rate: float


@dataclass
class DatasetManifest:
    """What lives where on disk, plus split assignments."""

    seed: int
    size: int
    samples: list = field(default_factory=list)   # dicts: id/image/mask/box
    splits: dict = field(default_factory=dict)    # name -> list of ids
    generator: dict = field(default_factory=dict)
    schema: str = SCHEMA

    def ids(self, split: str):
        if split not in self.splits:
            raise DataError(f"manifest: no split named {split!r}")
        return list(self.splits[split])

    def entry(self, sample_id: str):
        for s in self.samples:
            if s["id"] == sample_id:
                return s
        raise DataError(f"manifest: unknown sample id {sample_id!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str):
        d = json.loads(text)
        if d.get("schema") != SCHEMA:
            raise DataError(f"manifest: unsupported schema {d.get('schema')!r}")
        return cls(seed=d["seed"], size=d["size"], samples=d["samples"],
                   splits=d["splits"], generator=d["generator"])


# -------------------------------------------------------------- synthesis


def _value_noise(rng, size: int, cells: int, octaves: int,
                 persistence: float = 0.55):
    """Sum of bilinearly upsampled random grids, coarse to fine."""
    acc = np.zeros((size, size), dtype=DTYPE)
    amp, total = 1.0, 0.0
    for _ in range(octaves):
        grid = rng.uniform(-1.0, 1.0, size=(min(cells, size), min(cells, size)))
        acc += amp * resize_bilinear_b(grid[None, None], (size, size))[0, 0]
        total += amp
        amp *= persistence
        cells *= 2
    return acc / total


def _standardize(x):
    s = x.std()
    return (x - x.mean()) / (s if s > 0 else 1.0)


def _blob_mask(rng, size: int):
    """Thresholded low-frequency noise, largest connected component."""
    field_lf = _value_noise(rng, size, cells=3, octaves=2, persistence=0.6)
    target = rng.uniform(0.08, 0.30)
    thr = np.quantile(field_lf, 1.0 - target)
    raw = field_lf > thr
    lab, n = ndimage.label(raw)
    if n == 0:
        return None
    sizes = ndimage.sum_labels(np.ones_like(lab), lab, index=np.arange(1, n + 1))
    mask = lab == (1 + int(np.argmax(sizes)))
    frac = mask.mean()
    if not (0.02 <= frac <= 0.4):
        return None
    return mask


def synth_camo(seed: int, size: int, difficulty: float = 0.55) -> SegSample:
    """One procedural camouflage sample, bit-deterministic in seed.

    difficulty in [0,1] scales how far the foreground texture sits from the
    background family: 0 gives a clearly offset texture, 1 makes the blob a
    phase-for-phase continuation of the background.
    """
    if size < 32 or size & (size - 1):
        raise ConfigError(f"synth_camo: size must be a power of two >= 32, got {size}")
    if not (0.0 <= difficulty <= 1.0):
        raise ConfigError(f"synth_camo: difficulty {difficulty} outside [0,1]")
    rng = make_rng(seed, _S_SAMPLE)

    mask = None
    for _ in range(10):
        mask = _blob_mask(rng, size)
        if mask is not None:
            break
    if mask is None:
        raise DataError(f"synth_camo: no valid blob after 10 attempts (seed {seed})")

    bg_struct = _standardize(_value_noise(rng, size, cells=4, octaves=5))
    fg_indep = _standardize(_value_noise(rng, size, cells=4, octaves=5))
    k = 1.0 - difficulty
    fg_struct = _standardize((1.0 - k) * bg_struct + k * fg_indep)
    delta = 0.45 * k * (1.0 if rng.uniform() < 0.5 else -1.0)

    m = mask.astype(DTYPE)
    img = np.empty((3, size, size), dtype=DTYPE)
    for c in range(3):
        detail = _standardize(_value_noise(rng, size, cells=16, octaves=3))
        bg_pix = 0.5 + 0.16 * bg_struct + 0.05 * detail
        fg_pix = 0.5 + delta + 0.16 * fg_struct + 0.05 * detail
        img[c] = np.clip(bg_pix * (1.0 - m) + fg_pix * m, 0.0, 1.0)

    img = np.round(img * 255.0) / 255.0  # 8-bit before anything downstream
    gt = m[None]
    sid = f"s{seed & 0xffffffff:08x}"
    return SegSample(id=sid, image=img, gt=gt, box=derive_box(gt))


# ------------------------------------------------------------------- boxes


def derive_box(gt, jitter: float = 0.0, seed: int = 0) -> Box:
    """Tight inclusive box over all foreground (union over components).

    jitter > 0 grows or shrinks each side independently by up to
    floor(jitter * side_length) pixels, clipped to the image and never past
    the mask centroid.
    """
    g = as_f64(gt)
    if g.ndim == 3:
        g = g[0]
    fg = g > 0.5
    if not fg.any():
        raise DataError("derive_box: empty mask")
    rows = np.flatnonzero(fg.any(axis=1))
    cols = np.flatnonzero(fg.any(axis=0))
    y0, y1 = int(rows[0]), int(rows[-1])
    x0, x1 = int(cols[0]), int(cols[-1])
    if jitter > 0.0:
        h, w = fg.shape
        ys, xs = np.nonzero(fg)
        cy, cx = float(ys.mean()), float(xs.mean())
        rng = make_rng(seed, _S_JITTER)
        dw = int(jitter * (x1 - x0 + 1))
        dh = int(jitter * (y1 - y0 + 1))
        x0 = x0 + int(rng.integers(-dw, dw + 1))
        x1 = x1 + int(rng.integers(-dw, dw + 1))
        y0 = y0 + int(rng.integers(-dh, dh + 1))
        y1 = y1 + int(rng.integers(-dh, dh + 1))
        x0 = max(0, min(x0, int(math.floor(cx))))
        x1 = min(w - 1, max(x1, int(math.ceil(cx))))
        y0 = max(0, min(y0, int(math.floor(cy))))
        y1 = min(h - 1, max(y1, int(math.ceil(cy))))
    return Box(x0=x0, y0=y0, x1=x1, y1=y1)


# ------------------------------------------------------------ label noise


def disagreement_rate(noisy, gt):
    """Fraction of disputed pixels over twice the union of both foregrounds.

    Object-centric so image size does not dilute the rate; 0.5 means the two
    masks are fully disjoint. Returns (rate, fp_rate, fn_rate)."""
    nz = np.asarray(noisy) > 0.5
    gz = np.asarray(gt) > 0.5
    union = np.logical_or(nz, gz).sum()
    if union == 0:
        return 0.0, 0.0, 0.0
    denom = 2.0 * float(union)
    fp = float(np.logical_and(nz, ~gz).sum()) / denom
    fn = float(np.logical_and(~nz, gz).sum()) / denom
    return fp + fn, fp, fn


def _noise_plan(rng, fg, size, rho):
    """Freeze the random structure once; only magnitudes scale later, which
    keeps the realized rate monotone in the strength parameter."""
    plan = {}
    want_dilate = rng.uniform() < 0.5
    # dilation tops out near (1-area)/2 and cannot reach high rates on large
    # objects, so heavy corruption always goes through the erode branch
    plan["op"] = "dilate" if (want_dilate and rho <= 0.3) else "erode"
    dt_out = ndimage.distance_transform_edt(~fg)
    dt_in = ndimage.distance_transform_edt(fg)
    plan["dt_out"], plan["dt_in"] = dt_out, dt_in
    plan["erode_max"] = max(float(dt_in.max()) * 0.95, 1.0)
    plan["dilate_max"] = size / 2.5
    # per-pixel slack on every radius comparison: pixels cross their
    # thresholds one by one instead of a whole distance ring at a time
    plan["u"] = rng.uniform(0.75, 1.25, size=(size, size))

    n_blobs = int(rng.integers(0, 4))
    far_bg = np.flatnonzero((dt_out > size / 8.0).reshape(-1))
    any_bg = np.flatnonzero((~fg).reshape(-1))
    pool = far_bg if far_bg.size else any_bg
    blobs = []
    for _ in range(n_blobs):
        if pool.size == 0:
            break
        c = int(pool[int(rng.integers(0, pool.size))])
        cy, cx = divmod(c, size)
        rad = rng.uniform(0.5, 1.0) * size / 10.0
        yy, xx = np.mgrid[0:size, 0:size]
        blobs.append((np.hypot(yy - cy, xx - cx), rad))
    plan["blobs"] = blobs

    ys, xs = np.nonzero(fg)
    cy, cx = ys.mean(), xs.mean()
    yy, xx = np.mgrid[0:size, 0:size]
    ang = np.arctan2(yy - cy, xx - cx)
    theta0 = rng.uniform(-math.pi, math.pi)
    width = rng.uniform(math.pi * 0.5, math.pi)
    rel = np.mod(ang - theta0, 2.0 * math.pi)
    plan["sector"] = rel <= width
    plan["band_max"] = size / 6.0
    return plan


def _apply_noise(plan, fg, s: float):
    u = plan["u"]
    if plan["op"] == "dilate":
        m = fg | (plan["dt_out"] <= s * plan["dilate_max"] * u)
    else:
        keep = plan["dt_in"] > s * plan["erode_max"] * u
        m = fg & keep
        if not m.any():  # never fully erase the object
            peak = np.unravel_index(np.argmax(plan["dt_in"]), fg.shape)
            m = np.zeros_like(fg)
            m[peak] = True
    for dist, rad in plan["blobs"]:
        m = m | (dist <= s * rad * u)
    band = (plan["dt_in"] <= s * plan["band_max"] * u) & plan["sector"] & fg
    return m & ~band


def inject_noise(gt, rho: float, seed: int) -> PseudoLabel:
    """Structured corruption of a binary mask to a target disagreement rate.

    Combines one morphological resize (dilate or erode), up to three false
    background blobs, and removal of a boundary band sector; the single
    strength knob behind all three is bisected until the realized rate is
    within +-10% (relative) of rho.
    """
    if rho < 0.0 or rho > 0.5:
        raise ConfigError(f"inject_noise: rho {rho} outside [0, 0.5]")
    g = as_f64(gt)
    squeeze = g.ndim == 3
    fg = (g[0] if squeeze else g) > 0.5
    if not fg.any():
        raise DataError("inject_noise: empty mask")
    if rho == 0.0:
        return PseudoLabel(sample_id="", mask=g.copy() if squeeze else g[None].copy(),
                           source="injected", fp_rate=0.0, fn_rate=0.0)

    size = fg.shape[0]
    rng = make_rng(seed, _S_NOISE)
    plan = _noise_plan(rng, fg, size, rho)

    lo, hi = 0.0, 1.0
    best, best_err = None, float("inf")
    for _ in range(48):
        s = 0.5 * (lo + hi)
        m = _apply_noise(plan, fg, s)
        rate, fp, fn = disagreement_rate(m, fg)
        err = abs(rate - rho)
        if err < best_err:
            best, best_err = (m, rate, fp, fn), err
        if err <= 0.02 * rho:
            break
        if rate < rho:
            lo = s
        else:
            hi = s
    m, rate, fp, fn = best
    if abs(rate - rho) > 0.1 * rho:
        raise DataError(
            f"inject_noise: could not reach rho={rho} (best rate {rate:.4f})")
    mask = m.astype(DTYPE)[None]
    return PseudoLabel(sample_id="", mask=mask, source="injected",
                       fp_rate=fp, fn_rate=fn)


# ------------------------------------------------------------------ splits


def split_dataset(manifest: DatasetManifest, frac_m: float,
                  seed: int) -> DatasetManifest:
    """Partition the train split into D_m (fully labeled) and D_n (box-only).

    |D_m| = round(frac_m * N_train), round-half-up.
    """
    if not (0.0 < frac_m < 1.0):
        raise ConfigError(f"split_dataset: frac_m {frac_m} outside (0,1)")
    train = manifest.ids("train")
    n = len(train)
    n_m = int(math.floor(frac_m * n + 0.5))
    if n_m < 1 or n - n_m < 1:
        raise ConfigError(
            f"split_dataset: frac_m={frac_m} leaves an empty split on {n} samples")
    order = make_rng(seed, _S_SPLIT).permutation(n)
    d_m = sorted(train[i] for i in order[:n_m])
    d_n = sorted(train[i] for i in order[n_m:])
    return DatasetManifest(
        seed=manifest.seed, size=manifest.size, samples=manifest.samples,
        generator=dict(manifest.generator, frac_m=frac_m, split_seed=seed),
        splits={"train": list(train), "test": manifest.ids("test"),
                "d_m": d_m, "d_n": d_n})


# -------------------------------------------------------------- pnm files


def _write_pnm(path: Path, magic: bytes, arr_u8: np.ndarray):
    h, w = arr_u8.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(arr_u8.tobytes())


def _read_pnm_header(f, want: bytes):
    def tokens():
        while True:
            ch = f.read(1)
            if not ch:
                raise DataError("pnm: truncated header")
            if ch == b"#":
                while f.read(1) not in (b"\n", b""):
                    pass
                continue
            if ch.isspace():
                continue
            tok = ch
            while True:
                ch = f.read(1)
                if not ch or ch.isspace():
                    return_tok = tok
                    yield return_tok
                    break
                tok += ch

    gen = tokens()
    magic = next(gen)
    if magic != want:
        raise DataError(f"pnm: bad magic {magic!r}, expected {want!r}")
    dims = []
    while len(dims) < 3:
        dims.append(int(next(gen)))
    w, h, maxval = dims
    if maxval != 255:
        raise DataError(f"pnm: unsupported maxval {maxval}")
    return w, h


def write_ppm(path, image):
    """image [3,H,W] in [0,1] -> binary P6, 8-bit."""
    u8 = np.round(as_f64(image) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    _write_pnm(Path(path), b"P6", u8)


def read_ppm(path):
    with open(path, "rb") as f:
        w, h = _read_pnm_header(f, b"P6")
        raw = f.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise DataError(f"ppm: truncated pixel data in {path}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(DTYPE) / 255.0


def write_pgm(path, mask):
    """mask [1,H,W] or [H,W] in [0,1] -> P5, 8-bit (soft values quantized)."""
    m = as_f64(mask)
    if m.ndim == 3:
        m = m[0]
    _write_pnm(Path(path), b"P5", np.round(m * 255.0).astype(np.uint8))


def read_pgm(path):
    with open(path, "rb") as f:
        w, h = _read_pnm_header(f, b"P5")
        raw = f.read(w * h)
        if len(raw) != w * h:
            raise DataError(f"pgm: truncated pixel data in {path}")
    return (np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(DTYPE) / 255.0)[None]


# ------------------------------------------------------------- persistence


def save_dataset(manifest: DatasetManifest, samples: dict, out_dir) -> Path:
    """Write images/, masks/ and manifest.json; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for entry in manifest.samples:
        s = samples[entry["id"]]
        write_ppm(out / entry["image"], s.image)
        write_pgm(out / entry["mask"], s.gt)
    mpath = out / "manifest.json"
    mpath.write_text(manifest.to_json() + "\n")
    return mpath


def load_dataset(data_dir):
    """Read manifest + all samples; missing files raise naming the id."""
    root = Path(data_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DataError(f"load_dataset: no manifest.json under {root}")
    manifest = DatasetManifest.from_json(mpath.read_text())
    samples = {}
    for entry in manifest.samples:
        ipath = root / entry["image"]
        gpath = root / entry["mask"]
        for p in (ipath, gpath):
            if not p.exists():
                raise DataError(
                    f"load_dataset: sample {entry['id']!r} is missing file {p.name}")
        samples[entry["id"]] = SegSample(
            id=entry["id"], image=read_ppm(ipath), gt=read_pgm(gpath),
            box=Box.from_list(entry["box"]), jittered=bool(entry.get("jittered", False)))
    return manifest, samples


def generate_dataset(out_dir, count: int, size: int, seed: int,
                     difficulty: float = 0.55, test_frac: float = 0.25) -> Path:
    """Synthesize count train + round(count*test_frac) test samples and save."""
    if count < 2:
        raise ConfigError("generate_dataset: need count >= 2")
    n_test = max(1, int(math.floor(count * test_frac + 0.5)))
    samples, entries = {}, []
    train_ids, test_ids = [], []
    for i in range(count + n_test):
        s = synth_camo(derived_seed(seed, i), size, difficulty)
        s.id = f"s{i:04d}"
        samples[s.id] = s
        entries.append({"id": s.id, "image": f"images/{s.id}.ppm",
                        "mask": f"masks/{s.id}.pgm", "box": s.box.to_list()})
        (train_ids if i < count else test_ids).append(s.id)
    manifest = DatasetManifest(
        seed=seed, size=size, samples=entries,
        splits={"train": train_ids, "test": test_ids},
        generator={"difficulty": difficulty, "count": count, "n_test": n_test,
                   "test_frac": test_frac})
    return save_dataset(manifest, samples, out_dir)
