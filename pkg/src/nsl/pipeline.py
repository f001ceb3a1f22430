"""Experiment orchestration: auxiliary net -> pseudo labels -> primary net.

The protocol splits the train set into a small fully labeled part D_m and a
large box-only part D_n.  An auxiliary network (ANet) is trained on D_m with
box prompts, then labels D_n with soft pseudo masks; the primary network
(PNet) trains on the union under the scheduled noise-correction loss.

Everything downstream of a config is a pure function of (config, dataset):
per-epoch CSVs and the run summary are byte-identical across repeated runs.
Training runs in float32 (the gradient-check suite covers the same kernels
in float64); metrics and losses accumulate in float64 either way.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .data import (Box, DatasetManifest, PseudoLabel, SegSample, derive_box,
                   disagreement_rate, inject_noise, load_dataset, make_rng,
                   split_dataset, write_pgm)
from .errors import ConfigError, DataError, TrainingError
from .losses import LossSpec, composite_loss_b, q_at, sigmoid
from .metrics import MetricReport, iou_score, mean_report, single_report
from .model import CamoNet, T, Tape, anet_forward_t, pnet_forward_t
from .numerics import LrSchedule, adam_step, as_f64, lr_at

# rng stream tags; data uses 1..4 and model init uses 11
_S_ORDER_A = 21
_S_AUG_A = 22
_S_ORDER_P = 23
_S_AUG_P = 24
_S_INJECT = 25

_TRAIN_DTYPE = np.float32

PRESETS = {"F1": (0.01, 20), "F5": (0.05, 20), "F10": (0.10, 40), "F20": (0.20, 60)}

EPOCHS_HEADER = "epoch,lr,q,loss,train_iou,test_mae,test_e,test_f,test_s,test_iou"

# ANet always trains on clean masks, so its loss never needs the q schedule
_ANET_LOSS = LossSpec(kind="nc", q_early=2.0, q_late=2.0, switch_epoch=0)


# ------------------------------------------------------------------ config


@dataclass
class ExperimentConfig:
    """Everything a run depends on; serialized verbatim into config.json."""

    data_dir: str
    frac_m: float
    switch_epoch: int
    epochs: int = 100
    batch_size: int = 8
    lr: Optional[LrSchedule] = None
    loss: LossSpec = field(default_factory=LossSpec)
    seed: int = 2024
    noise_override: Optional[float] = None
    augment_flip: bool = True
    augment_crop: bool = True

    def __post_init__(self):
        if not (0.0 < self.frac_m < 1.0):
            raise ConfigError(f"config: frac_m {self.frac_m} outside (0,1)")
        if self.epochs < 1:
            raise ConfigError(f"config: epochs must be >= 1, got {self.epochs}")
        if not (0 <= self.switch_epoch <= self.epochs):
            raise ConfigError(
                f"config: switch_epoch {self.switch_epoch} outside [0, epochs={self.epochs}]")
        if self.batch_size < 1:
            raise ConfigError(f"config: batch_size must be >= 1, got {self.batch_size}")
        if self.lr is None:
            warm = min(LrSchedule().warmup_epochs, self.epochs - 1)
            self.lr = LrSchedule(warmup_epochs=warm, total_epochs=self.epochs)
        if self.lr.total_epochs < self.epochs:
            raise ConfigError(
                f"config: lr schedule covers {self.lr.total_epochs} epochs, run wants {self.epochs}")
        if self.noise_override is not None and not (0.0 <= self.noise_override <= 0.5):
            raise ConfigError(
                f"config: noise_override {self.noise_override} outside [0, 0.5]")

    @classmethod
    def from_preset(cls, name: str, data_dir, **overrides) -> "ExperimentConfig":
        if name not in PRESETS:
            raise ConfigError(f"config: unknown preset {name!r}, have {sorted(PRESETS)}")
        frac_m, switch = PRESETS[name]
        kw = dict(frac_m=frac_m, switch_epoch=switch)
        kw.update(overrides)
        return cls(data_dir=str(data_dir), **kw)

    def resolved_loss(self) -> LossSpec:
        """The loss spec with the run-level switch epoch folded in."""
        return replace(self.loss, switch_epoch=self.switch_epoch)

    def to_json_dict(self) -> dict:
        return {
            "data_dir": str(self.data_dir), "frac_m": self.frac_m,
            "switch_epoch": self.switch_epoch, "epochs": self.epochs,
            "batch_size": self.batch_size, "lr": asdict(self.lr),
            "loss": self.loss.to_dict(), "seed": self.seed,
            "noise_override": self.noise_override,
            "augment_flip": self.augment_flip, "augment_crop": self.augment_crop,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(data_dir=d["data_dir"], frac_m=d["frac_m"],
                   switch_epoch=d["switch_epoch"], epochs=d["epochs"],
                   batch_size=d["batch_size"], lr=LrSchedule(**d["lr"]),
                   loss=LossSpec.from_dict(d["loss"]), seed=d["seed"],
                   noise_override=d["noise_override"],
                   augment_flip=d["augment_flip"], augment_crop=d["augment_crop"])


# ------------------------------------------------------------------ records


@dataclass
class EpochRow:
    epoch: int
    lr: float
    q: float
    loss: float
    train_iou: float
    test: MetricReport

    def to_csv_row(self) -> str:
        t = self.test
        vals = [self.lr, self.q, self.loss, self.train_iou,
                t.mae, t.e_phi, t.f_beta, t.s_alpha, t.iou]
        return ",".join([str(self.epoch)] + [repr(float(v)) for v in vals])


@dataclass
class RunRecord:
    """Per-epoch training curve plus where the final weights ended up."""

    rows: list
    checkpoint: Optional[Path] = None

    def to_csv(self) -> str:
        return "\n".join([EPOCHS_HEADER] + [r.to_csv_row() for r in self.rows]) + "\n"

    def final(self) -> EpochRow:
        return self.rows[-1]


def parse_epochs_csv(text: str) -> list:
    """Inverse of RunRecord.to_csv, as a list of plain dicts."""
    lines = [ln for ln in text.strip().split("\n") if ln]
    if not lines or lines[0] != EPOCHS_HEADER:
        raise DataError("epochs csv: missing or unexpected header")
    names = EPOCHS_HEADER.split(",")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(names):
            raise DataError(f"epochs csv: bad row {ln!r}")
        row = {k: (int(v) if k == "epoch" else float(v)) for k, v in zip(names, parts)}
        out.append(row)
    return out


# -------------------------------------------------------------- train items


@dataclass
class TrainItem:
    """One training example as the optimizer sees it.

    target is what gradients flow against; gt is the clean mask and is only
    ever read for diagnostic IoU logging, never for training.
    """

    id: str
    image: np.ndarray        # [3,H,W] float32
    target: np.ndarray       # [1,H,W] float64, binary or soft
    gt: np.ndarray           # [1,H,W] float64 clean mask
    box: Optional[Box]
    from_dn: bool


def _item_from_sample(s: SegSample, target, from_dn: bool, with_box: bool) -> TrainItem:
    return TrainItem(id=s.id, image=s.image.astype(_TRAIN_DTYPE),
                     target=as_f64(target), gt=as_f64(s.gt),
                     box=s.box if with_box else None, from_dn=from_dn)


def assemble_dt(manifest: DatasetManifest, samples: dict, pseudo: dict) -> list:
    """Union of fully labeled D_m and pseudo-labeled D_n, in stable order.

    D_n targets come exclusively from the pseudo dict; the clean gt rides
    along for IoU diagnostics only.
    """
    items = []
    for sid in manifest.ids("d_m"):
        s = samples[sid]
        items.append(_item_from_sample(s, s.gt, from_dn=False, with_box=False))
    for sid in manifest.ids("d_n"):
        if sid not in pseudo:
            raise DataError(f"assemble_dt: no pseudo label for {sid!r}")
        s = samples[sid]
        items.append(_item_from_sample(s, pseudo[sid].mask, from_dn=True,
                                       with_box=False))
    return items


# ------------------------------------------------------------- augmentation


def _augment_item(img, target, box, rng, do_flip: bool, do_crop: bool,
                  binarize: bool):
    """Horizontal flip and crop-and-resize; both draw from rng every call.

    Binary targets are re-binarized after the resize; soft ones stay soft.
    A crop that would erase all foreground is dropped (sample kept whole).
    """
    h, w = img.shape[-2:]
    if do_flip and rng.uniform() < 0.5:
        img = img[:, :, ::-1].copy()
        target = target[:, :, ::-1].copy()
        if box is not None:
            box = Box(w - 1 - box.x1, box.y0, w - 1 - box.x0, box.y1)
    if do_crop:
        s = rng.uniform(0.7, 1.0)
        ch = max(8, int(round(s * h)))
        cw = max(8, int(round(s * w)))
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        if (ch, cw) != (h, w):
            sub_t = target[:, y0:y0 + ch, x0:x0 + cw]
            had_fg = bool((target > 0.5).any())
            if not had_fg or (sub_t > 0.5).any():
                from .numerics import resize_bilinear_b
                t2 = resize_bilinear_b(as_f64(sub_t)[None], (h, w))[0]
                if binarize:
                    t2 = (t2 > 0.5).astype(np.float64)
                if not (had_fg and binarize and not t2.any()):
                    img = resize_bilinear_b(
                        img[None, :, y0:y0 + ch, x0:x0 + cw], (h, w))[0]
                    target = t2
                    if box is not None:
                        box = derive_box(target)
    return np.ascontiguousarray(img), target, box


# ---------------------------------------------------------------- forwards


def _forward_t(model, tape, xb, boxes):
    if model.kind == "anet":
        return anet_forward_t(model, tape, T(xb), boxes)
    return pnet_forward_t(model, tape, T(xb))


def predict_probs(model, images, boxes=None, batch_size: int = 8) -> list:
    """sigmoid(p1) per image, batched, fixed order, no gradients.

    images: list of [3,H,W]; boxes required iff model is an ANet.
    """
    if model.kind == "anet" and boxes is None:
        raise DataError("predict_probs: anet needs boxes")
    out = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        xb = np.stack([np.asarray(im, dtype=model.dtype) for im in chunk])
        bx = boxes[start:start + batch_size] if boxes is not None else None
        outs = _forward_t(model, None, xb, bx)
        probs = sigmoid(as_f64(outs[0].v))
        out.extend(probs[i] for i in range(len(chunk)))
    return out


def evaluate(model, samples, batch_size: int = 8, csv_path=None,
             json_path=None) -> MetricReport:
    """Mean metrics of sigmoid(p1) over a sample list, in list order."""
    samples = list(samples)
    if not samples:
        raise DataError("evaluate: empty sample list")
    boxes = [s.box for s in samples] if model.kind == "anet" else None
    probs = predict_probs(model, [s.image for s in samples], boxes, batch_size)
    report = mean_report([single_report(p, s.gt)
                          for p, s in zip(probs, samples)])
    if csv_path is not None:
        Path(csv_path).write_text(
            MetricReport.CSV_HEADER + "\n" + report.to_csv_row() + "\n")
    if json_path is not None:
        Path(json_path).write_text(
            json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")
    return report


# ------------------------------------------------------------ training loop


def _train_loop(model, cfg: ExperimentConfig, items, spec: LossSpec,
                test_samples, eval_items, order_tag: int, aug_tag: int):
    """Shared optimizer loop for both networks.

    eval_items are scored against their clean gt after every epoch; the test
    split is evaluated with the same batch size.  All reductions run in a
    fixed order so repeated runs agree bitwise.
    """
    n = len(items)
    if n == 0:
        raise DataError("train: empty training set")
    params = model.parameters()
    use_boxes = model.kind == "anet"
    rows = []
    t_step = 1
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg.lr, epoch)
        order = make_rng(cfg.seed, order_tag, epoch).permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idxs = order[start:start + cfg.batch_size]
            ims, tgs, bxs = [], [], []
            for i in idxs:
                it = items[int(i)]
                rng = make_rng(cfg.seed, aug_tag, epoch, int(i))
                img, tgt, box = _augment_item(
                    it.image, it.target, it.box, rng,
                    cfg.augment_flip, cfg.augment_crop,
                    binarize=not it.from_dn)
                ims.append(img)
                tgs.append(tgt)
                bxs.append(box)
            xb = np.stack(ims)
            gb = np.stack(tgs)
            tape = Tape()
            outs = _forward_t(model, tape, xb, bxs if use_boxes else None)
            vals, grads = composite_loss_b([o.v for o in outs], gb, spec,
                                           epoch=epoch)
            if not np.all(np.isfinite(vals)):
                raise TrainingError(
                    f"train: non-finite loss at epoch {epoch}, "
                    f"batch starting {start} ({model.kind})")
            loss_sum += float(vals.sum())
            inv_b = 1.0 / len(idxs)
            for o, gr in zip(outs, grads):
                o.g = (gr * inv_b).astype(model.dtype)
            tape.backward()
            for p in params:
                adam_step(p, lr, t=t_step)
            t_step += 1
            model.zero_grads()
        train_iou = _clean_iou(model, eval_items, cfg.batch_size)
        report = evaluate(model, test_samples, cfg.batch_size)
        rows.append(EpochRow(epoch=epoch, lr=lr, q=q_at(spec, epoch),
                             loss=loss_sum / n, train_iou=train_iou,
                             test=report))
    return RunRecord(rows=rows)


def _clean_iou(model, items, batch_size: int) -> float:
    boxes = [it.box for it in items] if model.kind == "anet" else None
    probs = predict_probs(model, [it.image for it in items], boxes, batch_size)
    return float(np.mean([iou_score(p, it.gt) for p, it in zip(probs, items)]))


# -------------------------------------------------------------- operations


def _load_split(cfg: ExperimentConfig, dataset=None):
    manifest, samples = dataset if dataset is not None else load_dataset(cfg.data_dir)
    if "d_m" not in manifest.splits or "d_n" not in manifest.splits:
        manifest = split_dataset(manifest, cfg.frac_m, cfg.seed)
    return manifest, samples


def train_anet(cfg: ExperimentConfig, dataset=None):
    """Train the box-prompted auxiliary network on D_m.

    Returns (model, RunRecord).  Uses a fixed q=2 loss: D_m labels are
    clean, so the correction schedule has nothing to correct.
    """
    manifest, samples = _load_split(cfg, dataset)
    items = [_item_from_sample(samples[sid], samples[sid].gt,
                               from_dn=False, with_box=True)
             for sid in manifest.ids("d_m")]
    test_samples = [samples[sid] for sid in manifest.ids("test")]
    model = CamoNet("anet", seed=cfg.seed, dtype=_TRAIN_DTYPE)
    record = _train_loop(model, cfg, items, _ANET_LOSS, test_samples,
                         items, _S_ORDER_A, _S_AUG_A)
    return model, record


def generate_pseudo_labels(model, manifest: DatasetManifest, samples: dict,
                           batch_size: int = 8) -> list:
    """Soft pseudo masks for every D_n sample, in sorted-id order.

    Masks are sigmoid(p1) quantized to the 8-bit grid so that what trains
    in memory equals what a reload from disk would train on.  fp/fn rates
    against the clean gt are recorded for diagnosis only.
    """
    if model.kind != "anet":
        raise ConfigError(f"generate_pseudo_labels: model kind {model.kind!r}")
    ids = manifest.ids("d_n")
    sams = [samples[sid] for sid in ids]
    for s in sams:
        if s.box is None:
            raise DataError(f"generate_pseudo_labels: sample {s.id!r} has no box")
    probs = predict_probs(model, [s.image for s in sams],
                          [s.box for s in sams], batch_size)
    labels = []
    for s, p in zip(sams, probs):
        mask = np.round(p * 255.0) / 255.0
        _, fp, fn = disagreement_rate(mask[0] > 0.5, s.gt[0] > 0.5)
        labels.append(PseudoLabel(sample_id=s.id, mask=mask, source="anet",
                                  fp_rate=fp, fn_rate=fn))
    return labels


def inject_pseudo_labels(cfg: ExperimentConfig, manifest: DatasetManifest,
                         samples: dict) -> list:
    """Controlled-noise stand-in for the ANet path (noise_override mode)."""
    rho = cfg.noise_override
    labels = []
    for idx, sid in enumerate(manifest.ids("d_n")):
        seed = int(make_rng(cfg.seed, _S_INJECT, idx).integers(0, 2 ** 63))
        lab = inject_noise(samples[sid].gt, rho, seed)
        lab.sample_id = sid
        labels.append(lab)
    return labels


def train_pnet(cfg: ExperimentConfig, dt, dataset=None):
    """Train the image-only primary network on assembled D_t.

    q follows cfg's loss schedule with the run-level switch epoch; the
    logged train_iou is clean-gt IoU over the pseudo-labeled subset only,
    which is what exposes memorization of label noise.
    """
    if not dt:
        raise DataError("train_pnet: empty D_t")
    manifest, samples = _load_split(cfg, dataset)
    test_samples = [samples[sid] for sid in manifest.ids("test")]
    model = CamoNet("pnet", seed=cfg.seed, dtype=_TRAIN_DTYPE)
    eval_items = [it for it in dt if it.from_dn] or list(dt)
    record = _train_loop(model, cfg, dt, cfg.resolved_loss(), test_samples,
                         eval_items, _S_ORDER_P, _S_AUG_P)
    return model, record


def write_pseudo_dir(labels, out_dir) -> Path:
    """One 8-bit PGM per label plus an index of sources and error rates."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {}
    for lab in labels:
        fname = f"{lab.sample_id}.pgm"
        write_pgm(out / fname, lab.mask)
        index[lab.sample_id] = {"file": fname, "source": lab.source,
                                "fp_rate": lab.fp_rate, "fn_rate": lab.fn_rate}
    (out / "index.json").write_text(
        json.dumps(index, indent=2, sort_keys=True) + "\n")
    return out


def read_pseudo_dir(pseudo_dir) -> list:
    """Inverse of write_pseudo_dir, in sorted-id order."""
    from .data import read_pgm

    root = Path(pseudo_dir)
    index_path = root / "index.json"
    if not index_path.is_file():
        raise DataError(f"read_pseudo_dir: no index.json under {root}")
    index = json.loads(index_path.read_text())
    labels = []
    for sid in sorted(index):
        entry = index[sid]
        fpath = root / entry["file"]
        if not fpath.is_file():
            raise DataError(f"read_pseudo_dir: {sid!r} is missing {entry['file']}")
        labels.append(PseudoLabel(sample_id=sid, mask=read_pgm(fpath),
                                  source=entry["source"],
                                  fp_rate=entry["fp_rate"],
                                  fn_rate=entry["fn_rate"]))
    return labels


def run_wsscod(cfg: ExperimentConfig, run_dir) -> dict:
    """The whole protocol under one run directory.

    split -> train_anet -> pseudo labels -> assemble D_t -> train_pnet ->
    evaluate.  With cfg.noise_override set, the ANet stage is skipped and
    D_n gets synthetic corruption at the requested rate instead.

    Writes config.json, pseudo/, epochs.csv (PNet curve), summary.json,
    pnet.ckpt, and, when an ANet was trained, anet.ckpt + anet_epochs.csv.
    Never touches the input dataset directory.
    """
    from .model import save_checkpoint

    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(
        json.dumps(cfg.to_json_dict(), indent=2, sort_keys=True) + "\n")

    manifest, samples = _load_split(cfg)
    anet_record = None
    if cfg.noise_override is None:
        anet, anet_record = train_anet(cfg, dataset=(manifest, samples))
        anet_record.checkpoint = run / "anet.ckpt"
        save_checkpoint(anet, anet_record.checkpoint)
        (run / "anet_epochs.csv").write_text(anet_record.to_csv())
        labels = generate_pseudo_labels(anet, manifest, samples,
                                        cfg.batch_size)
    else:
        labels = inject_pseudo_labels(cfg, manifest, samples)
    write_pseudo_dir(labels, run / "pseudo")

    dt = assemble_dt(manifest, samples, {lab.sample_id: lab for lab in labels})
    pnet, record = train_pnet(cfg, dt, dataset=(manifest, samples))
    record.checkpoint = run / "pnet.ckpt"
    save_checkpoint(pnet, record.checkpoint)
    (run / "epochs.csv").write_text(record.to_csv())

    final = record.final()
    best = max(record.rows, key=lambda r: r.test.iou)
    summary = {
        "config": cfg.to_json_dict(),
        "final": {"epoch": final.epoch, "loss": final.loss,
                  "train_iou": final.train_iou,
                  "test": final.test.to_json_dict()},
        "best_test_iou": best.test.iou, "best_epoch": best.epoch,
        "pseudo": {
            "n": len(labels),
            "source": labels[0].source if labels else None,
            "mean_fp_rate": float(np.mean([l.fp_rate for l in labels])),
            "mean_fn_rate": float(np.mean([l.fn_rate for l in labels])),
        },
        "anet": None if anet_record is None else {
            "final_train_iou": anet_record.final().train_iou,
            "final_test_iou": anet_record.final().test.iou,
        },
        "artifacts": {
            "pnet_ckpt": "pnet.ckpt", "epochs_csv": "epochs.csv",
            "pseudo_dir": "pseudo",
            "anet_ckpt": "anet.ckpt" if anet_record is not None else None,
        },
    }
    (run / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {"run_dir": run, "pnet": pnet, "record": record,
            "anet_record": anet_record, "summary": summary}
