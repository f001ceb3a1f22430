"""Command line surface.

Verbs: gen-data, train-anet, pseudo-label, train-pnet, eval, run,
diagnose-loss.  Exit codes: 0 success, 1 bad arguments or inputs, 2
failure at runtime.  Results go to files or stdout; everything else
goes to stderr.
"""

import json
import os
import sys

# Worker budget must land in the environment before numpy loads its BLAS.
_threads = os.environ.get("NSL_THREADS", "").strip()
if _threads:
    os.environ["OPENBLAS_NUM_THREADS"] = _threads
    os.environ["OMP_NUM_THREADS"] = _threads

import argparse
from pathlib import Path

from .errors import ConfigError, DataError, NslError


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse, but flag mistakes map to exit code 1 instead of 2."""

    def error(self, message):
        raise _ArgumentError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="nsl", description=__doc__.strip().split("\n")[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def add(verb, help_text):
        sp = sub.add_parser(verb, help=help_text)
        sp.add_argument("--json", action="store_true",
                        help="machine-readable result on stdout")
        return sp

    def cfg_flags(sp, with_run_flags=True):
        sp.add_argument("--preset", choices=["F1", "F5", "F10", "F20"],
                        help="bundled (frac_m, switch_epoch)")
        sp.add_argument("--frac-m", type=float, dest="frac_m",
                        help="fully labeled fraction of the train split")
        sp.add_argument("--seed", type=int, default=2024)
        sp.add_argument("--epochs", type=int, default=100)
        if with_run_flags:
            sp.add_argument("--switch-epoch", type=int, dest="switch_epoch",
                            help="epoch at which q drops from q_early to q_late")
            sp.add_argument("--noise-rho", type=float, dest="noise_rho",
                            help="bypass the auxiliary net; corrupt D_n labels "
                                 "at this rate instead")
            sp.add_argument("--loss", choices=["nc", "ce", "iou", "mae", "gce"],
                            default="nc")
            sp.add_argument("--grad-mode", choices=["exact", "detached"],
                            dest="grad_mode", default="exact")

    sp = add("gen-data", "synthesize a camouflage dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, required=True,
                    help="number of training samples (test adds 25%%)")
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=2024)
    sp.add_argument("--difficulty", type=float, default=0.55)

    sp = add("train-anet", "train the box-prompted auxiliary net on D_m")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    cfg_flags(sp)

    sp = add("pseudo-label", "label D_n with a trained auxiliary net")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True, help="auxiliary net checkpoint")
    sp.add_argument("--out", required=True)
    cfg_flags(sp, with_run_flags=False)

    sp = add("train-pnet", "train the primary net on D_m plus pseudo labels")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--pseudo", help="directory written by pseudo-label")
    cfg_flags(sp)

    sp = add("eval", "evaluate a checkpoint on the test split")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", help="also write metrics.csv/metrics.json here")

    sp = add("run", "the whole protocol into one run directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--curves", action="store_true",
                    help="render SVG curves after the run")
    cfg_flags(sp)

    sp = add("diagnose-loss", "per-pixel gradient magnitudes on a toy grid")
    sp.add_argument("--q", type=float, default=1.0)
    sp.add_argument("--mode", "--grad-mode", choices=["exact", "detached"],
                    dest="mode", default="exact")
    sp.add_argument("--grid", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    return p


def _grad_mode(name: str) -> str:
    return "detached_denominator" if name == "detached" else "exact"


def _build_config(args):
    from .losses import LossSpec
    from .pipeline import PRESETS, ExperimentConfig

    if args.preset is not None:
        frac_m, switch = PRESETS[args.preset]
    else:
        if args.frac_m is None:
            raise ConfigError("need --preset or --frac-m")
        frac_m, switch = args.frac_m, 0
    if args.frac_m is not None:
        frac_m = args.frac_m
    if getattr(args, "switch_epoch", None) is not None:
        switch = args.switch_epoch
    loss = LossSpec(kind=getattr(args, "loss", "nc"),
                    grad_mode=_grad_mode(getattr(args, "grad_mode", "exact")))
    return ExperimentConfig(
        data_dir=args.data, frac_m=frac_m, switch_epoch=switch,
        epochs=args.epochs, loss=loss, seed=args.seed,
        noise_override=getattr(args, "noise_rho", None))


def _emit(args, payload: dict, default_line: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(default_line)


def _cmd_gen_data(args) -> int:
    from .data import generate_dataset

    path = generate_dataset(args.out, count=args.count, size=args.size,
                            seed=args.seed, difficulty=args.difficulty)
    _emit(args, {"manifest": str(path), "count": args.count,
                 "size": args.size, "seed": args.seed}, str(path))
    return 0


def _write_stage_dir(out, cfg, model, record, ckpt_name):
    from .model import save_checkpoint

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(cfg.to_json_dict(), indent=2, sort_keys=True) + "\n")
    record.checkpoint = out / ckpt_name
    save_checkpoint(model, record.checkpoint)
    (out / "epochs.csv").write_text(record.to_csv())
    return out


def _cmd_train_anet(args) -> int:
    from .pipeline import train_anet

    cfg = _build_config(args)
    model, record = train_anet(cfg)
    out = _write_stage_dir(args.out, cfg, model, record, "anet.ckpt")
    final = record.final()
    _emit(args, {"out": str(out), "final_train_iou": final.train_iou,
                 "final_test": final.test.to_json_dict()}, str(out))
    return 0


def _cmd_pseudo_label(args) -> int:
    from .data import load_dataset, split_dataset
    from .model import load_checkpoint
    from .pipeline import generate_pseudo_labels, write_pseudo_dir

    cfg = _build_config(args)
    model = load_checkpoint(args.ckpt)
    manifest, samples = load_dataset(cfg.data_dir)
    manifest = split_dataset(manifest, cfg.frac_m, cfg.seed)
    labels = generate_pseudo_labels(model, manifest, samples)
    out = write_pseudo_dir(labels, args.out)
    stats = {"out": str(out), "n": len(labels),
             "mean_fp_rate": sum(l.fp_rate for l in labels) / len(labels),
             "mean_fn_rate": sum(l.fn_rate for l in labels) / len(labels)}
    _emit(args, stats, str(out))
    return 0


def _cmd_train_pnet(args) -> int:
    from .data import load_dataset, split_dataset
    from .pipeline import (assemble_dt, inject_pseudo_labels, read_pseudo_dir,
                           train_pnet)

    if (args.pseudo is None) == (args.noise_rho is None):
        raise ConfigError("need exactly one of --pseudo or --noise-rho")
    cfg = _build_config(args)
    manifest, samples = load_dataset(cfg.data_dir)
    manifest = split_dataset(manifest, cfg.frac_m, cfg.seed)
    if args.pseudo is not None:
        labels = read_pseudo_dir(args.pseudo)
    else:
        labels = inject_pseudo_labels(cfg, manifest, samples)
    dt = assemble_dt(manifest, samples, {l.sample_id: l for l in labels})
    model, record = train_pnet(cfg, dt, dataset=(manifest, samples))
    out = _write_stage_dir(args.out, cfg, model, record, "pnet.ckpt")
    final = record.final()
    _emit(args, {"out": str(out), "final_train_iou": final.train_iou,
                 "final_test": final.test.to_json_dict()}, str(out))
    return 0


def _cmd_eval(args) -> int:
    from .data import load_dataset
    from .metrics import MetricReport
    from .model import load_checkpoint
    from .pipeline import evaluate

    model = load_checkpoint(args.ckpt)
    manifest, samples = load_dataset(args.data)
    test = [samples[sid] for sid in manifest.ids("test")]
    csv_path = json_path = None
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / "metrics.csv", out / "metrics.json"
    report = evaluate(model, test, csv_path=csv_path, json_path=json_path)
    if args.json:
        print(json.dumps(report.to_json_dict(), indent=2, sort_keys=True))
    else:
        print(MetricReport.CSV_HEADER)
        print(report.to_csv_row())
    return 0


def _cmd_run(args) -> int:
    from .pipeline import run_wsscod

    cfg = _build_config(args)
    out = run_wsscod(cfg, args.out)
    if args.curves:
        from .curves import emit_curves

        emit_curves(out["run_dir"])
    _emit(args, out["summary"], str(out["run_dir"]))
    return 0


def _cmd_diagnose_loss(args) -> int:
    import numpy as np

    from .losses import nc_grad

    if args.grid < 1:
        raise ConfigError(f"diagnose-loss: grid must be >= 1, got {args.grid}")
    rng = np.random.default_rng(args.seed)
    p = rng.uniform(0.05, 0.95, size=(args.grid, args.grid))
    g = (rng.uniform(size=(args.grid, args.grid)) > 0.5).astype(np.float64)
    mags = np.abs(nc_grad(p, g, args.q, _grad_mode(args.mode)))
    if args.json:
        print(json.dumps({"q": args.q, "mode": args.mode, "grid": args.grid,
                          "magnitudes": mags.tolist()}, indent=2,
                         sort_keys=True))
    else:
        for row in mags:
            print(" ".join(repr(float(v)) for v in row))
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-anet": _cmd_train_anet,
    "pseudo-label": _cmd_pseudo_label,
    "train-pnet": _cmd_train_pnet,
    "eval": _cmd_eval,
    "run": _cmd_run,
    "diagnose-loss": _cmd_diagnose_loss,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.verb](args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NslError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
