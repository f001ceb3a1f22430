"""SVG training-curve rendering, a pure function of epochs.csv.

Dependency-free vector output keeps the artifacts diffable: the same CSV
always produces byte-identical files.  One plot per recorded column, plus
a combined IoU view annotated with the q schedule and its switch point.
"""

from pathlib import Path

from .errors import DataError
from .pipeline import parse_epochs_csv

# column -> plot title
_METRICS = {
    "loss": "training loss",
    "train_iou": "clean-gt IoU, pseudo-labeled subset",
    "test_mae": "test MAE",
    "test_e": "test E-measure",
    "test_f": "test F-measure",
    "test_s": "test S-measure",
    "test_iou": "test IoU",
}

_W, _H = 640, 400
_ML, _MR, _MT, _MB = 62, 18, 42, 46  # margins: left, right, top, bottom
_PW = _W - _ML - _MR
_PH = _H - _MT - _MB


def _x_of(epoch, e0, e1):
    span = (e1 - e0) or 1
    return _ML + _PW * (epoch - e0) / span


def _y_of(v, lo, hi):
    span = (hi - lo) or 1.0
    return _MT + _PH * (1.0 - (v - lo) / span)


def _fmt(v) -> str:
    return f"{v:.2f}"


def _points(epochs, values, lo, hi) -> str:
    e0, e1 = epochs[0], epochs[-1]
    return " ".join(f"{_fmt(_x_of(e, e0, e1))},{_fmt(_y_of(v, lo, hi))}"
                    for e, v in zip(epochs, values))


def _frame(title, e0, e1, lo, hi) -> list:
    x0, x1 = _ML, _ML + _PW
    y0, y1 = _MT, _MT + _PH
    return [
        f'<text x="{_ML}" y="24" font-size="15" font-family="monospace">{title}</text>',
        f'<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="#444"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="#444"/>',
        f'<text x="{x0}" y="{y1 + 18}" font-size="11" font-family="monospace">{e0}</text>',
        f'<text x="{x1 - 8}" y="{y1 + 18}" font-size="11" font-family="monospace" text-anchor="end">{e1}</text>',
        f'<text x="{_W // 2}" y="{y1 + 34}" font-size="11" font-family="monospace" text-anchor="middle">epoch</text>',
        f'<text x="{x0 - 6}" y="{y1 + 4}" font-size="11" font-family="monospace" text-anchor="end">{lo:.4g}</text>',
        f'<text x="{x0 - 6}" y="{y0 + 4}" font-size="11" font-family="monospace" text-anchor="end">{hi:.4g}</text>',
    ]


def _document(body) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" '
            f'height="{_H}" viewBox="0 0 {_W} {_H}">\n'
            f'<rect width="{_W}" height="{_H}" fill="white"/>\n')
    return head + "\n".join(body) + "\n</svg>\n"


def _metric_svg(rows, column, title) -> str:
    epochs = [r["epoch"] for r in rows]
    values = [r[column] for r in rows]
    lo, hi = min(values), max(values)
    body = _frame(title, epochs[0], epochs[-1], lo, hi)
    body.append(f'<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" '
                f'points="{_points(epochs, values, lo, hi)}"/>')
    return _document(body)


def _switch_epoch(rows):
    """Epoch of the first q change, or None for a constant schedule."""
    for prev, cur in zip(rows, rows[1:]):
        if cur["q"] != prev["q"]:
            return cur["epoch"]
    return None


def _combined_svg(rows) -> str:
    epochs = [r["epoch"] for r in rows]
    e0, e1 = epochs[0], epochs[-1]
    lo, hi = 0.0, 1.0  # IoU axis is absolute so runs can be compared
    body = _frame("IoU over training", e0, e1, lo, hi)
    for column, color, label, ly in (
            ("train_iou", "#1f77b4", "train (clean gt)", 34),
            ("test_iou", "#d62728", "test", 50)):
        values = [r[column] for r in rows]
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                    f'points="{_points(epochs, values, lo, hi)}"/>')
        body.append(f'<text x="{_ML + _PW - 4}" y="{_MT + ly}" font-size="11" '
                    f'font-family="monospace" text-anchor="end" fill="{color}">'
                    f'{label}</text>')
    switch = _switch_epoch(rows)
    if switch is None:
        body.append(f'<text x="{_ML + 8}" y="{_MT + 16}" font-size="12" '
                    f'font-family="monospace">q={rows[0]["q"]:g}</text>')
    else:
        x = _fmt(_x_of(switch, e0, e1))
        body.append(f'<line class="switch" x1="{x}" y1="{_MT}" x2="{x}" '
                    f'y2="{_MT + _PH}" stroke="#888" stroke-dasharray="5,4"/>')
        xl = _fmt((_ML + _x_of(switch, e0, e1)) / 2.0)
        xr = _fmt((_x_of(switch, e0, e1) + _ML + _PW) / 2.0)
        body.append(f'<text x="{xl}" y="{_MT + 16}" font-size="12" '
                    f'font-family="monospace" text-anchor="middle">'
                    f'q={rows[0]["q"]:g}</text>')
        body.append(f'<text x="{xr}" y="{_MT + 16}" font-size="12" '
                    f'font-family="monospace" text-anchor="middle">'
                    f'q={rows[-1]["q"]:g}</text>')
    return _document(body)


def emit_curves(run_dir) -> list:
    """Render every metric of run_dir/epochs.csv to SVG; returns the paths."""
    run = Path(run_dir)
    csv_path = run / "epochs.csv"
    if not csv_path.is_file():
        raise DataError(f"emit_curves: no epochs.csv under {run}")
    rows = parse_epochs_csv(csv_path.read_text())
    if not rows:
        raise DataError("emit_curves: epochs.csv has no rows")
    written = []
    for column, title in _METRICS.items():
        path = run / f"{column}.svg"
        path.write_text(_metric_svg(rows, column, title))
        written.append(path)
    path = run / "iou_curves.svg"
    path.write_text(_combined_svg(rows))
    written.append(path)
    return written
