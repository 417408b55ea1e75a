"""Result persistence and plot rendering.

results.json carries everything needed to reproduce the report: the config
echo, per-seed accuracy matrices, per-task outcomes, and the aggregates.
It deliberately contains no timestamps or durations (those live in the
run_meta.json sidecar), so a rerun of the same config writes the same
bytes. Plots are standalone SVG files built without any plotting library.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import ValidationError
from .experiment import ResultsBundle
from .metrics import bwt as bwt_metric
from .metrics import acc as acc_metric
from .metrics import mean_std
from .version import __version__

PLOT_FILES = ("accuracy.svg", "eta.svg", "lambda.svg", "memory.svg")

_WIDTH, _HEIGHT = 640, 400
_LEFT, _RIGHT, _TOP, _BOTTOM = 70, 150, 40, 50
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


# ----------------------------------------------------------------------
# JSON persistence

def bundle_to_doc(bundle: ResultsBundle) -> dict:
    """The JSON document form of a results bundle."""
    per_seed = []
    for result in bundle.per_seed:
        outcomes = [
            {
                "task": o.task_id,
                "eta": o.config.eta,
                "lambda": o.config.lam,
                "m": o.config.m,
                "objective": o.objective,
                "accuracy_row": list(o.accuracy_row),
                "memory_total": o.memory_total,
            }
            for o in result.outcomes
        ]
        per_seed.append(
            {
                "seed": result.seed,
                "acc": result.acc,
                "bwt": result.bwt,
                "accuracy_matrix": [list(row) for row in result.matrix],
                "outcomes": outcomes,
            }
        )
    return {
        "engine_version": __version__,
        "config": bundle.config.to_dict(),
        "aggregates": bundle.aggregates(),
        "per_seed": per_seed,
    }


def _dump(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_results(bundle: ResultsBundle, out_dir: str | Path) -> dict:
    """Write results.json plus one results.json per seed directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = bundle_to_doc(bundle)
    (out / "results.json").write_text(_dump(doc), encoding="utf-8")
    for entry in doc["per_seed"]:
        seed_dir = out / f"seed_{entry['seed']}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        (seed_dir / "results.json").write_text(_dump(entry), encoding="utf-8")
    return doc


def read_results(out_dir: str | Path) -> dict:
    """Load and sanity-check a previously written results.json."""
    path = Path(out_dir) / "results.json"
    with open(path, encoding="utf-8") as handle:
        doc = json.load(handle)
    for key in ("engine_version", "config", "aggregates", "per_seed"):
        if key not in doc:
            raise ValidationError(f"{path} is missing the {key!r} entry")
    if not doc["per_seed"]:
        raise ValidationError(f"{path} has no per-seed results")
    return doc


def regenerate_report(out_dir: str | Path) -> dict:
    """Recompute aggregates from stored matrices and re-render the plots.

    Per-seed summary numbers are recomputed from the accuracy matrices, so
    a hand-edited or truncated results.json is restored to consistency.
    """
    out = Path(out_dir)
    doc = read_results(out)
    for entry in doc["per_seed"]:
        matrix = entry["accuracy_matrix"]
        entry["acc"] = acc_metric(matrix)
        entry["bwt"] = None if len(matrix) < 2 else bwt_metric(matrix)
    acc_mean, acc_std = mean_std([e["acc"] for e in doc["per_seed"]])
    doc["aggregates"] = {"acc": {"mean": acc_mean, "std": acc_std}}
    bwts = [e["bwt"] for e in doc["per_seed"]]
    if all(b is None for b in bwts):
        doc["aggregates"]["bwt"] = None
    else:
        bwt_mean, bwt_std = mean_std(bwts)
        doc["aggregates"]["bwt"] = {"mean": bwt_mean, "std": bwt_std}
    (out / "results.json").write_text(_dump(doc), encoding="utf-8")
    for entry in doc["per_seed"]:
        seed_dir = out / f"seed_{entry['seed']}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        (seed_dir / "results.json").write_text(_dump(entry), encoding="utf-8")
    render_plots(doc, out)
    return doc


# ----------------------------------------------------------------------
# SVG plots

def render_plots(bundle_or_doc, out_dir: str | Path) -> list[Path]:
    """Render the accuracy curve and the per-task hyperparameter plots.

    Accepts a ResultsBundle or an already-serialized results document.
    Returns the written file paths.
    """
    doc = (
        bundle_to_doc(bundle_or_doc)
        if isinstance(bundle_or_doc, ResultsBundle)
        else bundle_or_doc
    )
    plots = Path(out_dir) / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    per_seed = doc["per_seed"]
    n_tasks = len(per_seed[0]["accuracy_matrix"])
    xs = list(range(1, n_tasks + 1))

    mean_curve = []
    for t in range(n_tasks):
        rows = [entry["accuracy_matrix"][t] for entry in per_seed]
        mean_curve.append(sum(sum(row) / len(row) for row in rows) / len(rows))
    written = [
        _line_plot(
            plots / "accuracy.svg",
            title="Accuracy over seen tasks after each task",
            xlabel="task",
            ylabel="accuracy (%)",
            series=[("mean over seeds", list(zip(xs, mean_curve)))],
            y_bounds=(0.0, 100.0),
        )
    ]
    for name, key, log_y in (
        ("eta.svg", "eta", True),
        ("lambda.svg", "lambda", True),
        ("memory.svg", "m", False),
    ):
        series = []
        for entry in per_seed:
            points = [
                (o["task"], o[key])
                for o in entry["outcomes"]
                if not (log_y and o[key] <= 0)
            ]
            if points:
                series.append((f"seed {entry['seed']}", points))
        written.append(
            _line_plot(
                plots / name,
                title=f"Chosen {key} per task",
                xlabel="task",
                ylabel=key,
                series=series,
                log_y=log_y,
                step=True,
            )
        )
    return written


def _line_plot(path, title, xlabel, ylabel, series, y_bounds=None, log_y=False, step=False):
    """Write one SVG line/step plot; returns the path."""
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<text x="{_WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15" '
        f'font-family="sans-serif">{escape(title)}</text>',
    ]
    plot_w = _WIDTH - _LEFT - _RIGHT
    plot_h = _HEIGHT - _TOP - _BOTTOM

    xs = [x for _, points in series for x, _ in points]
    ys = [y for _, points in series for _, y in points]
    if not xs:
        parts.append(
            f'<text x="{_WIDTH / 2:.1f}" y="{_HEIGHT / 2:.1f}" text-anchor="middle" '
            f'font-size="13" font-family="sans-serif">no data</text></svg>'
        )
        path.write_text("\n".join(parts) + "\n", encoding="utf-8")
        return path

    x_lo, x_hi = min(xs), max(xs)
    if x_lo == x_hi:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if y_bounds is not None:
        y_lo, y_hi = y_bounds
    else:
        y_lo, y_hi = min(ys), max(ys)
    if log_y:
        y_lo, y_hi = math.log10(y_lo), math.log10(y_hi)
    if y_hi - y_lo < 1e-12:
        y_lo, y_hi = y_lo - 1.0, y_hi + 1.0
    pad = 0.05 * (y_hi - y_lo) if y_bounds is None else 0.0
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(x):
        return _LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y):
        v = math.log10(y) if log_y else y
        return _TOP + plot_h - (v - y_lo) / (y_hi - y_lo) * plot_h

    # frame and ticks
    parts.append(
        f'<rect x="{_LEFT}" y="{_TOP}" width="{plot_w}" height="{plot_h}" '
        f'fill="none" stroke="#888" stroke-width="1"/>'
    )
    for x in sorted(set(int(round(x)) for x in xs)):
        px = sx(x)
        parts.append(
            f'<line x1="{px:.2f}" y1="{_TOP + plot_h}" x2="{px:.2f}" '
            f'y2="{_TOP + plot_h + 5}" stroke="#555"/>'
        )
        parts.append(
            f'<text x="{px:.2f}" y="{_TOP + plot_h + 20}" text-anchor="middle" '
            f'font-size="11" font-family="sans-serif">{x}</text>'
        )
    for value, label in _y_ticks(y_lo, y_hi, log_y):
        py = _TOP + plot_h - (value - y_lo) / (y_hi - y_lo) * plot_h
        parts.append(
            f'<line x1="{_LEFT - 5}" y1="{py:.2f}" x2="{_LEFT}" y2="{py:.2f}" stroke="#555"/>'
        )
        parts.append(
            f'<text x="{_LEFT - 9}" y="{py + 4:.2f}" text-anchor="end" '
            f'font-size="11" font-family="sans-serif">{escape(label)}</text>'
        )
    parts.append(
        f'<text x="{_LEFT + plot_w / 2:.1f}" y="{_HEIGHT - 12}" text-anchor="middle" '
        f'font-size="12" font-family="sans-serif">{escape(xlabel)}</text>'
    )
    parts.append(
        f'<text x="18" y="{_TOP + plot_h / 2:.1f}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 18 {_TOP + plot_h / 2:.1f})">'
        f"{escape(ylabel)}</text>"
    )

    for i, (label, points) in enumerate(series):
        color = _COLORS[i % len(_COLORS)]
        pts = sorted(points)
        coords = []
        for j, (x, y) in enumerate(pts):
            if step and j > 0:
                coords.append((sx(x), sy(pts[j - 1][1])))
            coords.append((sx(x), sy(y)))
        if len(coords) > 1:
            joined = " ".join(f"{cx:.2f},{cy:.2f}" for cx, cy in coords)
            parts.append(
                f'<polyline points="{joined}" fill="none" stroke="{color}" stroke-width="1.8"/>'
            )
        for x, y in pts:
            parts.append(
                f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.6" fill="{color}"/>'
            )
        ly = _TOP + 14 + 16 * i
        lx = _WIDTH - _RIGHT + 12
        parts.append(
            f'<rect x="{lx}" y="{ly - 9}" width="10" height="10" fill="{color}"/>'
        )
        parts.append(
            f'<text x="{lx + 15}" y="{ly}" font-size="11" '
            f'font-family="sans-serif">{escape(label)}</text>'
        )
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")
    return path


def _y_ticks(lo: float, hi: float, log_y: bool) -> list[tuple[float, str]]:
    """Tick positions (in plot units) and labels between lo and hi."""
    if log_y:
        ticks = []
        for exp in range(math.floor(lo), math.ceil(hi) + 1):
            if lo <= exp <= hi:
                ticks.append((float(exp), f"1e{exp:d}"))
        if len(ticks) >= 2:
            return ticks
        # fewer than two decades visible: fall back to linear ticks in log space
        return [(v, f"{10 ** v:.3g}") for v in _nice_ticks(lo, hi)]
    return [(v, f"{v:.6g}") for v in _nice_ticks(lo, hi)]


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    raw = (hi - lo) / max(count - 1, 1)
    magnitude = 10 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        step = mult * magnitude
        if step >= raw:
            break
    first = math.ceil(lo / step) * step
    ticks = []
    value = first
    while value <= hi + 1e-9 * step:
        ticks.append(round(value, 12))
        value += step
    return ticks
