"""CSV/JSON result logs and standalone SVG figures.

SVG is written by hand so output bytes depend only on the input numbers:
no timestamps, ids or font metrics leak in. Coordinates are printed with two
decimals.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from . import harness
from . import infoplane as ip

RUNS_CSV = "runs.csv"
RUNS_BINNED_CSV = "runs_binned.csv"
AGGREGATE_CSV = "aggregate.csv"
METADATA_JSON = "metadata.json"
RUN_COLUMNS = ["run_id", "epoch", "layer_index", "i_xt_bits", "i_ty_bits", "train_acc", "test_acc", "loss"]
AGG_COLUMNS = [
    "epoch", "layer_index", "mean_i_xt_bits", "var_i_xt", "mean_i_ty_bits", "var_i_ty",
    "train_acc_mean", "train_acc_ci95", "test_acc_mean", "test_acc_ci95",
]

# viridis anchor colours, sampled at 0, .25, .5, .75, 1
_GRADIENT = [(68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37)]
_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


# ---------------------------------------------------------------------------
# logs


def _num(v) -> str:
    return repr(float(v))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _write_runs(path, trajectories, binned=False):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for t in trajectories:
            xt = t.binned_i_xt if binned else t.i_xt
            ty = t.binned_i_ty if binned else t.i_ty
            for k, e in enumerate(t.epochs):
                for j in range(xt.shape[1]):
                    w.writerow([t.run_id, int(e), j, _num(xt[k, j]), _num(ty[k, j]),
                                _num(t.train_acc[k]), _num(t.test_acc[k]), _num(t.loss[k])])


def write_logs(artifacts, directory) -> list[str]:
    """Per-repetition CSV, aggregate CSV and a JSON metadata document."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    runs = os.path.join(directory, RUNS_CSV)
    _write_runs(runs, artifacts.trajectories)
    paths.append(runs)
    if artifacts.trajectories[0].binned_i_xt is not None:
        p = os.path.join(directory, RUNS_BINNED_CSV)
        _write_runs(p, artifacts.trajectories, binned=True)
        paths.append(p)

    agg, acc = artifacts.aggregate, artifacts.accuracy
    p = os.path.join(directory, AGGREGATE_CSV)
    with open(p, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(AGG_COLUMNS)
        for k, e in enumerate(agg.epochs):
            for j in range(agg.mean_xt.shape[1]):
                w.writerow([int(e), j, _num(agg.mean_xt[k, j]), _num(agg.var_xt[k, j]),
                            _num(agg.mean_ty[k, j]), _num(agg.var_ty[k, j]),
                            _num(acc.train_mean[k]), _num(acc.train_ci[k]),
                            _num(acc.test_mean[k]), _num(acc.test_ci[k])])
    paths.append(p)

    meta = {
        "preset": artifacts.config.name,
        "master_seed": artifacts.config.master_seed,
        "config": artifacts.config.to_dict(),
        "retry_log": artifacts.retry_log,
        "median_deviating_run": agg.median_run,
        "run_l2_distances": agg.distances,
        "runs": [{"run_id": t.run_id, **t.metadata} for t in artifacts.trajectories],
        "metadata": artifacts.metadata,
    }
    p = os.path.join(directory, METADATA_JSON)
    with open(p, "w", newline="\n") as f:
        json.dump(_jsonable(meta), f, indent=2, sort_keys=True)
        f.write("\n")
    paths.append(p)
    return paths


def _read_runs(path):
    rows = {}
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            rows.setdefault(int(r["run_id"]), []).append(r)
    out = {}
    for run_id, rs in rows.items():
        epochs = sorted({int(r["epoch"]) for r in rs})
        layers = max(int(r["layer_index"]) for r in rs) + 1
        pos = {e: k for k, e in enumerate(epochs)}
        xt = np.zeros((len(epochs), layers))
        ty = np.zeros_like(xt)
        tr, te, lo = (np.zeros(len(epochs)) for _ in range(3))
        for r in rs:
            k, j = pos[int(r["epoch"])], int(r["layer_index"])
            xt[k, j], ty[k, j] = float(r["i_xt_bits"]), float(r["i_ty_bits"])
            tr[k], te[k], lo[k] = float(r["train_acc"]), float(r["test_acc"]), float(r["loss"])
        out[run_id] = (np.array(epochs), xt, ty, tr, te, lo)
    return out


def load_logs(directory) -> "harness.RunArtifacts":
    """Rebuild run artifacts from a directory written by :func:`write_logs`."""
    with open(os.path.join(directory, METADATA_JSON)) as f:
        meta = json.load(f)
    config = harness.ExperimentConfig.from_dict(meta["config"])
    run_meta = {r["run_id"]: {k: v for k, v in r.items() if k != "run_id"} for r in meta["runs"]}
    runs = _read_runs(os.path.join(directory, RUNS_CSV))
    binned_path = os.path.join(directory, RUNS_BINNED_CSV)
    binned = _read_runs(binned_path) if os.path.exists(binned_path) else None
    trajectories = []
    for run_id in sorted(runs):
        e, xt, ty, tr, te, lo = runs[run_id]
        t = ip.InfoTrajectory(run_id, e, xt, ty, tr, te, lo, run_meta.get(run_id, {}))
        if binned is not None:
            t.binned_i_xt, t.binned_i_ty = binned[run_id][1], binned[run_id][2]
        trajectories.append(t)
    return harness.assemble(config, trajectories, meta["retry_log"], meta.get("metadata"))


# ---------------------------------------------------------------------------
# SVG primitives


def epoch_color(frac: float) -> str:
    """Colour for a position in [0, 1] along the viridis-like gradient."""
    frac = min(max(frac, 0.0), 1.0) * (len(_GRADIENT) - 1)
    i = min(int(frac), len(_GRADIENT) - 2)
    t = frac - i
    c = [round(a + (b - a) * t) for a, b in zip(_GRADIENT[i], _GRADIENT[i + 1])]
    return "#%02x%02x%02x" % tuple(c)


def _f(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    span = hi - lo
    if span <= 0:
        return [lo]
    raw = span / n
    mag = 10 ** math.floor(math.log10(raw))
    step = next(s * mag for s in (1, 2, 2.5, 5, 10) if s * mag >= raw)
    first = math.ceil(lo / step - 1e-9) * step
    ticks = []
    v = first
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 10))
        v += step
    return ticks


class _Panel:
    def __init__(self, x0, y0, w, h, xr, yr):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.xr, self.yr = xr, yr

    def px(self, x):
        return self.x0 + (x - self.xr[0]) / (self.xr[1] - self.xr[0]) * self.w

    def py(self, y):
        return self.y0 + self.h - (y - self.yr[0]) / (self.yr[1] - self.yr[0]) * self.h

    def frame(self, title, xlabel, ylabel) -> list[str]:
        out = [f'<rect x="{_f(self.x0)}" y="{_f(self.y0)}" width="{_f(self.w)}" height="{_f(self.h)}" fill="none" stroke="#333" stroke-width="1"/>']
        for t in _nice_ticks(*self.xr):
            x = self.px(t)
            out.append(f'<line x1="{_f(x)}" y1="{_f(self.y0 + self.h)}" x2="{_f(x)}" y2="{_f(self.y0 + self.h + 4)}" stroke="#333"/>')
            out.append(f'<text x="{_f(x)}" y="{_f(self.y0 + self.h + 16)}" text-anchor="middle" font-size="10">{t:g}</text>')
        for t in _nice_ticks(*self.yr):
            y = self.py(t)
            out.append(f'<line x1="{_f(self.x0 - 4)}" y1="{_f(y)}" x2="{_f(self.x0)}" y2="{_f(y)}" stroke="#333"/>')
            out.append(f'<text x="{_f(self.x0 - 6)}" y="{_f(y + 3)}" text-anchor="end" font-size="10">{t:g}</text>')
        out.append(f'<text x="{_f(self.x0 + self.w / 2)}" y="{_f(self.y0 - 8)}" text-anchor="middle" font-size="12">{escape(title)}</text>')
        out.append(f'<text x="{_f(self.x0 + self.w / 2)}" y="{_f(self.y0 + self.h + 32)}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>')
        cx, cy = self.x0 - 34, self.y0 + self.h / 2
        out.append(f'<text x="{_f(cx)}" y="{_f(cy)}" text-anchor="middle" font-size="11" transform="rotate(-90 {_f(cx)} {_f(cy)})">{escape(ylabel)}</text>')
        return out


def _document(width, height, body: list[str]) -> str:
    head = (
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">\n'
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>\n'
    )
    return head + "\n".join(body) + "\n</svg>\n"


def _polyline(points, color, width=1.0, extra="") -> str:
    pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in points)
    return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{extra}/>'


def _band(panel, xs, lo, hi, color) -> str:
    top = [(panel.px(x), panel.py(y)) for x, y in zip(xs, hi)]
    bottom = [(panel.px(x), panel.py(y)) for x, y in zip(xs[::-1], lo[::-1])]
    pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in top + bottom)
    return f'<polygon points="{pts}" fill="{color}" fill-opacity="0.2" stroke="none"/>'


# ---------------------------------------------------------------------------
# figures


@dataclass(frozen=True)
class PlaneStyle:
    x_range: tuple = (0.0, 12.0)  # bits; default log2|D| of the synthetic set
    y_range: tuple = (0.0, 1.0)  # bits; default H(Y)
    zoom: tuple | None = None  # ((x0, x1), (y0, y1)) for an extra close-up panel
    marker_radius: float = 2.5
    title: str = "Information plane"

    def __post_init__(self):
        for lo, hi in [self.x_range, self.y_range] + (list(self.zoom) if self.zoom else []):
            if not (math.isfinite(lo) and math.isfinite(hi) and hi > lo):
                raise ValueError(f"axis range ({lo}, {hi}) must be finite and increasing")


def default_style(artifacts) -> PlaneStyle:
    n = artifacts.metadata.get("dataset_size")
    if n is None:
        n = 4096 if artifacts.config.dataset.get("kind") == "synthetic" else 70000
    k = int(artifacts.trajectories[0].i_xt.shape[1])
    classes = artifacts.config.network_spec().widths[k - 1]
    x_max = math.log2(n)
    y_max = math.log2(classes)
    return PlaneStyle((0.0, x_max), (0.0, y_max), ((0.8 * x_max, x_max), (0.5 * y_max, y_max)),
                      title=f"{artifacts.config.name}: mean information plane")


def _plane_panel(panel, traj, radius) -> list[str]:
    out = []
    e0, e1 = float(traj.epochs[0]), float(traj.epochs[-1])
    span = e1 - e0 if e1 > e0 else 1.0
    clip = f'plane{int(panel.x0)}'
    out.append(f'<clipPath id="{clip}"><rect x="{_f(panel.x0)}" y="{_f(panel.y0)}" width="{_f(panel.w)}" height="{_f(panel.h)}"/></clipPath>')
    out.append(f'<g clip-path="url(#{clip})">')
    for j in range(traj.num_layers):
        pts = [(panel.px(x), panel.py(y)) for x, y in zip(traj.i_xt[:, j], traj.i_ty[:, j])]
        if len(pts) > 1:
            out.append(_polyline(pts, "#bbbbbb", 0.6))
        for (x, y), e in zip(pts, traj.epochs):
            out.append(f'<circle class="marker" cx="{_f(x)}" cy="{_f(y)}" r="{radius}" fill="{epoch_color((e - e0) / span)}"/>')
        x, y = pts[-1]
        out.append(f'<text x="{_f(x + 4)}" y="{_f(y - 4)}" font-size="9" fill="#333">L{j + 1}</text>')
    out.append("</g>")
    return out


def _expand(rng, values):
    lo, hi = rng
    vmin, vmax = float(np.min(values)), float(np.max(values))
    if vmax > hi:
        hi = vmax + 0.02 * (vmax - lo)
    if vmin < lo:
        lo = vmin - 0.02 * (hi - vmin)
    return lo, hi


def plot_plane(traj: ip.InfoTrajectory, style: PlaneStyle | None = None) -> str:
    """Epoch-coloured information plane (plus optional zoom panel) as SVG."""
    if traj.epochs.size == 0 or traj.num_layers == 0:
        raise ValueError("empty trajectory")
    style = style or PlaneStyle()
    xr = _expand(style.x_range, traj.i_xt)
    yr = _expand(style.y_range, traj.i_ty)
    panels = [(_Panel(70, 40, 360, 300, xr, yr), style.title)]
    if style.zoom:
        panels.append((_Panel(520, 40, 360, 300, *style.zoom), "upper right area"))
    width = 960 if style.zoom else 520
    body = []
    for panel, title in panels:
        body += panel.frame(title, "I(X;T) [bits]", "I(T;Y) [bits]")
        body += _plane_panel(panel, traj, style.marker_radius)
    # epoch colour bar
    bx = width - 40
    body.append('<defs><linearGradient id="epochs" x1="0" y1="1" x2="0" y2="0">'
                + "".join(f'<stop offset="{i / (len(_GRADIENT) - 1):.2f}" stop-color="{epoch_color(i / (len(_GRADIENT) - 1))}"/>'
                          for i in range(len(_GRADIENT)))
                + "</linearGradient></defs>")
    body.append(f'<rect x="{bx}" y="40" width="12" height="300" fill="url(#epochs)" stroke="#333"/>')
    body.append(f'<text x="{bx + 6}" y="354" text-anchor="middle" font-size="9">{int(traj.epochs[0])}</text>')
    body.append(f'<text x="{bx + 6}" y="34" text-anchor="middle" font-size="9">{int(traj.epochs[-1])}</text>')
    body.append(f'<text x="{bx + 6}" y="372" text-anchor="middle" font-size="9">epoch</text>')
    return _document(width, 400, body)


def plot_curves(artifacts, kind: str = "accuracy") -> str:
    """Accuracy (mean with 95% CI band) or MI-vs-epoch (mean +- 1 sd) curves."""
    if not artifacts.trajectories or artifacts.aggregate.epochs.size == 0:
        raise ValueError("no data to plot")
    epochs = artifacts.aggregate.epochs.astype(np.float64)
    xr = (float(epochs[0]), float(epochs[-1]) if epochs[-1] > epochs[0] else float(epochs[0]) + 1.0)
    body = []
    if kind == "accuracy":
        acc = artifacts.accuracy
        panel = _Panel(70, 40, 480, 300, xr, (0.0, 1.0))
        body += panel.frame(f"{artifacts.config.name}: accuracy", "epoch", "accuracy")
        for name, mean, ci, color in (("train", acc.train_mean, acc.train_ci, _PALETTE[0]),
                                      ("test", acc.test_mean, acc.test_ci, _PALETTE[1])):
            body.append(_band(panel, epochs, mean - ci, mean + ci, color))
            body.append(_polyline([(panel.px(x), panel.py(y)) for x, y in zip(epochs, mean)], color, 1.5,
                                  f' class="{name}"'))
        for i, (name, color) in enumerate((("train", _PALETTE[0]), ("test", _PALETTE[1]))):
            y = 60 + 16 * i
            body.append(f'<line x1="570" y1="{y}" x2="590" y2="{y}" stroke="{color}" stroke-width="2"/>')
            body.append(f'<text x="596" y="{y + 4}" font-size="10">{name}</text>')
        return _document(660, 400, body)
    if kind != "mi_vs_epoch":
        raise ValueError(f"unknown curve kind {kind!r}")
    agg = artifacts.aggregate
    for p, (mean, var, label) in enumerate(((agg.mean_xt, agg.var_xt, "I(X;T) [bits]"),
                                            (agg.mean_ty, agg.var_ty, "I(T;Y) [bits]"))):
        sd = np.sqrt(var)
        yr = (0.0, max(float((mean + sd).max()) * 1.05, 1e-6))
        panel = _Panel(70 + 470 * p, 40, 380, 300, xr, yr)
        body += panel.frame(label.split(" ")[0] + " per layer", "epoch", label)
        for j in range(mean.shape[1]):
            color = _PALETTE[j % len(_PALETTE)]
            body.append(_band(panel, epochs, mean[:, j] - sd[:, j], mean[:, j] + sd[:, j], color))
            body.append(_polyline([(panel.px(x), panel.py(y)) for x, y in zip(epochs, mean[:, j])], color, 1.2))
    for j in range(agg.mean_xt.shape[1]):
        y = 60 + 14 * j
        color = _PALETTE[j % len(_PALETTE)]
        body.append(f'<line x1="930" y1="{y}" x2="950" y2="{y}" stroke="{color}" stroke-width="2"/>')
        body.append(f'<text x="956" y="{y + 4}" font-size="10">L{j + 1}</text>')
    return _document(1000, 400, body)


def render_figures(artifacts, directory) -> list[str]:
    """Write the standard figure set for a run into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    style = default_style(artifacts)
    median = next(t for t in artifacts.trajectories if t.run_id == artifacts.aggregate.median_run)
    docs = {
        "plane.svg": plot_plane(artifacts.mean_trajectory, style),
        "plane_median_run.svg": plot_plane(median, PlaneStyle(
            style.x_range, style.y_range, style.zoom,
            title=f"{artifacts.config.name}: median-deviating run {median.run_id}")),
        "mi_vs_epoch.svg": plot_curves(artifacts, "mi_vs_epoch"),
        "accuracy.svg": plot_curves(artifacts, "accuracy"),
    }
    paths = []
    for name, doc in docs.items():
        p = os.path.join(directory, name)
        with open(p, "w", newline="\n") as f:
            f.write(doc)
        paths.append(p)
    return paths
