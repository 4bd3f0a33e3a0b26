"""Rendering of the seven supported figure kinds from run CSVs."""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# Stable ids inside SVG output so identical inputs give identical bytes,
# and real text elements so labels stay greppable in the output.
matplotlib.rcParams["svg.hashsalt"] = "plotkit"
matplotlib.rcParams["svg.fonttype"] = "none"

_REQUIRED_COLUMNS = {
    "learning_curve": ("phase", "epoch", "batch", "split", "metric", "value",
                       "seed"),
    "reliability_diagram": ("bin_low", "bin_high", "count", "mean_conf",
                            "accuracy"),
    "spectrum_curves": ("analysis", "mode", "dim", "ratio", "cumulative"),
    "gain_vs_info": ("task", "unit", "informativeness", "gain"),
    "embedding_2d": ("mode", "x", "y", "label"),
    "robustness_grid": ("kind", "severity", "mode", "accuracy",
                        "comod_minus_attention"),
    "sparsity_curve": ("task", "threshold", "count"),
}

FIGURE_KINDS = tuple(sorted(_REQUIRED_COLUMNS))

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


class FigureError(ValueError):
    """A figure request that cannot be rendered (bad kind, file, or columns)."""


@dataclass(frozen=True)
class FigureRequest:
    """One figure to render: a kind, its input CSVs, and the output path.

    ``labels`` names the series when several inputs are overlaid (only the
    learning curve takes more than one input). ``options`` carries per-kind
    presentation switches such as which metric/split of a metric log to plot.
    """

    kind: str
    inputs: tuple
    output: str
    labels: tuple = ()
    options: dict = field(default_factory=dict)


def read_rows(path, required):
    """Parse a CSV into a list of dicts, insisting on the required columns."""
    path = Path(path)
    if not path.exists():
        raise FigureError(f"input CSV not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise FigureError(f"empty CSV: {path}")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise FigureError(
                f"{path} is missing required column(s): {', '.join(missing)}")
        rows = list(reader)
    if not rows:
        raise FigureError(f"no data rows in {path}")
    return rows


def _series_mean(rows, metric, split):
    """Average a metric-log series over seeds, keyed by logging order."""
    per_seed = {}
    for r in rows:
        if r["metric"] == metric and r["split"] == split:
            per_seed.setdefault(r["seed"], []).append(float(r["value"]))
    if not per_seed:
        raise FigureError(f"no rows with metric={metric!r} split={split!r}")
    n = min(len(v) for v in per_seed.values())
    return [sum(v[i] for v in per_seed.values()) / len(per_seed)
            for i in range(n)]


def _plot_learning_curve(inputs, labels, options):
    metric = options.get("metric", "macro_f1")
    split = options.get("split", "val")
    series = []
    for i, path in enumerate(inputs):
        rows = read_rows(path, _REQUIRED_COLUMNS["learning_curve"])
        label = labels[i] if i < len(labels) else Path(path).stem
        series.append((label, _series_mean(rows, metric, split)))
    two = len(series) == 2
    fig, axes = plt.subplots(2 if two else 1, 1, figsize=(6, 6 if two else 4),
                             sharex=True, squeeze=False)
    ax = axes[0][0]
    for i, (label, ys) in enumerate(series):
        ax.plot(range(1, len(ys) + 1), ys, color=_COLORS[i % len(_COLORS)],
                label=label)
    ax.set_ylabel(metric)
    ax.legend(frameon=False)
    if two:
        (la, ya), (lb, yb) = series
        n = min(len(ya), len(yb))
        diff = [ya[i] - yb[i] for i in range(n)]
        ax2 = axes[1][0]
        ax2.plot(range(1, n + 1), diff, color="#333333")
        ax2.axhline(0.0, color="#999999", linewidth=0.8)
        ax2.set_ylabel(f"{la} − {lb}")
        ax2.set_xlabel("evaluation step")
    else:
        ax.set_xlabel("evaluation step")
    return fig


def _plot_reliability(inputs, labels, options):
    rows = read_rows(inputs[0], _REQUIRED_COLUMNS["reliability_diagram"])
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot([0, 1], [0, 1], "--", color="#555555", linewidth=1)
    for r in rows:
        lo, hi = float(r["bin_low"]), float(r["bin_high"])
        conf, acc = float(r["mean_conf"]), float(r["accuracy"])
        if int(r["count"]) == 0:
            continue
        ax.bar(0.5 * (lo + hi), acc, width=hi - lo, align="center",
               color="#1f77b4", edgecolor="white", linewidth=0.5)
        # shade the confidence-accuracy gap the calibration error summarizes;
        # a perfectly calibrated bin contributes no shaded area at all
        if conf != acc:
            ax.bar(0.5 * (lo + hi), conf - acc, bottom=acc, width=hi - lo,
                   align="center", color="#d62728", alpha=0.4, linewidth=0)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    return fig


def _plot_spectrum(inputs, labels, options):
    rows = read_rows(inputs[0], _REQUIRED_COLUMNS["spectrum_curves"])
    analyses = sorted({r["analysis"] for r in rows})
    fig, axes = plt.subplots(1, len(analyses), figsize=(4.5 * len(analyses), 4),
                             squeeze=False)
    for ax, analysis in zip(axes[0], analyses):
        modes = sorted({r["mode"] for r in rows if r["analysis"] == analysis})
        for i, mode in enumerate(modes):
            pts = sorted(((int(r["dim"]), float(r["cumulative"]))
                          for r in rows
                          if r["analysis"] == analysis and r["mode"] == mode))
            ax.plot([p[0] for p in pts], [p[1] for p in pts],
                    color=_COLORS[i % len(_COLORS)], label=mode)
        ax.axhline(0.8, color="#999999", linewidth=0.8, linestyle=":")
        ax.set_title(analysis)
        ax.set_xlabel("dimensions")
        ax.set_ylabel("cumulative explained variance")
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False, fontsize=8)
    return fig


def _plot_gain_vs_info(inputs, labels, options):
    rows = read_rows(inputs[0], _REQUIRED_COLUMNS["gain_vs_info"])
    tasks = sorted({r["task"] for r in rows}, key=lambda t: (len(t), t))
    fig, ax = plt.subplots(figsize=(5, 4))
    for i, task in enumerate(tasks):
        xs = [float(r["informativeness"]) for r in rows if r["task"] == task]
        ys = [float(r["gain"]) for r in rows if r["task"] == task]
        ax.scatter(xs, ys, s=12, color=_COLORS[i % len(_COLORS)],
                   label=f"task {task}", alpha=0.7, linewidths=0)
    ax.set_xlabel("informativeness")
    ax.set_ylabel("mean normalized gain")
    ax.legend(frameon=False, fontsize=8)
    return fig


def _plot_embedding(inputs, labels, options):
    rows = read_rows(inputs[0], _REQUIRED_COLUMNS["embedding_2d"])
    modes = sorted({r["mode"] for r in rows})
    fig, axes = plt.subplots(1, len(modes), figsize=(4 * len(modes), 4),
                             squeeze=False)
    for ax, mode in zip(axes[0], modes):
        sub = [r for r in rows if r["mode"] == mode]
        classes = sorted({r["label"] for r in sub}, key=lambda t: (len(t), t))
        for i, cls in enumerate(classes):
            xs = [float(r["x"]) for r in sub if r["label"] == cls]
            ys = [float(r["y"]) for r in sub if r["label"] == cls]
            ax.scatter(xs, ys, s=10, color=_COLORS[i % len(_COLORS)],
                       label=cls, alpha=0.7, linewidths=0)
        ax.set_title(mode)
        ax.set_xticks([])
        ax.set_yticks([])
    axes[0][-1].legend(frameon=False, fontsize=7, loc="upper right")
    return fig


def _plot_robustness(inputs, labels, options):
    rows = read_rows(inputs[0], _REQUIRED_COLUMNS["robustness_grid"])
    kinds = sorted({r["kind"] for r in rows})
    ncol = min(3, len(kinds))
    nrow = (len(kinds) + ncol - 1) // ncol
    fig, axes = plt.subplots(nrow, ncol, figsize=(4 * ncol, 3.2 * nrow),
                             squeeze=False, sharey=True)
    for j, kind in enumerate(kinds):
        ax = axes[j // ncol][j % ncol]
        sub = [r for r in rows if r["kind"] == kind]
        modes = sorted({r["mode"] for r in sub})
        for i, mode in enumerate(modes):
            pts = sorted((int(r["severity"]), float(r["accuracy"]))
                         for r in sub if r["mode"] == mode)
            ax.plot([p[0] for p in pts], [p[1] for p in pts],
                    color=_COLORS[i % len(_COLORS)], marker="o",
                    markersize=3, label=mode)
        ax.set_title(kind, fontsize=9)
        ax.set_xlabel("severity")
        if j % ncol == 0:
            ax.set_ylabel("accuracy")
    axes[0][0].legend(frameon=False, fontsize=7)
    for j in range(len(kinds), nrow * ncol):
        axes[j // ncol][j % ncol].axis("off")
    return fig


def _plot_sparsity(inputs, labels, options):
    rows = read_rows(inputs[0], _REQUIRED_COLUMNS["sparsity_curve"])
    tasks = sorted({r["task"] for r in rows}, key=lambda t: (len(t), t))
    fig, ax = plt.subplots(figsize=(5, 4))
    for i, task in enumerate(tasks):
        pts = sorted((float(r["threshold"]), int(r["count"]))
                     for r in rows if r["task"] == task)
        ax.plot([p[0] for p in pts], [p[1] for p in pts],
                color=_COLORS[i % len(_COLORS)], label=f"task {task}")
    ax.set_xlabel("closeness-to-zero threshold")
    ax.set_ylabel("gains below threshold")
    ax.legend(frameon=False, fontsize=8)
    return fig


_RENDERERS = {
    "learning_curve": _plot_learning_curve,
    "reliability_diagram": _plot_reliability,
    "spectrum_curves": _plot_spectrum,
    "gain_vs_info": _plot_gain_vs_info,
    "embedding_2d": _plot_embedding,
    "robustness_grid": _plot_robustness,
    "sparsity_curve": _plot_sparsity,
}


def render(request: FigureRequest) -> Path:
    """Render one figure request to its output path and return the path."""
    if request.kind not in _RENDERERS:
        raise FigureError(f"unknown figure kind {request.kind!r}; "
                          f"expected one of {', '.join(FIGURE_KINDS)}")
    if not request.inputs:
        raise FigureError("figure request has no input CSVs")
    fig = _RENDERERS[request.kind](tuple(request.inputs),
                                   tuple(request.labels), request.options)
    out = Path(request.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        fig.savefig(out, metadata={"Date": None}
                    if out.suffix == ".svg" else None)
    finally:
        plt.close(fig)
    return out
