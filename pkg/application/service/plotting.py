"""
SVG charts drawn from the analysis and training CSVs
The chart type is picked from each file's header
"""

import csv
import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from service.analysis import (  # noqa: E402
    HISTOGRAM_HEADER,
    STATS_HEADER,
    SWEEP_HEADER,
    read_csv_table,
)
from service.errors import DataError  # noqa: E402
from service.robustness import ROBUSTNESS_HEADER  # noqa: E402
from service.training import TRAINING_LOG_HEADER  # noqa: E402

logger = logging.getLogger(__name__)

# Stable element ids so identical inputs give identical SVG bytes
plt.rcParams["svg.hashsalt"] = "headmask"


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_sweep(csv_path: Path, out_path: Path) -> Path:
    """Metric vs. heads masked, one line per order tag and metric"""
    rows = read_csv_table(csv_path, SWEEP_HEADER)
    series: Dict[str, List[Dict[str, str]]] = defaultdict(list)
    for row in rows:
        series[row["order_tag"]].append(row)

    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for tag, points in series.items():
        x = [int(p["n_masked"]) for p in points]
        axes[0].plot(x, [float(p["token_accuracy"]) for p in points], marker="o", label=tag)
        if all(p["bleu"] for p in points):
            axes[1].plot(x, [float(p["bleu"]) for p in points], marker="o", label=tag)
    axes[0].set_ylabel("token accuracy")
    axes[1].set_ylabel("BLEU")
    for ax in axes:
        ax.set_xlabel("heads masked")
        ax.grid(True, alpha=0.3)
        ax.legend()
    return _save(fig, out_path)


def plot_stats(csv_path: Path, out_path: Path) -> Path:
    """Bar chart of importance mean and variance per model"""
    rows = read_csv_table(csv_path, STATS_HEADER)
    tags = [r["model_tag"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].bar(tags, [float(r["mean"]) for r in rows])
    axes[0].set_title("mean importance")
    axes[1].bar(tags, [float(r["variance"]) for r in rows])
    axes[1].set_title("importance variance")
    return _save(fig, out_path)


def plot_histogram(csv_path: Path, out_path: Path) -> Path:
    """Step histograms of head importance, one per model"""
    rows = read_csv_table(csv_path, HISTOGRAM_HEADER)
    series: Dict[str, List[Dict[str, str]]] = defaultdict(list)
    for row in rows:
        series[row["model_tag"]].append(row)
    fig, ax = plt.subplots(figsize=(7, 4))
    for tag, bins in series.items():
        edges = [float(b["bin_low"]) for b in bins] + [float(bins[-1]["bin_high"])]
        ax.stairs([int(b["count"]) for b in bins], edges, label=tag)
    ax.set_xlabel("importance")
    ax.set_ylabel("heads")
    ax.legend()
    return _save(fig, out_path)


def plot_training_log(csv_path: Path, out_path: Path) -> Path:
    """Loss and dev accuracy over training steps"""
    rows = read_csv_table(csv_path, TRAINING_LOG_HEADER)
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    axes[0].plot([int(r["step"]) for r in rows], [float(r["loss"]) for r in rows])
    axes[0].set_ylabel("loss")
    evaluated = [r for r in rows if r["dev_metric"]]
    axes[1].plot([int(r["step"]) for r in evaluated], [float(r["dev_metric"]) for r in evaluated], marker="o")
    axes[1].set_ylabel("dev token accuracy")
    for ax in axes:
        ax.set_xlabel("step")
        ax.grid(True, alpha=0.3)
    return _save(fig, out_path)


def plot_robustness(csv_path: Path, out_path: Path) -> Path:
    """Descending-curve area and importance variance per trained variant, averaged over seeds"""
    rows = read_csv_table(csv_path, ROBUSTNESS_HEADER)
    series: Dict[str, List[Dict[str, str]]] = defaultdict(list)
    for row in rows:
        tag = row["variant"] if row["variant"] == "baseline" else f"{row['variant']}-{row['mask_n']}"
        series[tag].append(row)
    tags = list(series)
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for ax, key, title in ((axes[0], "auc_descending", "descending-curve area"),
                           (axes[1], "importance_variance", "importance variance")):
        ax.bar(tags, [sum(float(r[key]) for r in series[t]) / len(series[t]) for t in tags])
        ax.set_title(title)
        ax.tick_params(axis="x", labelrotation=45)
    return _save(fig, out_path)


PLOTTERS = {
    tuple(SWEEP_HEADER): plot_sweep,
    tuple(STATS_HEADER): plot_stats,
    tuple(HISTOGRAM_HEADER): plot_histogram,
    tuple(TRAINING_LOG_HEADER): plot_training_log,
    tuple(ROBUSTNESS_HEADER): plot_robustness,
}


def plot_csv(csv_path: Union[str, Path], out_dir: Union[str, Path]) -> Path:
    """
    Render ``csv_path`` to ``out_dir/<stem>.svg``

    Raises:
        DataError: The header matches none of the known tables
    """
    csv_path = Path(csv_path)
    try:
        with csv_path.open(newline="", encoding="utf-8") as f:
            header = tuple(next(csv.reader(f), []))
    except FileNotFoundError as e:
        raise DataError(f"file not found: {csv_path}") from e
    plotter = PLOTTERS.get(header)
    if plotter is None:
        raise DataError(f"{csv_path.name}: unrecognised CSV header {','.join(header)}")
    out = plotter(csv_path, Path(out_dir) / f"{csv_path.stem}.svg")
    logger.info(f"✅ Plot written: {out}")
    return out
