"""Figures written next to the CSV reports.

Everything renders through the Agg backend to PNG files. The ``Software``
metadata key is dropped so reruns produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.bbox": "tight",
}

_PNG_METADATA = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def _smooth(values: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(values) < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def loss_curves(curves: Mapping[str, Sequence[float]], path, title: str = "Training loss", smooth: int = 1) -> Path:
    """Per-step loss for one or more runs on shared axes."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, losses in curves.items():
            y = _smooth(np.asarray(losses, dtype=np.float64), smooth)
            # a moving average of width w is centred on step w-1 onward
            x = np.arange(len(y)) + (smooth - 1 if len(y) < len(losses) else 0)
            ax.plot(x, y, lw=1.2, label=name)
        ax.axhline(np.log(10), color="0.5", lw=0.8, ls="--", label="ln 10")
        ax.set_xlabel("step")
        ax.set_ylabel("cross-entropy")
        ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def fusion_weight_trace(weights: Sequence[Sequence[float]], path) -> Path:
    """Softmax fusion weights w1..w3 at the end of each epoch."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 3)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = np.arange(1, len(w) + 1)
        for i, k in enumerate((3, 5, 7)):
            ax.plot(epochs, w[:, i], marker="o", label=f"w{i + 1} ({k}x{k})")
        ax.axhline(1 / 3, color="0.5", lw=0.8, ls="--")
        ax.set_xlabel("epoch")
        ax.set_ylabel("weight")
        ax.set_xticks(epochs)
        ax.set_title("Fusion weights")
        ax.legend()
        return _save(fig, path)


def metric_bars(names: Sequence[str], rows: Sequence[Sequence[float]], path, title: str = "Test metrics") -> Path:
    """Grouped bars of accuracy, F1, precision and recall per model."""
    data = np.asarray(rows, dtype=np.float64)
    labels = ("Accuracy", "F1 Score", "Precision", "Recall")
    width = 0.8 / len(labels)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(6.4, 1.4 * len(names)), 4.0))
        x = np.arange(len(names))
        for j, label in enumerate(labels):
            ax.bar(x + (j - 1.5) * width, data[:, j], width, label=label)
        ax.set_xticks(x)
        ax.set_xticklabels(names)
        ax.set_ylim(0, 1)
        ax.set_title(title)
        ax.legend(ncol=4, loc="upper center", bbox_to_anchor=(0.5, -0.08))
        return _save(fig, path)


def bench_bars(labels: Sequence[str], naive_ns: Sequence[float], fused_ns: Sequence[float], path) -> Path:
    """Median forward time of the naive and fused weighted sums per shape."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.arange(len(labels))
        ax.bar(x - 0.2, np.asarray(naive_ns) / 1e6, 0.4, label="naive")
        ax.bar(x + 0.2, np.asarray(fused_ns) / 1e6, 0.4, label="fused")
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=15)
        ax.set_yscale("log")
        ax.set_ylabel("median time (ms)")
        ax.set_title("Weighted branch sum")
        ax.legend()
        return _save(fig, path)
