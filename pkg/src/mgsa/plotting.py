"""Report figures, written as PNG files next to the JSON outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes reproducible
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=_META)
    plt.close(fig)
    return path


def accuracy_bars(report: dict, path) -> Path:
    """Grouped bars of mean accuracy: one group per task and one bar per variant."""
    tasks = report["tasks"]
    variants = [v for v in report["variants"] if "accuracy" in v]
    fig, ax = plt.subplots(figsize=(1.6 + 1.3 * len(tasks), 3.2))
    width = 0.8 / max(1, len(variants))
    x = np.arange(len(tasks))
    for i, v in enumerate(variants):
        mean = np.array([v["accuracy"][t]["mean"] for t in tasks]) * 100
        lo = mean - np.array([v["accuracy"][t]["min"] for t in tasks]) * 100
        hi = np.array([v["accuracy"][t]["max"] for t in tasks]) * 100 - mean
        ax.bar(x + (i - (len(variants) - 1) / 2) * width, mean, width, yerr=[lo, hi], label=v["label"], capsize=2)
    ax.set_xticks(x)
    ax.set_xticklabels(tasks)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.spines[["top", "right"]].set_visible(False)
    if variants:
        ax.legend(frameon=False, fontsize=7, loc="lower right")
    return _save(fig, path)


def loss_curves(report: dict, path) -> Path:
    """Epoch-mean training loss for every run in the report."""
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    for v in report["variants"]:
        for run in v["runs"]:
            if "epoch_loss" in run:
                ax.plot(np.arange(1, len(run["epoch_loss"]) + 1), run["epoch_loss"], marker="o", ms=3,
                        label=f"{v['label']} (seed {run['seed']})")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax.set_yscale("log")
    ax.spines[["top", "right"]].set_visible(False)
    if ax.lines:
        ax.legend(frameon=False, fontsize=7)
    return _save(fig, path)


def attention_heatmaps(dump: dict, path, layer: int | None = None) -> Path:
    """One heatmap per head of a layer: rows are query tokens, columns words or phrases."""
    layers = dump["layers"]
    chosen = next((l for l in layers if l["layer"] == layer), layers[0]) if layer is not None else layers[0]
    heads = chosen["heads"]
    tokens = dump["tokens"]
    fig, axes = plt.subplots(1, len(heads), figsize=(2.6 * len(heads), 2.8), squeeze=False)
    for ax, head in zip(axes[0], heads):
        w = np.asarray(head["weights"])
        ax.imshow(w, cmap="Blues", vmin=0.0, vmax=1.0, aspect="auto")
        if "spans" in head:
            cols = [" ".join(tokens[a:b]) for a, b in head["spans"]]
        else:
            cols = tokens
        ax.set_xticks(range(len(cols)))
        ax.set_xticklabels(cols, rotation=90, fontsize=6)
        ax.set_yticks(range(len(tokens)))
        ax.set_yticklabels(tokens, fontsize=6)
        ax.set_title(f"head {head['head']}: {head['granularity']}", fontsize=8)
    fig.suptitle(f"layer {chosen['layer']}", fontsize=9)
    return _save(fig, path)
