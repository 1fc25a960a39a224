"""Figures and delimited summaries for training runs and evaluations."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pipeline import read_loss_log  # noqa: E402

METRIC_NAMES = ("psnr", "ssim", "ms_ssim")
METRIC_LABELS = {"psnr": "PSNR (dB)", "ssim": "SSIM", "ms_ssim": "MS-SSIM"}


def _style(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.tick_params(direction="out", length=3)


def plot_loss(loss_tsv, out_png, smooth: int = 25) -> Path:
    """Per-step MSE (log scale) with a trailing moving average."""
    log = read_loss_log(loss_tsv)
    steps, loss = log[:, 0], log[:, 2]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(steps, loss, lw=0.6, color="0.7", label="step")
    if len(loss) >= smooth > 1:
        kernel = np.ones(smooth) / smooth
        ax.plot(steps[smooth - 1:], np.convolve(loss, kernel, mode="valid"), lw=1.4, color="C0", label=f"mean of {smooth}")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("MSE loss")
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return Path(out_png)


def plot_metrics(eval_json, out_png) -> Path:
    """Mean +/- std bars for every method and metric in an evaluation JSON."""
    reports = json.loads(Path(eval_json).read_text())
    methods = list(reports)
    fig, axes = plt.subplots(1, 3, figsize=(9.0, 3.0))
    for ax, metric in zip(axes, METRIC_NAMES):
        means = [reports[m][metric]["mean"] or 0.0 for m in methods]
        stds = [reports[m][metric]["std"] or 0.0 for m in methods]
        ax.bar(range(len(methods)), means, yerr=stds, color=[f"C{i}" for i in range(len(methods))], capsize=3)
        ax.set_xticks(range(len(methods)))
        ax.set_xticklabels(methods, fontsize=8)
        ax.set_title(METRIC_LABELS[metric], fontsize=9)
        _style(ax)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return Path(out_png)


def plot_panel(images: dict[str, np.ndarray], out_png, cmap: str = "gray") -> Path:
    """Side-by-side grayscale panel (e.g. enface MIPs of input, target and prediction)."""
    fig, axes = plt.subplots(1, len(images), figsize=(2.4 * len(images), 2.6), squeeze=False)
    for ax, (title, img) in zip(axes[0], images.items()):
        ax.imshow(img, cmap=cmap, vmin=0.0, vmax=1.0, interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return Path(out_png)


def metrics_table(eval_json) -> str:
    """Tab-separated ``method metric mean std n`` rows."""
    reports = json.loads(Path(eval_json).read_text())
    lines = ["method\tmetric\tmean\tstd\tn"]
    for method, rep in reports.items():
        for metric in METRIC_NAMES:
            s = rep[metric]
            lines.append(f"{method}\t{metric}\t{s['mean']}\t{s['std']}\t{s['n']}")
    return "\n".join(lines) + "\n"


def write_report(out_dir, loss_tsv=None, eval_json=None) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    if loss_tsv is not None:
        written["loss_png"] = plot_loss(loss_tsv, out_dir / "loss.png")
    if eval_json is not None:
        written["metrics_png"] = plot_metrics(eval_json, out_dir / "metrics.png")
        path = out_dir / "metrics.tsv"
        path.write_text(metrics_table(eval_json))
        written["metrics_tsv"] = path
    return written
