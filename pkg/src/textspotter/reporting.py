"""Figure and delimited-output writers for train/infer/eval runs."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from textspotter.evaluation import EvalReport


def write_loss_csv(path, losses: list[float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(losses, start=1):
            writer.writerow([step, repr(loss)])


def read_loss_csv(path) -> list[float]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        next(reader)
        return [float(row[1]) for row in reader]


def plot_loss_curve(path, losses: list[float]) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(1, len(losses) + 1), losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title("training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report_csv(path, reports: dict[str, EvalReport]) -> None:
    """One row per lexicon mode (or report label)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["mode", "precision", "recall", "hmean", "matched", "num_predictions", "num_gt", "malformed_sequences"]
        )
        for mode, rep in reports.items():
            writer.writerow(
                [
                    mode,
                    f"{rep.precision:.6f}",
                    f"{rep.recall:.6f}",
                    f"{rep.hmean:.6f}",
                    rep.matched,
                    rep.num_predictions,
                    rep.num_gt,
                    rep.malformed_sequences,
                ]
            )


def plot_eval_report(path, reports: dict[str, EvalReport]) -> None:
    modes = list(reports)
    metrics = ["precision", "recall", "hmean"]
    values = np.array(
        [[getattr(reports[m], metric) for metric in metrics] for m in modes]
    )
    x = np.arange(len(modes))
    width = 0.25
    fig, ax = plt.subplots(figsize=(max(4.0, 1.8 * len(modes)), 4))
    for k, metric in enumerate(metrics):
        ax.bar(x + (k - 1) * width, values[:, k], width, label=metric)
    ax.set_xticks(x)
    ax.set_xticklabels(modes)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title("spotting metrics")
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sample_grid(path, images, captions, cols: int = 4, points=None) -> None:
    """Montage of grayscale images with optional predicted points."""
    n = len(images)
    if n == 0:
        fig, ax = plt.subplots(figsize=(3, 3))
        ax.text(0.5, 0.5, "no images", ha="center", va="center")
        ax.axis("off")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return
    cols = min(cols, n)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.5 * rows), squeeze=False)
    for i in range(rows * cols):
        ax = axes[i // cols][i % cols]
        ax.axis("off")
        if i >= n:
            continue
        img = images[i]
        ax.imshow(img, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        if points is not None and points[i]:
            xs = [p[0] * img.shape[1] for p in points[i]]
            ys = [p[1] * img.shape[0] for p in points[i]]
            ax.scatter(xs, ys, s=12, c="red", marker="+")
        ax.set_title(captions[i], fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
