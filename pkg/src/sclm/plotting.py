"""Report figures written next to the CSV output of the CLI."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 120,
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss(steps, losses, lrs, path):
    """Training loss (log scale) with the learning-rate schedule on a twin axis."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(steps, losses, lw=0.8, color="C0", label="L1 loss")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("L1 loss")
        ax2 = ax.twinx()
        ax2.plot(steps, lrs, lw=1.0, color="C1", ls="--", label="learning rate")
        ax2.set_ylabel("learning rate")
        ax2.spines["right"].set_visible(True)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="upper right")
        return _save(fig, path)


def plot_bench(rows, path):
    """Horizontal bars of median time per path/thread count, p95 as whiskers."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels = [f"{r[0]} ({r[1]}t)" for r in rows]
        med = [r[3] for r in rows]
        err = [max(r[4] - r[3], 0.0) for r in rows]
        ax.barh(range(len(rows)), med, xerr=err, color="C0", alpha=0.8)
        ax.set_yticks(range(len(rows)), labels)
        ax.invert_yaxis()
        ax.set_xlabel("median wall-clock [ms]")
        return _save(fig, path)


def plot_stats(rows, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = [r[0] for r in rows]
        ax.bar(range(len(rows)), [r[2] for r in rows], color="C2")
        ax.set_xticks(range(len(rows)), names, rotation=30, ha="right")
        ax.set_ylabel("mean Y (0-255)")
        ax.set_ylim(0, 255)
        return _save(fig, path)


def plot_comparison(low, enhanced, path):
    """Input and enhanced image side by side; both ``(3, h, w)`` in [0, 1]."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.4))
        for ax, img, title in zip(axes, (low, enhanced), ("input", "enhanced")):
            ax.imshow(img.transpose(1, 2, 0).clip(0, 1))
            ax.set_title(title)
            ax.axis("off")
        return _save(fig, path)
