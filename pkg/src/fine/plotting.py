"""Matplotlib figures written next to the CSV outputs."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .bench import MA_WINDOW, moving_average  # noqa: E402

RECIPE_COLORS = {"he": "#7f7f7f", "share": "#1f77b4", "svd": "#ff7f0e", "fine": "#d62728"}
_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "fine",
}


def _save(fig, path):
    # Fixed metadata keeps repeated runs byte-identical.
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def plot_loss_curves(results, path, window=MA_WINDOW):
    """Moving-average loss per run, one panel per depth."""
    depths = sorted({r.depth for r in results})
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, len(depths), figsize=(3.2 * len(depths), 2.6), squeeze=False)
        for ax, depth in zip(axes[0], depths):
            seen = set()
            for r in results:
                if r.depth != depth or r.failed:
                    continue
                ma = moving_average(r.losses, window)
                if not ma.size:
                    continue
                label = None if r.recipe in seen else r.recipe
                seen.add(r.recipe)
                ax.plot(np.arange(window, window + ma.size), ma, lw=0.9, label=label,
                        color=RECIPE_COLORS.get(r.recipe))
                if r.target_loss is not None:
                    ax.axhline(r.target_loss, color="k", lw=0.5, ls=":")
            ax.set_title(f"depth {depth}")
            ax.set_xlabel("training step")
            ax.set_yscale("log")
        axes[0][0].set_ylabel(f"loss ({window}-step mean)")
        axes[0][-1].legend(frameon=False)
        _save(fig, path)


def plot_steps_to_target(rows, path):
    """Bar chart of mean steps-to-target (with sd) per recipe and depth."""
    recipes = sorted({row["recipe"] for row in rows})
    depths = sorted({row["depth"] for row in rows})
    width = 0.8 / max(1, len(recipes))
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(depths), 2.6))
        for i, rec in enumerate(recipes):
            xs, ys, es = [], [], []
            for j, depth in enumerate(depths):
                row = next((r for r in rows if r["recipe"] == rec and r["depth"] == depth), None)
                if row is None or row["steps_mean"] is None:
                    continue
                xs.append(j + i * width)
                ys.append(row["steps_mean"])
                es.append(row["steps_sd"])
            ax.bar(xs, ys, width, yerr=es, label=rec, color=RECIPE_COLORS.get(rec), capsize=2)
        ax.set_xticks(np.arange(len(depths)) + 0.4 - width / 2)
        ax.set_xticklabels([f"L{d}" for d in depths])
        ax.set_ylabel("steps to target")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_sample_grid(images, path, ncols=8):
    """Tile ``[n,c,h,h]`` images in [-1, 1] into one figure."""
    images = np.asarray(images)
    n = images.shape[0]
    nrows = max(1, int(np.ceil(n / ncols)))
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(nrows, ncols, figsize=(ncols * 0.6, nrows * 0.6), squeeze=False)
        for i, ax in enumerate(axes.flat):
            ax.axis("off")
            if i < n:
                img = images[i]
                img = img[0] if img.shape[0] == 1 else np.moveaxis(img, 0, -1)
                ax.imshow((img + 1.0) / 2.0, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
        fig.subplots_adjust(wspace=0.05, hspace=0.05)
        _save(fig, path)
