"""2-D projections of speaker and style features before and after conversion."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import interpolate_unvoiced  # noqa: E402
from .synth_data import PITCH_CHANNEL  # noqa: E402

VIEWS = ("speaker", "style")


def speaker_features(frames):
    """Time-averaged frames without the pitch channel."""
    frames = np.asarray(frames, dtype=np.float64)
    return np.delete(frames, PITCH_CHANNEL, axis=1).mean(0)


def contour_features(f0, n_points=16):
    """Standardized log-f0 contour resampled to ``n_points`` over the utterance."""
    f0 = interpolate_unvoiced(np.asarray(f0, dtype=np.float64))
    if not np.any(f0 > 0):
        return np.zeros(n_points)
    y = np.log(np.maximum(f0, 1e-3))
    grid = np.linspace(0.0, len(y) - 1.0, n_points)
    y = np.interp(grid, np.arange(len(y)), y)
    sd = y.std()
    return (y - y.mean()) / sd if sd > 1e-8 else y - y.mean()


def pca_2d(x):
    """Project rows of ``x`` on the top two principal axes (sign-fixed)."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    axes = vt[:2]
    # Make the largest loading of each axis positive so plots do not flip between runs.
    signs = np.sign(axes[np.arange(len(axes)), np.abs(axes).argmax(1)])
    proj = xc @ (axes * signs[:, None]).T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    return proj


def scatter_before_after(before, after, labels_before, labels_after, title, path):
    """One PCA fit over both sets; circles are inputs, crosses converted outputs."""
    feats = np.vstack([before, after])
    proj = pca_2d(feats)
    n = len(before)
    names = sorted(set(labels_before) | set(labels_after))
    colors = {name: plt.cm.tab10(i % 10) for i, name in enumerate(names)}
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    for name in names:
        ib = [i for i, lab in enumerate(labels_before) if lab == name]
        ia = [n + i for i, lab in enumerate(labels_after) if lab == name]
        if ib:
            ax.scatter(proj[ib, 0], proj[ib, 1], marker="o", color=colors[name], alpha=0.6,
                       label=f"{name} before")
        if ia:
            ax.scatter(proj[ia, 0], proj[ia, 1], marker="x", color=colors[name],
                       label=f"{name} after")
    ax.set_title(title)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
