"""SVG figures: decision boundaries, coupling graphs and accuracy summaries.

Artists carry stable SVG ids (``cells``, ``samples``, ``edges``, ``loops``)
so the output can be checked structurally.
"""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import LineCollection  # noqa: E402

from .errors import ContractError  # noqa: E402

CLASS_COLORS = np.array([
    [0.84, 0.15, 0.16], [0.12, 0.47, 0.71], [0.17, 0.63, 0.17], [1.00, 0.50, 0.05],
    [0.58, 0.40, 0.74], [0.55, 0.34, 0.29], [0.89, 0.47, 0.76], [0.50, 0.50, 0.50],
])
plt.rcParams["svg.hashsalt"] = "cleot"
plt.rcParams["svg.fonttype"] = "none"


def class_colors(c):
    return CLASS_COLORS[np.arange(c) % len(CLASS_COLORS)]


def mix_colors(probs):
    """RGB per row: probability-weighted blend of the class colors."""
    probs = np.asarray(probs, dtype=np.float64)
    return np.clip(probs @ class_colors(probs.shape[1]), 0.0, 1.0)


def _finish(fig, path):
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    svg = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(svg)
    return svg


def _check_2d(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 2:
        raise ContractError(f"plots need 2-d features, got shape {x.shape}")
    return x


def _bounds(x, pad=0.5):
    lo, hi = x.min(axis=0) - pad, x.max(axis=0) + pad
    return lo, hi


def plot_decision_boundary(net, x, y, resolution=100, path=None, accuracy=None, title=None):
    """Eval-mode prediction map over a ``resolution x resolution`` grid with the samples on top.

    ``y`` may be one-hot or soft labels; point colors blend class colors.
    Returns the SVG text (also written to ``path`` when given).
    """
    x = _check_2d(x)
    if resolution < 1:
        raise ContractError("grid resolution must be >= 1")
    lo, hi = _bounds(x)
    xs = np.linspace(lo[0], hi[0], resolution + 1)
    ys = np.linspace(lo[1], hi[1], resolution + 1)
    cx, cy = (xs[:-1] + xs[1:]) / 2, (ys[:-1] + ys[1:]) / 2
    gx, gy = np.meshgrid(cx, cy)
    probs = net.predict(np.column_stack([gx.ravel(), gy.ravel()]))
    # pale version of the blended class colors
    rgb = (1.0 - 0.45 * (1.0 - mix_colors(probs))).reshape(resolution, resolution, 3)

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.pcolormesh(xs, ys, rgb, shading="flat", gid="cells", linewidth=0, antialiased=False)
    ax.scatter(x[:, 0], x[:, 1], c=mix_colors(y), s=10, edgecolors="k", linewidths=0.3, gid="samples")
    if accuracy is not None:
        ax.text(0.02, 0.03, f"{accuracy:.2f}", transform=ax.transAxes, color="red", fontsize=12, gid="accuracy")
    if title:
        ax.set_title(title)
    ax.set_xlim(lo[0], hi[0])
    ax.set_ylim(lo[1], hi[1])
    ax.set_xticks([])
    ax.set_yticks([])
    return _finish(fig, path)


def coupling_edges(gamma, threshold):
    """Index pairs ``(i, j)`` with ``gamma[i, j] >= threshold``."""
    if not threshold > 0:
        raise ContractError("coupling threshold must be positive")
    return np.argwhere(np.asarray(gamma) >= threshold)


def plot_coupling_graph(gamma, x, threshold, path=None, labels=None, max_width=3.0, title=None):
    """Draw every plan entry above ``threshold`` as a segment of width proportional to its mass.

    Diagonal entries (a sample matched to itself) become point markers.
    Returns ``(svg, number of drawn entries)``.
    """
    x = _check_2d(x)
    gamma = np.asarray(gamma, dtype=np.float64)
    edges = coupling_edges(gamma, threshold)
    off = edges[edges[:, 0] != edges[:, 1]]
    loops = edges[edges[:, 0] == edges[:, 1]]
    top = gamma.max() if gamma.size else 1.0

    fig, ax = plt.subplots(figsize=(5, 4))
    if labels is not None:
        ax.scatter(x[:, 0], x[:, 1], c=mix_colors(labels), s=8, alpha=0.6, linewidths=0, gid="samples")
    if len(off):
        segs = np.stack([x[off[:, 0]], x[off[:, 1]]], axis=1)
        widths = max_width * gamma[off[:, 0], off[:, 1]] / top
        ax.add_collection(LineCollection(segs, linewidths=widths, colors="0.2", alpha=0.7, gid="edges"))
    if len(loops):
        sizes = 4.0 + 30.0 * gamma[loops[:, 0], loops[:, 0]] / top
        ax.scatter(x[loops[:, 0], 0], x[loops[:, 0], 1], s=sizes, marker="o", facecolors="none",
                   edgecolors="0.2", linewidths=0.8, gid="loops")
    lo, hi = _bounds(x)
    ax.set_xlim(lo[0], hi[0])
    ax.set_ylim(lo[1], hi[1])
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title)
    return _finish(fig, path), len(edges)


def plot_accuracy_summary(summary_rows, path=None):
    """Mean clean accuracy (+/- std) against noise level, one line per method."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    methods = sorted({r["method"] for r in summary_rows})
    for method in methods:
        rows = sorted((r for r in summary_rows if r["method"] == method), key=lambda r: float(r["noise"]))
        noise = [float(r["noise"]) for r in rows]
        ax.errorbar(noise, [float(r["mean_acc"]) for r in rows], yerr=[float(r["std_acc"]) for r in rows],
                    marker="o", capsize=3, label=method)
    ax.set_xlabel("noise level")
    ax.set_ylabel("clean test accuracy")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _finish(fig, path)
