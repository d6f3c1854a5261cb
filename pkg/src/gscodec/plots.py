"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import os
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings, so figures are byte-stable
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_code_histograms(histograms: Mapping[str, np.ndarray], path: str | os.PathLike) -> None:
    """Sorted cluster-size histogram per group, as a share of all Gaussians."""
    fig, axes = plt.subplots(1, len(histograms), figsize=(3.2 * len(histograms), 3.0), squeeze=False)
    for ax, (name, hist) in zip(axes[0], histograms.items()):
        hist = np.asarray(hist, dtype=np.float64)
        share = hist / hist.sum() if hist.sum() else hist
        ax.plot(np.arange(1, len(share) + 1), 100 * share, lw=1.0)
        ax.set_xscale("log")
        ax.set_title(name)
        ax.set_xlabel("code rank")
    axes[0][0].set_ylabel("Gaussians (%)")
    _save(fig, path)


def plot_memory_breakdown(sections: Mapping[str, int], path: str | os.PathLike, title: str = "") -> None:
    names = list(sections)
    values = np.array([sections[n] for n in names], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5.0, 2.8))
    ax.barh(names, values / 1e6)
    ax.set_xlabel("MB")
    if title:
        ax.set_title(title)
    _save(fig, path)


def plot_trace(iters: Sequence[int], psnr: Sequence[float], count: Sequence[int],
               path: str | os.PathLike) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.0))
    ax.plot(iters, psnr, color="C0")
    ax.set_xlabel("iteration")
    ax.set_ylabel("PSNR (dB)", color="C0")
    ax2 = ax.twinx()
    ax2.plot(iters, count, color="C1")
    ax2.set_ylabel("Gaussians", color="C1")
    _save(fig, path)


def plot_psnr_per_image(names: Sequence[str], psnr: Sequence[float], path: str | os.PathLike) -> None:
    vals = np.array([p if np.isfinite(p) else np.nan for p in psnr])
    fig, ax = plt.subplots(figsize=(max(4.0, 0.4 * len(names)), 3.0))
    ax.bar(range(len(names)), vals)
    ax.set_xticks(range(len(names)), names, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("PSNR (dB)")
    _save(fig, path)
