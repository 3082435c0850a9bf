"""Static SVG figures. Output is byte-stable: fixed hash salt, no date stamp."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "dgpvae"
plt.rcParams["svg.fonttype"] = "none"


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def factor_traces(continuous, indices, observations, factor_names, path, title: str = "") -> Path:
    """Ground-truth factors of one series above its observations."""
    k = continuous.shape[0]
    fig, axes = plt.subplots(k + 1, 1, figsize=(7, 1.4 * (k + 1)), sharex=True)
    t = np.arange(continuous.shape[1])
    for j in range(k):
        ax = axes[j]
        ax.plot(t, continuous[j], lw=1.0, color="0.6", label="continuous")
        if indices[j].min() >= 0:
            ax2 = ax.twinx()
            ax2.step(t, indices[j], where="mid", lw=1.2, color="C0")
            ax2.set_ylabel("index", fontsize=7)
        ax.set_ylabel(factor_names[j], fontsize=8)
    obs = np.asarray(observations).reshape(len(t), -1)
    axes[-1].plot(t, obs, lw=0.6)
    axes[-1].set_ylabel("x", fontsize=8)
    axes[-1].set_xlabel("time step")
    if title:
        axes[0].set_title(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def latent_traces(latents, length_scales: Sequence[float], path, title: str = "") -> Path:
    """Posterior-mean trace per latent channel of one series."""
    m = latents.shape[0]
    fig, axes = plt.subplots(m, 1, figsize=(7, 1.1 * m + 0.4), sharex=True, squeeze=False)
    for j in range(m):
        ax = axes[j, 0]
        ax.plot(latents[j], lw=1.0, color=f"C{j % 10}")
        ax.set_ylabel(f"z{j}\nl={length_scales[j]:g}", fontsize=7)
    axes[-1, 0].set_xlabel("time step")
    if title:
        axes[0, 0].set_title(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def importance_heatmap(R, column_names: Sequence[str], path, title: str = "") -> Path:
    """Rows are latent indices, columns factor or concept names."""
    R = np.asarray(R)
    m, k = R.shape
    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * k, 1.0 + 0.4 * m))
    im = ax.imshow(R, cmap="viridis", vmin=0.0, vmax=max(float(R.max()), 1e-12), aspect="auto")
    ax.set_xticks(range(k))
    ax.set_xticklabels(column_names, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(m))
    ax.set_yticklabels([f"z{i}" for i in range(m)], fontsize=8)
    ax.set_ylabel("latent")
    fig.colorbar(im, ax=ax, fraction=0.05)
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def score_distribution(scores: dict[str, Sequence[float]], path, title: str = "") -> Path:
    """One strip of per-seed values per metric, with the mean marked."""
    names = list(scores)
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(names), 3.2))
    for i, name in enumerate(names):
        vals = np.asarray([v for v in scores[name] if v is not None], dtype=float)
        if vals.size == 0:
            continue
        jitter = np.linspace(-0.12, 0.12, vals.size) if vals.size > 1 else np.zeros(1)
        ax.scatter(i + jitter, vals, s=14, color="C0")
        ax.hlines(vals.mean(), i - 0.25, i + 0.25, color="C3")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)
