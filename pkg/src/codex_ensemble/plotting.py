"""Report figures, rendered off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import ScopeRow  # noqa: E402

_METRICS = ("lrap", "micro_f1", "jaccard", "principal_accuracy")


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    # no Software tag so PNG bytes do not depend on the matplotlib version
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_model_comparison(rows: dict[str, dict], path: str | Path) -> Path:
    """Grouped bars: one group per metric, one bar per model."""
    fig, ax = plt.subplots(figsize=(8, 4))
    names = list(rows)
    width = 0.8 / max(1, len(names))
    for i, name in enumerate(names):
        xs = [k + i * width for k in range(len(_METRICS))]
        ax.bar(xs, [rows[name][m] for m in _METRICS], width, label=name)
    ax.set_xticks([k + width * (len(names) - 1) / 2 for k in range(len(_METRICS))])
    ax.set_xticklabels(_METRICS)
    ax.set_ylim(0, 1)
    ax.set_ylabel("score")
    ax.legend(fontsize=8)
    return _save(fig, Path(path))


def plot_scope_curve(rows: Sequence[ScopeRow], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = [100 * r.scope for r in rows]
    ax.plot(xs, [r.lrap for r in rows], marker="o", label="LRAP")
    ax.plot(xs, [r.ranking_loss for r in rows], marker="s", label="ranking loss")
    ax.set_xscale("log")
    ax.set_xticks(xs)
    ax.set_xticklabels([f"{x:g}%" for x in xs])
    ax.set_xlabel("data scope (most confident records)")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    return _save(fig, Path(path))


def plot_loss_history(history: dict, path: str | Path) -> Path:
    """Dev loss per epoch for every trained network."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, h in sorted(history.items()):
        epochs = h.get("epochs") if isinstance(h, dict) else None
        if not epochs or "dev_loss" not in epochs[0]:
            continue
        ax.plot([e["epoch"] for e in epochs], [e["dev_loss"] for e in epochs], label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("dev loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    return _save(fig, Path(path))


def plot_codes_per_case(counts: Sequence[int], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    top = max(counts, default=1)
    ax.hist(counts, bins=range(1, top + 2), align="left", rwidth=0.85)
    ax.set_xlabel("categories per episode")
    ax.set_ylabel("episodes")
    return _save(fig, Path(path))
