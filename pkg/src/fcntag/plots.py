"""Standalone SVG figures: learning curves, ROC staircases, bins per kHz."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .frontend import FrontendConfig  # noqa: E402
from .metrics import bins_per_khz  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_SVG_META = {"Date": None}


def _save(fig, path) -> None:
    plt.rcParams["svg.hashsalt"] = "fcntag"
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def learning_curves(histories: dict, path) -> None:
    """One validation-AUC curve per run label."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, hist in sorted(histories.items()):
        ax.plot([r.epoch for r in hist.records], [r.val_macro_auc for r in hist.records],
                marker="o", ms=3, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation macro AUC")
    ax.grid(alpha=0.3)
    if histories:
        ax.legend()
    _save(fig, path)


def roc_curves(curves: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    for label, pts in curves.items():
        ax.step(pts[:, 0], pts[:, 1], where="post", label=label)
    ax.plot([0, 1], [0, 1], ls=":", color="grey")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    if len(curves) <= 12:
        ax.legend(fontsize="small")
    _save(fig, path)


def bins_chart(path, cfg: FrontendConfig | None = None) -> dict[str, list[int]]:
    cfg = cfg or FrontendConfig()
    counts = {"mel": bins_per_khz("mel", cfg), "stft": bins_per_khz("stft", cfg)}
    fig, ax = plt.subplots(figsize=(6, 4))
    k = range(len(counts["mel"]))
    ax.bar([i - 0.2 for i in k], counts["mel"], width=0.4, label=f"mel ({cfg.n_mels})")
    ax.bar([i + 0.2 for i in k], counts["stft"], width=0.4, label=f"STFT ({cfg.n_bins})")
    ax.set_xticks(list(k), [f"{i}-{i + 1}" for i in k])
    ax.set_xlabel("frequency band (kHz)")
    ax.set_ylabel("bins")
    ax.legend()
    _save(fig, path)
    return counts
