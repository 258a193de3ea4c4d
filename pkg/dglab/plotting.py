"""Plots built from persisted run logs, feature dumps and checkpoint predictions."""
import logging
import os
from typing import List, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from sklearn.decomposition import PCA  # noqa: E402
from sklearn.manifold import TSNE  # noqa: E402

from .errors import ConfigurationError  # noqa: E402
from .experiments import SegmentationCase  # noqa: E402
from .features import FeatureDump  # noqa: E402
from .metrics import compute_metrics, confusion  # noqa: E402
from .trainer import read_run_log  # noqa: E402

logger = logging.getLogger(__name__)

MARKERS = ["o", "^", "s", "D", "v", "P", "X"]
LOSS_KEYS = ["L_stu_src", "L_stu_trg", "L_c_z", "L_c_b", "total"]


def embed_2d(matrix: np.ndarray, method: str = "pca", seed: int = 0) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    if method == "pca":
        return PCA(n_components=2, random_state=seed).fit_transform(matrix)
    elif method == "tsne":
        perplexity = min(30.0, max(2.0, (matrix.shape[0] - 1) / 3.0))
        return TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(matrix)
    raise ConfigurationError(f"expected pca or tsne, got {method!r}", "embedding")


def plot_embedding(dumps: Mapping[str, FeatureDump], out_path: str, method: str = "pca", seed: int = 0) -> str:
    """Joint 2-D embedding of several runs; colour is domain, marker is run."""
    if not dumps:
        raise ConfigurationError("no feature dumps given", "dump")
    names = list(dumps)
    points = embed_2d(np.concatenate([dumps[n].matrix for n in names]), method, seed)

    domains = sorted({int(d) for n in names for d in dumps[n].domains})
    cmap = plt.get_cmap("tab10")
    fig, ax = plt.subplots(figsize=(6, 5))
    start = 0
    for i, name in enumerate(names):
        dump = dumps[name]
        block = points[start:start + len(dump)]
        start += len(dump)
        for d in domains:
            sel = dump.domains == d
            if sel.any():
                ax.scatter(
                    block[sel, 0], block[sel, 1], s=18, alpha=0.8,
                    color=cmap(domains.index(d) % 10), marker=MARKERS[i % len(MARKERS)],
                    label=f"{name} / domain {d}",
                )
    ax.set_title(f"Latent features ({method.upper()})")
    ax.legend(fontsize=7, loc="best")
    return _save(fig, out_path)


def _running_mean(values: List[float]) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return np.cumsum(values) / np.arange(1, values.size + 1)


def plot_training_curves(logs: Mapping[str, str], out_path: str) -> str:
    """Loss curves and the running teacher-update rate for each labelled JSONL log."""
    if not logs:
        raise ConfigurationError("no run logs given", "log")
    fig, (ax_loss, ax_gate) = plt.subplots(1, 2, figsize=(11, 4))
    for name, path in logs.items():
        records = [r for r in read_run_log(path) if "error" not in r]
        steps = [r["step"] for r in records]
        for key in LOSS_KEYS:
            if any(key in r for r in records):
                ax_loss.plot(steps, [r.get(key, np.nan) for r in records], label=f"{name} {key}", linewidth=1)
        gated = [r for r in records if "gate" in r]
        if gated:
            ax_gate.plot(
                [r["step"] for r in gated], _running_mean([float(r["gate"]["applied"]) for r in gated]), label=name
            )
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=7)
    ax_gate.set_xlabel("step")
    ax_gate.set_ylabel("teacher update rate")
    ax_gate.set_ylim(0, 1.05)
    if ax_gate.lines:
        ax_gate.legend(fontsize=7)
    return _save(fig, out_path)


def overlay_slice(mask: np.ndarray) -> int:
    """Axial index with the most foreground; the centre slice for an empty mask."""
    area = mask.reshape(mask.shape[0], -1).sum(axis=1)
    return int(np.argmax(area)) if area.any() else mask.shape[0] // 2


def plot_segmentations(cases: Sequence[SegmentationCase], out_path: str) -> str:
    """One row per case: ground truth, then each labelled prediction on the same axial slice.

    Predictions are drawn filled with the ground-truth outline on top, and
    each panel title carries the volume DSC of that prediction.
    """
    if not cases:
        raise ConfigurationError("no cases to plot", "segmentation")
    labels = list(cases[0].predictions)
    cols = 1 + len(labels)
    fig, axes = plt.subplots(len(cases), cols, figsize=(2.6 * cols, 2.8 * len(cases)), squeeze=False)
    for row, case in zip(axes, cases):
        k = overlay_slice(case.mask)
        panels = [(f"{case.case_id} z={k}", case.mask)]
        for label in labels:
            dsc = compute_metrics(confusion(case.predictions[label], case.mask)).dsc
            panels.append((f"{label} DSC {dsc:.2f}", case.predictions[label]))
        for ax, (title, mask) in zip(row, panels):
            ax.imshow(case.image[k], cmap="gray")
            ax.imshow(np.ma.masked_where(mask[k] == 0, mask[k]), cmap="autumn", alpha=0.5, vmin=0, vmax=1)
            if case.mask[k].any():
                ax.contour(case.mask[k], levels=[0.5], colors="lime", linewidths=0.8)
            ax.set_title(title, fontsize=7)
            ax.axis("off")
    return _save(fig, out_path)


def _save(fig, out_path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    logger.info("Saved plot to %s", out_path)
    return out_path
