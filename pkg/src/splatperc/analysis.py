"""Post-fit analysis: covariance effective rank, histograms, metric reports.

The effective rank of a covariance is exp of the Shannon entropy (natural
log) of its normalized eigenvalue energies: 1 for a needle, d for a fully
isotropic d-dimensional Gaussian. For 2D splats it is computed directly from
the two squared scales since rotation cancels.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .image_io import psnr
from .losses import LossConfig
from .splat_render import SplatSet, load_splats, render
from .validation import as_image_array

_EIG_CLAMP = 1e-12


@dataclass
class ErankResult:
    values: np.ndarray  # per-splat erank
    energies: np.ndarray  # per-splat squared scales (s1^2, s2^2)
    normalized: np.ndarray  # per-splat q_i, rows sum to 1
    median: float = 0.0
    mean: float = 0.0
    bin_edges: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bin_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    bin_heights: np.ndarray = field(default_factory=lambda: np.zeros(0))  # max-normalized


def _erank_from_energies(energies: np.ndarray) -> np.ndarray:
    """exp(entropy) computed as S * exp(-sum(e * ln e) / S), which is exact
    for uniform energies (the log terms vanish instead of rounding)."""
    e = np.asarray(energies, dtype=np.float64)
    s = e.sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        elne = np.where(e > 0.0, e * np.log(e), 0.0)
    return s * np.exp(-elne.sum(axis=-1) / s)


def erank(covariance: np.ndarray) -> float:
    """Effective rank of a d x d symmetric PSD covariance, d in {2, 3}."""
    cov = np.asarray(covariance, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or cov.shape[0] not in (2, 3):
        raise ValueError(f"covariance must be 2x2 or 3x3, got {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-9):
        raise ValueError("covariance must be symmetric within 1e-9")
    eig = np.linalg.eigvalsh(cov)
    if np.any(eig < -1e-9 * max(1.0, float(eig.max(initial=0.0)))):
        raise ValueError("covariance is not PSD")
    if np.any(eig < _EIG_CLAMP):
        warnings.warn("eigenvalues clamped at 1e-12 for erank", RuntimeWarning,
                      stacklevel=2)
        eig = np.maximum(eig, _EIG_CLAMP)
    return float(_erank_from_energies(eig))


def erank_histogram(splats: SplatSet, bins: int = 50) -> ErankResult:
    """Per-splat erank from the squared scales plus a max-normalized
    histogram over [1, 2] and the median."""
    if splats.n < 1:
        raise ValueError("empty splat set")
    energies = np.exp(2.0 * splats.log_scales)  # rotation cancels
    energies = np.maximum(energies, _EIG_CLAMP)
    values = _erank_from_energies(energies)
    counts, edges = np.histogram(np.clip(values, 1.0, 2.0), bins=bins,
                                 range=(1.0, 2.0))
    peak = counts.max()
    heights = counts / peak if peak > 0 else counts.astype(float)
    return ErankResult(
        values=values,
        energies=energies,
        normalized=energies / energies.sum(axis=1, keepdims=True),
        median=float(np.median(values)),
        mean=float(values.mean()),
        bin_edges=edges,
        bin_counts=counts,
        bin_heights=heights,
    )


def histogram_as_text(result: ErankResult) -> str:
    """Two-column (bin center, max-normalized height) text, plot friendly."""
    centers = 0.5 * (result.bin_edges[:-1] + result.bin_edges[1:])
    lines = [f"{c:.6f} {h:.6f}" for c, h in zip(centers, result.bin_heights)]
    return "\n".join(lines) + "\n"


def compare_report(target, checkpoints: list, loss_cfg: LossConfig | None = None,
                   background=(0.0, 0.0, 0.0)) -> list:
    """Metric rows (splat count, PSNR, SSIM, pooled distortion, median erank)
    for each checkpoint path or SplatSet, rendered at the target size."""
    arr = as_image_array(target)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    h, w = arr.shape[:2]
    cfg = loss_cfg or LossConfig()
    rows = []
    for item in checkpoints:
        if isinstance(item, SplatSet):
            splats, name = item, f"<splatset n={item.n}>"
        else:
            splats, name = load_splats(item), str(item)
        img = render(splats, w, h, background).image.data
        rows.append(
            {
                "checkpoint": name,
                "splat_count": splats.n,
                "psnr": psnr(arr, img),
                "ssim": 1.0 - losses.loss_ssim(arr, img, cfg)[0],
                "wd_sigma0": losses.loss_wd(
                    arr, img, LossConfig(kind="wd", sigma=0.0, bank=cfg.bank))[0],
                "wd_sigma4": losses.loss_wd(
                    arr, img, LossConfig(kind="wd", sigma=4.0, bank=cfg.bank))[0],
                "median_erank": (erank_histogram(splats).median
                                 if splats.n else float("nan")),
            }
        )
    return rows


def report_to_csv(rows: list) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def report_to_json(rows: list) -> str:
    return json.dumps(rows, indent=2)
