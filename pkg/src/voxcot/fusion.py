"""Epistemic uncertainty from MC-dropout samples and pseudo-label fusion.

Variance of K stochastic forward passes approximates the model's epistemic
uncertainty; its reciprocal serves as a confidence score. Pseudo-labels for
a view are the confidence-weighted average of the *other* views' mean
predictions (leave-one-out), so no view reinforces its own mistakes.
"""

from __future__ import annotations

import dataclasses
import warnings
from typing import List, Optional, Sequence

import numpy as np

from .rng import RngStream

CONFIDENCE_EPS = 1e-6


@dataclasses.dataclass
class UncertaintyReport:
    view_index: int
    voxelwise_variance: np.ndarray  # (D, H, W), class-summed, float64
    scalar_uncertainty: float
    confidence: float


@dataclasses.dataclass
class PseudoLabel:
    target_view_index: int
    soft_label: np.ndarray  # (C, D, H, W)
    weights: list  # [(source view index, normalized weight)]


def mc_sample_predictions(model, x, k: int, rng: RngStream):
    """K mc_sample passes through the model's view; returns (samples, mean).

    samples: (K, N, C, D, H, W); mean over the K axis. Each pass uses a
    distinct derived rng stream, so the set is reproducible from ``rng``
    regardless of evaluation order.
    """
    if k < 2:
        raise ValueError(f"mc sampling needs K >= 2, got {k}")
    if model.descriptor.dropout_p == 0.0 or not model.descriptor.dropout_sites:
        warnings.warn("mc_sample_predictions on a dropout-free model: "
                      "all samples will be identical")
    samples = model.mc_samples_through_view(x, k, rng)
    mean = samples.mean(axis=0, dtype=np.float64).astype(samples.dtype)
    return samples, mean


def epistemic_uncertainty(samples: np.ndarray,
                          view_index: int = 0) -> UncertaintyReport:
    """Population variance of K sampled score maps.

    samples: (K, C, D, H, W) for one volume. Voxelwise variance
    mean(y^2) - mean(y)^2 is computed per class in float64 (divide by K, not
    K-1), summed over classes for the voxelwise map, then summed over the
    volume for the scalar.
    """
    samples = np.asarray(samples)
    if samples.ndim != 5:
        raise ValueError(
            f"expected (K, C, D, H, W) samples, got shape {samples.shape}")
    k = samples.shape[0]
    if k < 2:
        raise ValueError(f"need K >= 2 samples, got {k}")
    s64 = samples.astype(np.float64, copy=False)
    var = np.mean(s64 * s64, axis=0) - np.square(np.mean(s64, axis=0))
    np.maximum(var, 0.0, out=var)  # guard cancellation residue
    voxelwise = var.sum(axis=0)  # class sum -> (D, H, W)
    scalar = float(voxelwise.sum())
    return UncertaintyReport(view_index=view_index,
                             voxelwise_variance=voxelwise,
                             scalar_uncertainty=scalar,
                             confidence=confidence(scalar))


def confidence(u: float) -> float:
    """Reciprocal confidence transform c = 1 / (u + eps)."""
    if u < 0:
        raise ValueError(f"uncertainty cannot be negative, got {u}")
    return 1.0 / (u + CONFIDENCE_EPS)


def fuse_pseudo_label(target_view: int,
                      predictions: Sequence[np.ndarray],
                      confidences: Optional[Sequence[float]],
                      mode: str = "ulf") -> PseudoLabel:
    """Leave-one-out confidence-weighted average of the other views' predictions.

    predictions: per-view mean score maps, each (C, D, H, W), canonical frame.
    confidences: per-view positive scalars (ignored in ``uniform`` mode).
    """
    n = len(predictions)
    if n < 2:
        raise ValueError("pseudo-label fusion needs >= 2 views")
    if not (0 <= target_view < n):
        raise ValueError(f"target view {target_view} out of range [0, {n})")
    if mode not in ("ulf", "uniform"):
        raise ValueError(f"unknown fusion mode {mode!r} (expected ulf|uniform)")
    sources = [j for j in range(n) if j != target_view]
    if mode == "uniform":
        raw = {j: 1.0 for j in sources}
    else:
        if confidences is None or len(confidences) != n:
            raise ValueError("ulf fusion needs one confidence per view")
        raw = {}
        for j in sources:
            c = float(confidences[j])
            if c <= 0:
                raise ValueError(f"confidence for view {j} must be positive, got {c}")
            raw[j] = c
    total = sum(raw.values())
    weights = [(j, raw[j] / total) for j in sources]
    shape = np.asarray(predictions[sources[0]]).shape
    fused = np.zeros(shape, dtype=np.float64)
    for j, w in weights:
        pj = np.asarray(predictions[j])
        if pj.shape != shape:
            raise ValueError(
                f"prediction shape mismatch: view {j} has {pj.shape}, expected {shape}")
        fused += w * pj.astype(np.float64, copy=False)
    fused = fused.astype(np.asarray(predictions[sources[0]]).dtype, copy=False)
    return PseudoLabel(target_view_index=target_view, soft_label=fused,
                       weights=weights)


def report_csv_header() -> str:
    return "iteration,sample,view,scalar_uncertainty,confidence"


def report_csv_row(iteration: int, sample: int, rep: UncertaintyReport) -> str:
    return (f"{iteration},{sample},{rep.view_index},"
            f"{rep.scalar_uncertainty:.9e},{rep.confidence:.9e}")
