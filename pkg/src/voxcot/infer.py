"""Sliding-window inference over full volumes, single-view or multi-view."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from . import losses
from .tensor import no_grad


def tile_starts(size: int, window: int, overlap: float) -> List[int]:
    """Start offsets covering [0, size) with roughly `overlap` fraction overlap."""
    if window > size:
        raise ValueError(f"window {window} larger than padded extent {size}")
    if window == size:
        return [0]
    stride = max(1, int(round(window * (1.0 - overlap))))
    starts = list(range(0, size - window + 1, stride))
    if starts[-1] != size - window:
        starts.append(size - window)
    return starts


def sliding_window_infer(models: Sequence, image: np.ndarray, window,
                         overlap: float = 0.5, mode: str = "single",
                         ensemble_mode: str = "mean") -> np.ndarray:
    """Tile a (D, H, W) image, average overlapping soft scores, argmax.

    mode 'single' uses models[0] only; 'ensemble' runs every view's
    predict_through_view per tile and fuses the accumulated per-view score
    maps with losses.ensemble.
    """
    if mode not in ("single", "ensemble"):
        raise ValueError(f"unknown inference mode {mode!r}")
    if not models:
        raise ValueError("need at least one model")
    active = list(models) if mode == "ensemble" else [models[0]]
    if mode == "ensemble" and len(active) < 2:
        raise ValueError("ensemble inference needs >= 2 views")
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ValueError(f"expected (D,H,W) image, got shape {image.shape}")
    if isinstance(window, int):
        window = (window, window, window)
    window = tuple(int(w) for w in window)
    if not (0.0 <= overlap < 1.0):
        raise ValueError("overlap must be in [0, 1)")

    orig = image.shape
    padded_shape = tuple(max(s, w) for s, w in zip(orig, window))
    if padded_shape != orig:
        padded = np.zeros(padded_shape, dtype=np.float32)
        padded[:orig[0], :orig[1], :orig[2]] = image
        image = padded

    num_classes = active[0].descriptor.num_classes
    canvases = np.zeros((len(active), num_classes) + image.shape, dtype=np.float64)
    counts = np.zeros(image.shape, dtype=np.float64)
    starts = [tile_starts(s, w, overlap) for s, w in zip(image.shape, window)]
    with no_grad():
        for i0 in starts[0]:
            for i1 in starts[1]:
                for i2 in starts[2]:
                    tile = image[i0:i0 + window[0], i1:i1 + window[1],
                                 i2:i2 + window[2]][None, None]
                    for vi, model in enumerate(active):
                        score = model.predict_through_view(tile, "eval").data[0]
                        canvases[vi, :, i0:i0 + window[0], i1:i1 + window[1],
                                 i2:i2 + window[2]] += score
                    counts[i0:i0 + window[0], i1:i1 + window[1],
                           i2:i2 + window[2]] += 1.0
    canvases /= counts[None, None]
    canvases = canvases[:, :, :orig[0], :orig[1], :orig[2]]
    if mode == "single":
        return np.argmax(canvases[0], axis=0).astype(np.int16)
    return losses.ensemble(list(canvases), mode=ensemble_mode)
