"""Per-pixel negative log-likelihood, loss maps and frame anomaly scores."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from ._validation import check_frame
from .masking import Mask
from .model import PredictionGrid
from .tensor import PROB_FLOOR, Tensor

SCOPES = ("all", "masked_only")


@dataclass(frozen=True)
class LossMap:
    nll: np.ndarray  # [H, W], summed over channels

    @property
    def height(self) -> int:
        return self.nll.shape[0]

    @property
    def width(self) -> int:
        return self.nll.shape[1]


@dataclass(frozen=True)
class AnomalyScore:
    total_nll: float
    mean_nll: float
    pixels_counted: int  # pixel-channel terms in scope
    scope: str


def _check_scope(scope: str) -> str:
    if scope == "masked":
        scope = "masked_only"
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    return scope


def quantize_intensity(value, n_bins: int = 256):
    """Map an intensity to its bin index.

    Integers are read on the 0..255 scale and map to ``floor(v * K / 256)``;
    floats are read on [0, 1] and map to ``min(floor(v * K), K - 1)``.
    Works elementwise on arrays.
    """
    if not 2 <= n_bins <= 256:
        raise ValueError(f"n_bins must be in [2, 256], got {n_bins}")
    arr = np.asarray(value)
    if np.issubdtype(arr.dtype, np.floating):
        if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1):
            raise ValueError("real intensities must lie in [0, 1]")
        bins = np.minimum(np.floor(arr * n_bins), n_bins - 1).astype(np.int64)
    elif np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("integer intensities must lie in [0, 255]")
        bins = arr.astype(np.int64) * n_bins // 256
    else:
        raise ValueError(f"cannot quantize values of dtype {arr.dtype}")
    return int(bins) if bins.ndim == 0 else bins


def frame_nll(pred: PredictionGrid, truth, mask: Mask, scope: str = "masked_only"):
    """Loss map and frame score under ``-sum log max(p, 1e-12)``.

    The loss map always covers every pixel; ``scope`` only decides which
    pixels enter the aggregate score.
    """
    scope = _check_scope(scope)
    probs = np.asarray(pred.probs)
    h, w, c, k = probs.shape
    truth = check_frame(truth, (h, w))
    if truth.shape[2] != c:
        raise ValueError(f"truth has {truth.shape[2]} channels, prediction has {c}")
    if (mask.height, mask.width) != (h, w):
        raise ValueError(f"mask ({mask.height}, {mask.width}) does not match prediction ({h}, {w})")
    bins = quantize_intensity(truth, k)
    p = np.take_along_axis(probs, bins[..., None], axis=-1)[..., 0]
    # scores are accumulated in double precision whatever the model runs in
    terms = -np.log(np.maximum(p.astype(np.float64), PROB_FLOOR))
    loss_map = LossMap(terms.sum(axis=-1))
    return loss_map, aggregate(loss_map, mask, scope, c)


def aggregate(loss_map: LossMap, mask: Mask, scope: str = "masked_only", channels: int = 1) -> AnomalyScore:
    scope = _check_scope(scope)
    if scope == "all":
        total = float(loss_map.nll.sum(dtype=np.float64))
        counted = loss_map.nll.size * channels
    else:
        hidden = ~mask.visible
        total = float(loss_map.nll[hidden].sum(dtype=np.float64))
        counted = int(hidden.sum()) * channels
    mean = total / counted if counted else 0.0
    return AnomalyScore(total, mean, counted, scope)


def training_loss(logits: Tensor, target_bins: np.ndarray, visible: np.ndarray,
                  scope: str = "all") -> Tensor:
    """Mean NLL per pixel-channel term over a batch, differentiable in ``logits``.

    ``logits`` is ``[N, C, K, H, W]``, ``target_bins`` ``[N, C, H, W]`` and
    ``visible`` ``[N, H, W]`` booleans.
    """
    scope = _check_scope(scope)
    terms = T.nll_terms(logits, target_bins, axis=2)
    if scope == "all":
        return terms.mean()
    hidden = ~np.asarray(visible, dtype=bool)
    weight = np.broadcast_to(hidden[:, None], terms.shape).astype(terms.dtype)
    count = weight.sum()
    if count == 0:
        raise ValueError("masked_only loss with no masked pixels")
    return (terms * Tensor(weight / count)).sum()
