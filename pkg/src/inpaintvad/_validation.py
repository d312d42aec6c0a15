"""Input validation helpers shared by the estimator, trainer and evaluator."""
from __future__ import annotations

import numbers

import numpy as np


def check_random_state(seed) -> np.random.Generator:
    """Turn ``None``, an int, or a Generator into a ``np.random.Generator``."""
    if seed is None:
        return np.random.default_rng()
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (numbers.Integral, np.integer)):
        return np.random.default_rng(int(seed))
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    raise ValueError(f"{seed!r} cannot be used to seed a numpy Generator")


def check_intensities(values, name: str = "frame") -> np.ndarray:
    """Return ``values`` as uint8, rejecting anything outside [0, 255]."""
    arr = np.asarray(values)
    if arr.dtype == np.uint8:
        return arr
    if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 255):
        raise ValueError(f"{name} intensities must lie in [0, 255]")
    if arr.size and np.issubdtype(arr.dtype, np.floating) and not np.all(arr == np.round(arr)):
        raise ValueError(f"{name} intensities must be integers")
    return arr.astype(np.uint8)


def check_sequences(X, min_length: int = 2) -> np.ndarray:
    """Validate a batch of sequences and return it as ``[n, T, H, W, C]`` uint8.

    A 4-d input is read as single-channel ``[n, T, H, W]``.
    """
    arr = np.asarray(X)
    if arr.ndim == 4:
        arr = arr[..., None]
    if arr.ndim != 5:
        raise ValueError(f"expected sequences shaped [n, T, H, W] or [n, T, H, W, C], got {arr.shape}")
    if arr.shape[1] < min_length:
        raise ValueError(f"sequences need at least {min_length} frames, got {arr.shape[1]}")
    return check_intensities(arr, "sequence")


def check_frame(frame, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Validate one frame and return it as ``[H, W, C]`` uint8."""
    arr = np.asarray(frame)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValueError(f"expected a frame shaped [H, W] or [H, W, C], got {arr.shape}")
    if shape is not None and arr.shape[:2] != tuple(shape):
        raise ValueError(f"frame is {arr.shape[:2]}, expected {tuple(shape)}")
    return check_intensities(arr)
