"""Shifted-lattice occlusion masks for the frame being reconstructed."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_random_state

DEFAULT_PERIODS = (4, 5)
FILL_VALUE = 0


@dataclass(frozen=True)
class Mask:
    """Visibility grid: ``visible[i, j]`` is True where the pixel is revealed."""

    height: int
    width: int
    period_rows: int
    period_cols: int
    shift_row: int
    shift_col: int
    visible: np.ndarray = field(repr=False, compare=False)

    @property
    def masked_fraction(self) -> float:
        return 1.0 - float(self.visible.sum()) / (self.height * self.width)

    @property
    def n_visible(self) -> int:
        return int(self.visible.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mask):
            return NotImplemented
        return (self.height, self.width) == (other.height, other.width) and np.array_equal(
            self.visible, other.visible
        )


@dataclass(frozen=True)
class MaskedFrame:
    values: np.ndarray  # [H, W, C], masked entries hold FILL_VALUE
    mask: Mask


def lattice(height: int, width: int, period_rows: int, period_cols: int,
            shift_row: int = 0, shift_col: int = 0) -> Mask:
    """Deterministic lattice mask with the given offsets."""
    if period_rows < 1 or period_cols < 1:
        raise ValueError(f"mask periods must be >= 1, got ({period_rows}, {period_cols})")
    if period_rows > height or period_cols > width:
        raise ValueError(
            f"mask periods ({period_rows}, {period_cols}) exceed frame size ({height}, {width})"
        )
    if not (0 <= shift_row < period_rows and 0 <= shift_col < period_cols):
        raise ValueError(f"shifts ({shift_row}, {shift_col}) outside [0, period)")
    rows = (np.arange(height) % period_rows) == shift_row
    cols = (np.arange(width) % period_cols) == shift_col
    visible = rows[:, None] & cols[None, :]
    visible.setflags(write=False)
    return Mask(height, width, period_rows, period_cols, shift_row, shift_col, visible)


def grid_mask(height: int, width: int, period_rows: int = DEFAULT_PERIODS[0],
              period_cols: int = DEFAULT_PERIODS[1], rng=None) -> Mask:
    """Lattice mask with independent uniform integer shifts in ``[0, period)``."""
    if period_rows < 1 or period_cols < 1:
        raise ValueError(f"mask periods must be >= 1, got ({period_rows}, {period_cols})")
    if period_rows > height or period_cols > width:
        raise ValueError(
            f"mask periods ({period_rows}, {period_cols}) exceed frame size ({height}, {width})"
        )
    rng = check_random_state(rng)
    shift_row = int(rng.integers(period_rows))
    shift_col = int(rng.integers(period_cols))
    return lattice(height, width, period_rows, period_cols, shift_row, shift_col)


def apply_mask(frame: np.ndarray, mask: Mask) -> MaskedFrame:
    """Zero every occluded pixel of ``frame`` (``[H, W]`` or ``[H, W, C]``)."""
    frame = np.asarray(frame)
    if frame.shape[:2] != (mask.height, mask.width):
        raise ValueError(
            f"frame shape {frame.shape[:2]} does not match mask ({mask.height}, {mask.width})"
        )
    vis = mask.visible if frame.ndim == 2 else mask.visible[..., None]
    values = np.where(vis, frame, np.zeros((), dtype=frame.dtype) + FILL_VALUE)
    return MaskedFrame(values, mask)
