"""Moving-digit sequences, corruption injectors and the on-disk formats.

Two containers are handled here: the big-endian IDX3 image files that MNIST
ships in, and ``MMSQ``, a little-endian sequence dataset::

    header   : b"MMSQ" | u32 version | u32 count | u32 T | u32 H | u32 W | u32 C
    per item : u8 label (0 normal, 1 corrupted) | u8 kind (0 none, 1 temporal,
               2 spatial, 3 both) | i32 square_row | i32 square_col |
               T*H*W*C raw uint8 frame bytes
"""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from ._validation import check_random_state

IDX3_MAGIC = 0x00000803
IDX1_MAGIC = 0x00000801
MMSQ_MAGIC = b"MMSQ"
MMSQ_VERSION = 1
SPRITE_SIZE = 28
LIT = 128

_KIND_CODES = {None: 0, "temporal": 1, "spatial": 2, "both": 3}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_MMSQ_HEADER = struct.Struct("<4s6I")
_MMSQ_RECORD = struct.Struct("<BBii")


class FormatError(ValueError):
    """A dataset or sprite file is malformed."""


@dataclass(frozen=True)
class Sprite:
    pixels: np.ndarray  # [28, 28] uint8
    label: int = -1

    def __post_init__(self):
        if self.pixels.shape != (SPRITE_SIZE, SPRITE_SIZE):
            raise ValueError(f"sprites are {SPRITE_SIZE}x{SPRITE_SIZE}, got {self.pixels.shape}")


@dataclass(frozen=True)
class Trajectory:
    positions: np.ndarray  # [T, 2] real top-left (row, col)
    velocities: np.ndarray  # [T, 2] velocity used to leave each position


@dataclass(frozen=True)
class CorruptionMeta:
    kind: str  # temporal | spatial | both
    square_row: int = -1
    square_col: int = -1


@dataclass(frozen=True)
class LabeledSequence:
    frames: np.ndarray  # [T, H, W, C] uint8
    label: str = "normal"
    corruption: CorruptionMeta | None = None
    trajectories: tuple[Trajectory, ...] = field(default=(), compare=False, repr=False)

    @property
    def is_normal(self) -> bool:
        return self.label == "normal"

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledSequence):
            return NotImplemented
        return (self.label == other.label and self.corruption == other.corruption
                and self.frames.shape == other.frames.shape
                and np.array_equal(self.frames, other.frames))


@dataclass(frozen=True)
class GeneratorConfig:
    frame_size: int = 64
    n_frames: int = 20
    n_digits: int = 2
    speed_range: tuple[float, float] = (2.0, 4.0)
    sprite_size: int = SPRITE_SIZE

    def __post_init__(self):
        lo, hi = self.speed_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad speed range {self.speed_range}")
        if self.n_frames < 2 or self.n_digits < 1:
            raise ValueError("need n_frames >= 2 and n_digits >= 1")
        if self.sprite_size > self.frame_size:
            raise ValueError(f"sprite size {self.sprite_size} exceeds frame size {self.frame_size}")


# --- sprites ---------------------------------------------------------------------

def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx_images(path) -> np.ndarray:
    """Parse an IDX3 ubyte image file into ``[count, rows, cols]`` uint8."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated IDX header ({len(raw)} bytes, need 16 at offset 0)")
    magic, count, rows, cols = struct.unpack(">4I", raw[:16])
    if magic != IDX3_MAGIC:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x} at offset 0, expected 0x{IDX3_MAGIC:08x}")
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise FormatError(f"{path}: truncated pixel data, file ends at offset {len(raw)}, expected {need}")
    return np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX header ({len(raw)} bytes, need 8 at offset 0)")
    magic, count = struct.unpack(">2I", raw[:8])
    if magic != IDX1_MAGIC:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x} at offset 0, expected 0x{IDX1_MAGIC:08x}")
    if len(raw) < 8 + count:
        raise FormatError(f"{path}: truncated label data, file ends at offset {len(raw)}, expected {8 + count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).copy()


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"expected [count, rows, cols], got {images.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX3_MAGIC, *images.shape))
        fh.write(images.tobytes())


# seven-segment skeleton on a 28x28 canvas: (r0, c0, r1, c1)
_SEGMENTS = {
    "a": (5, 8, 5, 19), "b": (5, 19, 13.5, 19), "c": (13.5, 19, 22, 19), "d": (22, 8, 22, 19),
    "e": (13.5, 8, 22, 8), "f": (5, 8, 13.5, 8), "g": (13.5, 8, 13.5, 19),
}
_DIGIT_SEGMENTS = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"]


def _draw_segments(segments, radius: float = 2.5) -> np.ndarray:
    rr, cc = np.mgrid[0:SPRITE_SIZE, 0:SPRITE_SIZE].astype(float)
    dist = np.full((SPRITE_SIZE, SPRITE_SIZE), np.inf)
    for r0, c0, r1, c1 in segments:
        dr, dc = r1 - r0, c1 - c0
        t = np.clip(((rr - r0) * dr + (cc - c0) * dc) / (dr * dr + dc * dc), 0.0, 1.0)
        dist = np.minimum(dist, np.hypot(rr - (r0 + t * dr), cc - (c0 + t * dc)))
    return np.round(255 * np.clip(radius + 0.5 - dist, 0.0, 1.0)).astype(np.uint8)


def procedural_sprites() -> list[Sprite]:
    """Ten thick-stroke digit glyphs, used when no MNIST file is available."""
    return [Sprite(_draw_segments([_SEGMENTS[s] for s in segs]), label=d)
            for d, segs in enumerate(_DIGIT_SEGMENTS)]


def load_sprites(path=None, labels_path=None) -> list[Sprite]:
    """Read MNIST-style sprites from an IDX3 file, or the procedural set if ``path`` is None."""
    if path is None:
        return procedural_sprites()
    images = read_idx_images(path)
    if images.shape[1:] != (SPRITE_SIZE, SPRITE_SIZE):
        raise FormatError(f"{path}: images are {images.shape[1:]}, expected 28x28")
    labels = read_idx_labels(labels_path) if labels_path is not None else np.full(len(images), -1)
    if len(labels) != len(images):
        raise FormatError(f"{labels_path}: {len(labels)} labels for {len(images)} images")
    return [Sprite(img.copy(), int(lab)) for img, lab in zip(images, labels)]


def resize_sprite(pixels: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resampling to ``size`` x ``size``.

    Interpolating would smear stroke edges into intermediate grey levels
    (a 2x bilinear shrink of the built-in glyphs turns 8% of lit pixels
    into 35%); sampling keeps the sprite's own intensity distribution.
    """
    if size == pixels.shape[0]:
        return pixels
    out = ndimage.zoom(pixels.astype(np.float64), size / pixels.shape[0], order=0, grid_mode=True,
                       mode="grid-constant")
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


# --- motion ----------------------------------------------------------------------

def reflect(pos: float, vel: float, limit: float) -> tuple[float, float]:
    """Elastic reflection of a coordinate into ``[0, limit]``."""
    if limit <= 0:
        return 0.0, vel
    while pos < 0 or pos > limit:
        if pos < 0:
            pos, vel = -pos, -vel
        else:
            pos, vel = 2 * limit - pos, -vel
    return pos, vel


def simulate_trajectory(start, velocity, n_frames: int, limit: float) -> Trajectory:
    pos = np.array(start, dtype=float)
    vel = np.array(velocity, dtype=float)
    positions = np.empty((n_frames, 2))
    velocities = np.empty((n_frames, 2))
    for t in range(n_frames):
        positions[t] = pos
        velocities[t] = vel
        for ax in range(2):
            pos[ax], vel[ax] = reflect(pos[ax] + vel[ax], vel[ax], limit)
    return Trajectory(positions, velocities)


def pixel_position(pos) -> np.ndarray:
    """Round a real top-left corner to pixels, halves rounding up."""
    return np.floor(np.asarray(pos) + 0.5).astype(int)


def render(sprites: Sequence[np.ndarray], trajectories: Sequence[Trajectory], frame_size: int) -> np.ndarray:
    n_frames = len(trajectories[0].positions)
    frames = np.zeros((n_frames, frame_size, frame_size), dtype=np.uint8)
    for img, traj in zip(sprites, trajectories):
        s = img.shape[0]
        for t, (r, c) in enumerate(pixel_position(traj.positions)):
            np.maximum(frames[t, r:r + s, c:c + s], img, out=frames[t, r:r + s, c:c + s])
    return frames[..., None]


def generate_sequence(sprites: Sequence[Sprite], rng=None, config: GeneratorConfig = GeneratorConfig()) -> LabeledSequence:
    """Render the given sprites bouncing around the frame at constant speed."""
    rng = check_random_state(rng)
    imgs = [resize_sprite(sp.pixels, config.sprite_size) for sp in sprites]
    limit = config.frame_size - config.sprite_size
    if limit < 0:
        raise ValueError(f"sprite size {config.sprite_size} exceeds frame size {config.frame_size}")
    trajs = []
    for _ in imgs:
        start = rng.uniform(0, limit, size=2)
        angle = rng.uniform(0, 2 * math.pi)
        speed = rng.uniform(*config.speed_range)
        trajs.append(simulate_trajectory(start, (speed * math.sin(angle), speed * math.cos(angle)),
                                         config.n_frames, limit))
    return LabeledSequence(render(imgs, trajs, config.frame_size), trajectories=tuple(trajs))


def _pick_sprites(pool: Sequence[Sprite], k: int, rng: np.random.Generator) -> list[Sprite]:
    return [pool[i] for i in rng.integers(len(pool), size=k)]


def generate_dataset(n: int, seed: int, sprites: Sequence[Sprite] | None = None,
                     config: GeneratorConfig = GeneratorConfig()) -> list[LabeledSequence]:
    """``n`` normal sequences, each drawn from its own child seed."""
    pool = procedural_sprites() if sprites is None else sprites
    out = []
    for child in np.random.SeedSequence(seed).spawn(n):
        rng = np.random.default_rng(child)
        out.append(generate_sequence(_pick_sprites(pool, config.n_digits, rng), rng, config))
    return out


# --- corruptions -----------------------------------------------------------------

def _merge_kind(old: CorruptionMeta | None, new: str) -> str:
    if old is None or old.kind == new:
        return new
    return "both"


def corrupt_temporal(seq: LabeledSequence) -> LabeledSequence:
    """Overwrite the last frame with a copy of the first."""
    if seq.corruption is not None and seq.corruption.kind in ("temporal", "both"):
        raise ValueError("sequence already carries a temporal corruption")
    frames = seq.frames.copy()
    frames[-1] = frames[0]
    old = seq.corruption
    meta = CorruptionMeta(_merge_kind(old, "temporal"),
                          old.square_row if old else -1, old.square_col if old else -1)
    return replace(seq, frames=frames, label="corrupted", corruption=meta)


def corrupt_spatial(seq: LabeledSequence, rng=None) -> LabeledSequence:
    """Black out a 3x3 square centred on a random lit pixel of the last frame."""
    if seq.corruption is not None and seq.corruption.kind in ("spatial", "both"):
        raise ValueError("sequence already carries a spatial corruption")
    rng = check_random_state(rng)
    last = seq.frames[-1].max(axis=-1)
    lit = np.argwhere(last >= LIT)
    if len(lit) == 0:
        raise ValueError(f"last frame has no pixel with intensity >= {LIT} to corrupt")
    r, c = (int(v) for v in lit[rng.integers(len(lit))])
    frames = seq.frames.copy()
    frames[-1, max(r - 1, 0):r + 2, max(c - 1, 0):c + 2] = 0
    meta = CorruptionMeta(_merge_kind(seq.corruption, "spatial"), r, c)
    return replace(seq, frames=frames, label="corrupted", corruption=meta)


CORRUPTION_MODES = ("both", "temporal", "spatial", "mixed")


def corrupt(seq: LabeledSequence, kind: str, rng) -> LabeledSequence:
    if kind == "temporal":
        return corrupt_temporal(seq)
    if kind == "spatial":
        return corrupt_spatial(seq, rng)
    if kind == "both":
        return corrupt_spatial(corrupt_temporal(seq), rng)
    raise ValueError(f"unknown corruption kind {kind!r}")


def build_test_set(n_normal: int, n_corrupted: int, seed: int, sprites: Sequence[Sprite] | None = None,
                   config: GeneratorConfig = GeneratorConfig(), mode: str = "both") -> list[LabeledSequence]:
    """Normals followed by corrupted sequences.

    ``mode='both'`` swaps the last frame for the first and then paints the
    square on it; ``'mixed'`` alternates temporal-only and spatial-only.
    """
    if n_normal < 0 or n_corrupted < 0:
        raise ValueError("counts must be non-negative")
    if mode not in CORRUPTION_MODES:
        raise ValueError(f"mode must be one of {CORRUPTION_MODES}, got {mode!r}")
    seqs = generate_dataset(n_normal + n_corrupted, seed, sprites, config)
    # corruption draws use their own stream so normals match generate_dataset(seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    out = seqs[:n_normal]
    for i, seq in enumerate(seqs[n_normal:]):
        kind = ("temporal", "spatial")[i % 2] if mode == "mixed" else mode
        out.append(corrupt(seq, kind, rng))
    return out


# --- MMSQ container --------------------------------------------------------------

def write_sequences(path, sequences: Sequence[LabeledSequence], frame_shape=None) -> None:
    """Write sequences to an MMSQ file. ``frame_shape`` (T, H, W, C) is needed only when empty."""
    if sequences:
        shape = sequences[0].frames.shape
    elif frame_shape is not None:
        shape = tuple(frame_shape)
    else:
        raise ValueError("frame_shape is required to write an empty dataset")
    if len(shape) != 4:
        raise ValueError(f"frame shape must be (T, H, W, C), got {shape}")
    chunks = [_MMSQ_HEADER.pack(MMSQ_MAGIC, MMSQ_VERSION, len(sequences), *shape)]
    for seq in sequences:
        if seq.frames.shape != shape:
            raise ValueError(f"sequence shape {seq.frames.shape} differs from {shape}")
        meta = seq.corruption
        chunks.append(_MMSQ_RECORD.pack(0 if seq.is_normal else 1, _KIND_CODES[meta.kind if meta else None],
                                        meta.square_row if meta else -1, meta.square_col if meta else -1))
        chunks.append(np.ascontiguousarray(seq.frames, dtype=np.uint8).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def parse_sequences(raw: bytes, source: str = "<bytes>") -> tuple[list[LabeledSequence], tuple[int, ...]]:
    if len(raw) < _MMSQ_HEADER.size:
        raise FormatError(f"{source}: truncated header ({len(raw)} bytes, need {_MMSQ_HEADER.size} at offset 0)")
    magic, version, count, *shape = _MMSQ_HEADER.unpack_from(raw, 0)
    if magic != MMSQ_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at offset 0, expected {MMSQ_MAGIC!r}")
    if version != MMSQ_VERSION:
        raise FormatError(f"{source}: unsupported version {version} at offset 4")
    shape = tuple(shape)
    n_bytes = int(np.prod(shape))
    offset = _MMSQ_HEADER.size
    out = []
    for i in range(count):
        end = offset + _MMSQ_RECORD.size + n_bytes
        if len(raw) < end:
            raise FormatError(f"{source}: truncated at record {i}, offset {offset} (file is {len(raw)} bytes)")
        label, kind, row, col = _MMSQ_RECORD.unpack_from(raw, offset)
        if label not in (0, 1) or kind not in _KIND_NAMES or (label == 0) != (kind == 0):
            raise FormatError(f"{source}: bad label/kind ({label}, {kind}) at offset {offset}")
        frames = np.frombuffer(raw, np.uint8, n_bytes, offset + _MMSQ_RECORD.size).reshape(shape).copy()
        meta = None if kind == 0 else CorruptionMeta(_KIND_NAMES[kind], row, col)
        out.append(LabeledSequence(frames, "normal" if label == 0 else "corrupted", meta))
        offset = end
    if offset != len(raw):
        raise FormatError(f"{source}: {len(raw) - offset} trailing bytes at offset {offset}")
    return out, shape


def read_sequences(path) -> list[LabeledSequence]:
    return parse_sequences(Path(path).read_bytes(), str(path))[0]


def stack_frames(sequences: Sequence[LabeledSequence]) -> np.ndarray:
    return np.stack([s.frames for s in sequences]) if sequences else np.zeros((0, 2, 1, 1, 1), np.uint8)
