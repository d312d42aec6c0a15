"""Scoring labeled sequences, equal error rate, and loss-map export."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import CorruptionMeta, LabeledSequence
from .masking import Mask, grid_mask
from .model import ModelParameters, PredictionGrid, predict_logits, probs_from_logits
from .scoring import AnomalyScore, LossMap, frame_nll

CORRUPTED = "corrupted"
NORMAL = "normal"


@dataclass(frozen=True)
class EvalConfig:
    scope: str = "masked_only"
    mask_seed: int = 0
    n_masks: int = 1
    mask_periods: tuple[int, int] = (4, 5)
    batch_size: int = 16


@dataclass(frozen=True)
class ScoredSequence:
    seq_id: int
    label: str
    score: AnomalyScore
    loss_map: LossMap
    corruption: CorruptionMeta | None = None


@dataclass(frozen=True)
class EvalReport:
    eer: float
    threshold_at_eer: float
    n_normal: int
    n_corrupted: int
    scope: str = ""
    checkpoint_id: str = ""

    @property
    def accuracy_at_eer(self) -> float:
        return 1.0 - self.eer

    def to_text(self) -> str:
        return "".join(f"{k}: {v}\n" for k, v in [
            ("eer", f"{self.eer:.6f}"),
            ("accuracy_at_eer", f"{self.accuracy_at_eer:.6f}"),
            ("threshold_at_eer", f"{self.threshold_at_eer:.6f}"),
            ("n_normal", self.n_normal),
            ("n_corrupted", self.n_corrupted),
            ("scope", self.scope),
            ("checkpoint", self.checkpoint_id),
        ])


def evaluation_masks(height: int, width: int, config: EvalConfig) -> list[Mask]:
    """The fixed masks every sequence is scored under."""
    rng = np.random.default_rng(config.mask_seed)
    return [grid_mask(height, width, *config.mask_periods, rng=rng) for _ in range(config.n_masks)]


def score_dataset(params: ModelParameters, dataset: Sequence[LabeledSequence],
                  config: EvalConfig = EvalConfig()) -> list[ScoredSequence]:
    """Score the last frame of every sequence given the frames before it."""
    if len(dataset) == 0:
        return []
    hyper = params.hyper
    t_len, h, w, c = dataset[0].frames.shape
    for i, seq in enumerate(dataset):
        if seq.frames.shape != (t_len, h, w, c):
            raise ValueError(f"sequence {i} has shape {seq.frames.shape}, expected {(t_len, h, w, c)}")
    if (h, w, c) != (hyper.height, hyper.width, hyper.channels):
        raise ValueError(f"data frames {(h, w, c)} do not match model "
                         f"{(hyper.height, hyper.width, hyper.channels)}")
    span = hyper.context_length
    if t_len - 1 < span:
        raise ValueError(f"sequences have {t_len} frames; model needs {span} context frames plus a target")
    masks = evaluation_masks(h, w, config)
    frames = np.stack([s.frames for s in dataset])
    context = frames[:, t_len - 1 - span:t_len - 1]
    target = frames[:, -1]
    maps = np.zeros((len(dataset), h, w))
    totals = np.zeros(len(dataset))
    counted = 0
    for mask in masks:
        masked = np.where(mask.visible[..., None], target, 0).astype(np.uint8)
        for lo in range(0, len(dataset), config.batch_size):
            sl = slice(lo, lo + config.batch_size)
            probs = probs_from_logits(predict_logits(context[sl], masked[sl], mask.visible, params))
            for k, p in enumerate(probs):
                lmap, score = frame_nll(PredictionGrid(p), target[lo + k], mask, config.scope)
                maps[lo + k] += lmap.nll
                totals[lo + k] += score.total_nll
        in_scope = mask.visible.size if config.scope == "all" else int((~mask.visible).sum())
        counted += in_scope * c
    out = []
    for i, seq in enumerate(dataset):
        score = AnomalyScore(float(totals[i]), float(totals[i]) / counted, counted, config.scope)
        out.append(ScoredSequence(i, seq.label, score, LossMap(maps[i] / len(masks)), seq.corruption))
    return out


# --- equal error rate ---------------------------------------------------------------

def _is_corrupted(label) -> bool:
    if isinstance(label, str):
        if label not in (NORMAL, CORRUPTED):
            raise ValueError(f"unknown label {label!r}")
        return label == CORRUPTED
    return bool(label)


def compute_eer(scores: Iterable[tuple[object, float]]) -> EvalReport:
    """Equal error rate of the rule "corrupted iff score >= threshold".

    Candidate thresholds are -inf, the midpoints between adjacent distinct
    scores, and +inf. If the false-positive and false-negative rates meet
    exactly at a candidate, that point is reported; otherwise both rates are
    interpolated linearly between the two candidates where their difference
    changes sign. Infinite bracket ends interpolate the threshold from the
    extreme observed score.
    """
    pairs = [(_is_corrupted(lab), float(s)) for lab, s in scores]
    neg = np.sort([s for c, s in pairs if not c])
    pos = np.sort([s for c, s in pairs if c])
    n_neg, n_pos = len(neg), len(pos)
    if n_neg == 0 or n_pos == 0:
        raise ValueError("EER needs at least one normal and one corrupted score")
    if not (np.all(np.isfinite(neg)) and np.all(np.isfinite(pos))):
        raise ValueError("scores must be finite")
    uniq = np.unique(np.concatenate([neg, pos]))
    thr = np.concatenate([[-np.inf], (uniq[:-1] + uniq[1:]) / 2, [np.inf]])
    fp = n_neg - np.searchsorted(neg, thr, side="left")  # normals flagged
    fn = np.searchsorted(pos, thr, side="left")  # corrupted missed
    sign = np.sign(fp * n_pos - fn * n_neg)  # sign of FPR - FNR, exact in integers
    fpr, fnr = fp / n_neg, fn / n_pos
    ends = thr.copy()
    ends[0], ends[-1] = uniq[0], uniq[-1]
    zero = np.flatnonzero(sign == 0)
    if zero.size:
        k = zero[0]
        return EvalReport(float(fpr[k]), float(ends[k]), n_neg, n_pos)
    b = int(np.flatnonzero(sign < 0)[0])
    a = b - 1
    da, db = fpr[a] - fnr[a], fpr[b] - fnr[b]
    alpha = da / (da - db)
    err_a, err_b = (fpr[a] + fnr[a]) / 2, (fpr[b] + fnr[b]) / 2
    return EvalReport(float(err_a + alpha * (err_b - err_a)),
                      float(ends[a] + alpha * (ends[b] - ends[a])), n_neg, n_pos)


def eer_from_scored(scored: Sequence[ScoredSequence], checkpoint_id: str = "") -> EvalReport:
    scopes = {s.score.scope for s in scored}
    if len(scopes) > 1:
        raise ValueError(f"mixed score scopes in one report: {sorted(scopes)}")
    report = compute_eer((s.label, s.score.mean_nll) for s in scored)
    return replace(report, scope=scopes.pop(), checkpoint_id=checkpoint_id)


# --- exports --------------------------------------------------------------------------

def loss_map_image(loss_map: LossMap) -> np.ndarray:
    """Min-max scale a loss map to uint8; constant maps become all zeros."""
    nll = np.asarray(loss_map.nll, dtype=np.float64)
    if not np.all(np.isfinite(nll)):
        raise ValueError("loss map contains non-finite values")
    lo, hi = nll.min(), nll.max()
    if hi <= lo:
        return np.zeros(nll.shape, np.uint8)
    return np.round((nll - lo) / (hi - lo) * 255).astype(np.uint8)


def export_loss_map(loss_map: LossMap, path) -> None:
    """Write a binary PGM (P5) with bright pixels where the loss is high."""
    img = loss_map_image(loss_map)
    h, w = img.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(img.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write loss map to {path}: {exc}") from exc


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a P5 file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    body = raw[len(raw) - w * h:]
    return np.frombuffer(body, np.uint8).reshape(h, w)


def square_region(meta: CorruptionMeta, height: int, width: int) -> tuple[slice, slice]:
    r, c = meta.square_row, meta.square_col
    return slice(max(r - 1, 0), min(r + 2, height)), slice(max(c - 1, 0), min(c + 2, width))


def localization_check(scored: ScoredSequence, twin: ScoredSequence) -> float:
    """Mean loss inside the blacked-out square relative to the clean twin."""
    meta = scored.corruption
    if meta is None or meta.kind not in ("spatial", "both") or meta.square_row < 0:
        raise ValueError("localization_check needs a spatially corrupted sequence with a recorded square")
    if scored.loss_map.nll.shape != twin.loss_map.nll.shape:
        raise ValueError("scored and twin loss maps differ in shape")
    region = square_region(meta, *scored.loss_map.nll.shape)
    inside = float(scored.loss_map.nll[region].mean())
    clean = float(twin.loss_map.nll[region].mean())
    eps = 1e-12
    return (inside + eps) / (clean + eps)


def write_scores(path, scored: Sequence[ScoredSequence]) -> None:
    lines = [f"{s.seq_id}\t{s.label}\t{s.score.mean_nll:.9g}\t{s.score.total_nll:.9g}\n" for s in scored]
    Path(path).write_text("".join(lines))


def read_scores(path) -> list[tuple[int, str, float, float]]:
    out = []
    for line in Path(path).read_text().splitlines():
        i, lab, mean, total = line.split("\t")
        out.append((int(i), lab, float(mean), float(total)))
    return out
