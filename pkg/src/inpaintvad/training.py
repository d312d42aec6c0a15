"""Fit the detector's parameters on anomaly-free sequences."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from ._validation import check_sequences
from .checkpoint import save_checkpoint
from .data import LabeledSequence
from .masking import grid_mask
from .model import ModelHyper, ModelParameters, init_params, predict_logits
from .scoring import quantize_intensity, training_loss

logger = logging.getLogger(__name__)

ALLOWED_BINS = (32, 64, 128, 256)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    steps: int = 1000
    seed: int = 0
    context_length: int = 9
    mask_periods: tuple[int, int] = (4, 5)
    n_bins: int = 256
    hidden: int = 32
    precision: str = "float32"
    checkpoint_interval: int = 500
    log_interval: int = 50
    loss_scope: str = "all"
    use_attention: bool = True
    use_masked_frame: bool = True

    def __post_init__(self):
        if self.learning_rate < 0 or self.steps < 0:
            raise ValueError("learning_rate and steps must be non-negative")
        for name in ("batch_size", "context_length", "hidden", "checkpoint_interval", "log_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_bins not in ALLOWED_BINS:
            raise ValueError(f"n_bins must be one of {ALLOWED_BINS}, got {self.n_bins}")
        if min(self.mask_periods) < 1:
            raise ValueError(f"mask periods must be positive, got {self.mask_periods}")
        if self.loss_scope not in ("all", "masked_only"):
            raise ValueError(f"loss_scope must be 'all' or 'masked_only', got {self.loss_scope!r}")

    def hyper(self, height: int, width: int, channels: int) -> ModelHyper:
        return ModelHyper(height=height, width=width, channels=channels, hidden=self.hidden,
                          context_length=self.context_length, n_bins=self.n_bins,
                          use_attention=self.use_attention, use_masked_frame=self.use_masked_frame,
                          precision=self.precision)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainLogRecord:
    step: int
    nll: float  # mean per pixel-channel term
    wall_ms: float
    grad_norm: float

    def to_line(self) -> str:
        return f"{self.step}\t{self.nll:.6f}\t{self.wall_ms:.1f}\t{self.grad_norm:.6g}"


@dataclass
class Adam:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: ModelParameters) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params:
            g = p.grad
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.learning_rate / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)


def _as_frames(dataset) -> np.ndarray:
    if len(dataset) == 0:
        raise ValueError("training needs at least one sequence")
    if isinstance(dataset[0], LabeledSequence):
        bad = [i for i, s in enumerate(dataset) if not s.is_normal]
        if bad:
            raise ValueError(f"training data must be anomaly-free; sequence {bad[0]} is labeled corrupted")
        return check_sequences(np.stack([s.frames for s in dataset]))
    return check_sequences(dataset)


def sample_batch(frames: np.ndarray, config: TrainConfig, rng: np.random.Generator):
    """Random (sequence, window start, mask) triples -> model inputs and targets."""
    n, t_len, h, w, _ = frames.shape
    span = config.context_length + 1
    if t_len < span:
        raise ValueError(f"sequences have {t_len} frames, windows need {span}")
    idx = rng.integers(n, size=config.batch_size)
    starts = rng.integers(t_len - span + 1, size=config.batch_size)
    visible = np.stack([grid_mask(h, w, *config.mask_periods, rng=rng).visible
                        for _ in range(config.batch_size)])
    offsets = starts[:, None] + np.arange(span)
    windows = frames[idx[:, None], offsets]
    context, target = windows[:, :-1], windows[:, -1]
    masked = np.where(visible[..., None], target, 0).astype(np.uint8)
    return context, masked, visible, target


def loss_and_grad(params: ModelParameters, context, masked, visible, target, scope: str) -> float:
    """One forward/backward pass; gradients land on ``params``."""
    params.zero_grad()
    logits = predict_logits(context, masked, visible, params)
    bins = quantize_intensity(target, params.hyper.n_bins).transpose(0, 3, 1, 2)
    loss = training_loss(logits, bins, visible, scope)
    T.backward(loss)
    return loss.item()


def _grad_norm(params: ModelParameters) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                             for _, p in params if p.grad is not None)))


def save_train_state(path, params: ModelParameters, opt: Adam, rng: np.random.Generator, step: int) -> None:
    """Everything needed to resume bit-exactly: params, Adam moments, RNG, step."""
    path = Path(path)
    arrays = {f"param/{k}": v.data for k, v in params}
    arrays.update({f"m/{k}": v for k, v in opt.m.items()})
    arrays.update({f"v/{k}": v for k, v in opt.v.items()})
    meta = {"step": step, "adam_t": opt.t, "rng": rng.bit_generator.state, "hyper": params.hyper.to_dict()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), np.uint8), **arrays)


def _load_train_state(path, config: TrainConfig):
    with np.load(path) as z:
        meta = json.loads(z["__meta__"].tobytes())
        hyper = ModelHyper(**meta["hyper"])
        params = ModelParameters(hyper, {k[6:]: T.Tensor(z[k], requires_grad=True)
                                         for k in z.files if k.startswith("param/")})
        opt = Adam(config.learning_rate, t=meta["adam_t"],
                   m={k[2:]: z[k].copy() for k in z.files if k.startswith("m/")},
                   v={k[2:]: z[k].copy() for k in z.files if k.startswith("v/")})
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return params, opt, rng, meta["step"]


def train(config: TrainConfig, dataset: Sequence[LabeledSequence] | np.ndarray, *,
          log_path=None, checkpoint_path=None, state_path=None, resume_from=None,
          callback: Callable[[TrainLogRecord], None] | None = None):
    """Adam on the masked-inpainting NLL.

    Returns ``(params, records)``. ``dataset`` is a list of normal
    :class:`LabeledSequence` or a uint8 array ``[n, T, H, W(, C)]``. With
    ``checkpoint_path`` the parameters are written every
    ``checkpoint_interval`` steps and at the end; ``state_path`` does the same
    for the resumable training state consumed by ``resume_from``.
    """
    frames = _as_frames(dataset)
    _, _, h, w, c = frames.shape
    hyper = config.hyper(h, w, c)
    if resume_from is not None:
        params, opt, rng, start = _load_train_state(resume_from, config)
        if params.hyper != hyper:
            raise ValueError("resume state was produced with different model hyperparameters")
    else:
        params = init_params(hyper, np.random.default_rng(np.random.SeedSequence([config.seed, 0])))
        opt = Adam(config.learning_rate)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        start = 0
    records: list[TrainLogRecord] = []
    log_fh = open(log_path, "a") if log_path is not None else None
    try:
        for step in range(start + 1, config.steps + 1):
            tic = time.perf_counter()
            batch = sample_batch(frames, config, rng)
            nll = loss_and_grad(params, *batch, config.loss_scope)
            gnorm = _grad_norm(params)
            opt.step(params)
            if step % config.log_interval == 0 or step == config.steps:
                rec = TrainLogRecord(step, nll, (time.perf_counter() - tic) * 1e3, gnorm)
                records.append(rec)
                logger.info("step %d nll %.4f grad %.3g", step, nll, gnorm)
                if log_fh is not None:
                    log_fh.write(rec.to_line() + "\n")
                    log_fh.flush()
                if callback is not None:
                    callback(rec)
            if step % config.checkpoint_interval == 0 or step == config.steps:
                params.check_finite()
                if checkpoint_path is not None:
                    save_checkpoint(params, checkpoint_path)
                if state_path is not None:
                    save_train_state(state_path, params, opt, rng, step)
    finally:
        if log_fh is not None:
            log_fh.close()
    params.zero_grad()
    if checkpoint_path is not None and config.steps == 0:
        save_checkpoint(params, checkpoint_path)
    return params, records


def read_log(path) -> list[TrainLogRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        step, nll, ms, gn = line.split("\t")
        out.append(TrainLogRecord(int(step), float(nll), float(ms), float(gn)))
    return out
