"""scikit-learn style wrapper around training and scoring."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_sequences
from .checkpoint import load_checkpoint, save_checkpoint
from .data import LabeledSequence
from .evaluation import EvalConfig, score_dataset
from .training import TrainConfig, train


class InpaintingAnomalyDetector(OutlierMixin, BaseEstimator):
    """Semi-supervised video anomaly detector.

    Fit on anomaly-free sequences shaped ``[n, T, H, W]`` or
    ``[n, T, H, W, C]`` (uint8). The last frame of each sequence is scored by
    the mean negative log-likelihood of its occluded pixels, predicted from
    the frames before it and the few pixels left visible.

    Following scikit-learn's outlier convention, :meth:`score_samples` is
    the *negated* NLL (higher means more normal) and :meth:`predict` returns
    -1 for anomalies. :meth:`anomaly_score` gives the NLL itself.

    Parameters
    ----------
    contamination : float
        Fraction of the training sequences expected to score above the
        decision threshold; sets ``offset_``.
    """

    def __init__(self, hidden_channels=32, context_length=9, n_bins=256, mask_periods=(4, 5),
                 learning_rate=1e-3, batch_size=8, n_steps=1000, loss_scope="all",
                 score_scope="masked_only", use_attention=True, use_masked_frame=True,
                 precision="float32", n_eval_masks=1, eval_mask_seed=0, contamination=0.1,
                 log_interval=50, random_state=None):
        self.hidden_channels = hidden_channels
        self.context_length = context_length
        self.n_bins = n_bins
        self.mask_periods = mask_periods
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.loss_scope = loss_scope
        self.score_scope = score_scope
        self.use_attention = use_attention
        self.use_masked_frame = use_masked_frame
        self.precision = precision
        self.n_eval_masks = n_eval_masks
        self.eval_mask_seed = eval_mask_seed
        self.contamination = contamination
        self.log_interval = log_interval
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        seed = self.random_state if self.random_state is not None else \
            int(np.random.default_rng().integers(2**31))
        return TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size, steps=self.n_steps,
            seed=int(seed), context_length=self.context_length, mask_periods=tuple(self.mask_periods),
            n_bins=self.n_bins, hidden=self.hidden_channels, precision=self.precision,
            log_interval=self.log_interval, checkpoint_interval=max(self.n_steps, 1),
            loss_scope=self.loss_scope, use_attention=self.use_attention,
            use_masked_frame=self.use_masked_frame,
        )

    def _eval_config(self) -> EvalConfig:
        return EvalConfig(scope=self.score_scope, mask_seed=self.eval_mask_seed,
                          n_masks=self.n_eval_masks, mask_periods=tuple(self.mask_periods))

    def fit(self, X, y=None):
        """Train on normal sequences. A non-zero ``y`` entry marks an anomaly and is refused."""
        if not 0 < self.contamination <= 0.5:
            raise ValueError(f"contamination must be in (0, 0.5], got {self.contamination}")
        X = check_sequences(X, min_length=self.context_length + 1)
        if y is not None:
            y = np.asarray(y)
            if len(y) != len(X):
                raise ValueError(f"y has {len(y)} entries for {len(X)} sequences")
            if np.any(y != 0):
                raise ValueError("training data must be anomaly-free (all y == 0)")
        self.params_, self.train_log_ = train(self._train_config(), X)
        self.frame_shape_ = X.shape[2:]
        self.n_frames_in_ = X.shape[1]
        self.offset_ = float(np.percentile(self.score_samples(X), 100 * self.contamination))
        return self

    def _scored(self, X):
        check_is_fitted(self, "params_")
        X = check_sequences(X, min_length=self.params_.hyper.context_length + 1)
        if X.shape[2:] != tuple(self.frame_shape_):
            raise ValueError(f"frames are {X.shape[2:]}, detector was fit on {tuple(self.frame_shape_)}")
        return score_dataset(self.params_, [LabeledSequence(x) for x in X], self._eval_config())

    def anomaly_score(self, X) -> np.ndarray:
        """Mean NLL per scored pixel-channel of each sequence's last frame."""
        return np.array([s.score.mean_nll for s in self._scored(X)])

    def loss_maps(self, X) -> np.ndarray:
        """Per-pixel NLL of each last frame, ``[n, H, W]``."""
        return np.stack([s.loss_map.nll for s in self._scored(X)])

    def score_samples(self, X) -> np.ndarray:
        return -self.anomaly_score(X)

    def decision_function(self, X) -> np.ndarray:
        return self.score_samples(X) - self.offset_

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision_function(X) < 0, -1, 1)

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(self.params_, path)

    @classmethod
    def from_checkpoint(cls, path, **kwargs) -> "InpaintingAnomalyDetector":
        """Rebuild a fitted detector (threshold unset: ``offset_`` = -inf) from a checkpoint."""
        params = load_checkpoint(path)
        h = params.hyper
        est = cls(hidden_channels=h.hidden, context_length=h.context_length, n_bins=h.n_bins,
                  use_attention=h.use_attention, use_masked_frame=h.use_masked_frame,
                  precision=h.precision, **kwargs)
        est.params_ = params
        est.train_log_ = []
        est.frame_shape_ = (h.height, h.width, h.channels)
        est.offset_ = -np.inf
        return est
