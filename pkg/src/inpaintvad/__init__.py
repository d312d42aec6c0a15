"""Video anomaly detection by masked-frame inpainting with dynamic-filter attention."""
from .data import GeneratorConfig, LabeledSequence, build_test_set, generate_dataset, load_sprites
from .estimator import InpaintingAnomalyDetector
from .evaluation import EvalConfig, EvalReport, compute_eer, score_dataset
from .masking import Mask, MaskedFrame, apply_mask, grid_mask
from .model import ModelHyper, ModelParameters, forward, init_params
from .scoring import frame_nll, quantize_intensity
from .training import TrainConfig, train

__all__ = [
    "EvalConfig", "EvalReport", "GeneratorConfig", "InpaintingAnomalyDetector", "LabeledSequence",
    "Mask", "MaskedFrame", "ModelHyper", "ModelParameters", "TrainConfig", "apply_mask",
    "build_test_set", "compute_eer", "forward", "frame_nll", "generate_dataset", "grid_mask",
    "init_params", "load_sprites", "quantize_intensity", "score_dataset", "train",
]
__version__ = "0.1.0"
