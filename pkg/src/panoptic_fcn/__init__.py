"""Panoptic FCN at desk scale: kernel-based panoptic segmentation with point supervision."""
from .errors import ConfigurationError, InputError, TrainingError, ValidationError, VerificationError
from .evaluation import MetricReport, compute_miou, compute_pq
from .inference import InferenceConfig, run_inference_batch, run_panoptic_inference
from .model import ModelConfig, PanopticFCN
from .panoptic import DEFAULT_CATEGORIES, CategorySet, PanopticSegmentation, Segment
from .synth import SceneSpec, generate_scene, generate_scenes, read_dataset, write_dataset
from .trainer import TrainConfig, run_training

__version__ = "0.1.0"

__all__ = [
    "CategorySet", "ConfigurationError", "DEFAULT_CATEGORIES", "InferenceConfig", "InputError", "MetricReport",
    "ModelConfig", "PanopticFCN", "PanopticSegmentation", "SceneSpec", "Segment", "TrainConfig", "TrainingError",
    "ValidationError", "VerificationError", "compute_miou", "compute_pq", "generate_scene", "generate_scenes",
    "read_dataset", "run_inference_batch", "run_panoptic_inference", "run_training", "write_dataset",
]
