"""Boundary-guided distillation of frozen teacher features into a lightweight polyp segmenter."""

from .config import ConfigError, RunConfig
from .data import ImageSample, SynthSpec, generate_synthetic, load_dataset
from .metrics import MetricReport, evaluate
from .student import Student, build_student
from .teachers import TeacherBank, default_bank
from .trainer import TrainingError, precompute_cache, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ImageSample",
    "MetricReport",
    "RunConfig",
    "Student",
    "SynthSpec",
    "TeacherBank",
    "TrainingError",
    "build_student",
    "default_bank",
    "evaluate",
    "generate_synthetic",
    "load_dataset",
    "precompute_cache",
    "train",
]
