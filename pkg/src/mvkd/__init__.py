"""Knowledge distillation from a ViT teacher into a MobileViT student, on a numpy autodiff core."""

from .bench import BenchReport, bench_fps, size_report
from .data import Dataset, DatasetManifest, split_dataset, synth_fire_dataset
from .distill import DistillConfig, distill_student, kd_total_loss, train_baseline, train_teacher
from .evaluate import Heatmap, MetricsReport, confusion_matrix, evaluate, grad_cam, metrics
from .models import ModelConfig, build_model, load_checkpoint, param_count, save_checkpoint
from .tensor import Parameter, Rng, Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "BenchReport",
    "Dataset",
    "DatasetManifest",
    "DistillConfig",
    "Heatmap",
    "MetricsReport",
    "ModelConfig",
    "Parameter",
    "Rng",
    "Tensor",
    "bench_fps",
    "build_model",
    "confusion_matrix",
    "distill_student",
    "evaluate",
    "grad_cam",
    "kd_total_loss",
    "load_checkpoint",
    "metrics",
    "no_grad",
    "param_count",
    "save_checkpoint",
    "size_report",
    "split_dataset",
    "synth_fire_dataset",
    "train_baseline",
    "train_teacher",
]
