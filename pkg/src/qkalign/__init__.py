"""Multi-scene absolute pose regression with query-key alignment.

A desk-scale transformer for regressing camera pose across multiple
synthetic scenes, together with the two interventions under study (a
query-key alignment auxiliary loss and fixed 2-D sinusoidal positional
encoding) and the diagnostics that measure attention collapse: query-region
purity, attention entropy, and query/key centroid distance.
"""

from .autodiff import Tensor, backward, no_grad
from .config import (
    DataConfig,
    LossConfig,
    ModelConfig,
    OptimConfig,
    RunConfig,
)
from .data import Dataset, build_dataset, read_dataset_file, write_dataset_file
from .diagnostics import attention_entropy, kmeans2, purity, region_distance
from .losses import LossBreakdown, pose_loss, qka_loss, scene_loss, total_loss
from .model import AttentionRecord, ModelOutput, PoseTransformer, load_checkpoint, save_checkpoint
from .pose import Pose, median, orientation_error_deg, position_error, recall_at
from .posenc import build_sinusoidal_2d, pe_distance_map
from .train import evaluate_model, run_diagnostics, run_training

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "ModelConfig",
    "DataConfig",
    "OptimConfig",
    "LossConfig",
    "RunConfig",
    "Dataset",
    "build_dataset",
    "read_dataset_file",
    "write_dataset_file",
    "attention_entropy",
    "kmeans2",
    "purity",
    "region_distance",
    "LossBreakdown",
    "pose_loss",
    "scene_loss",
    "qka_loss",
    "total_loss",
    "PoseTransformer",
    "ModelOutput",
    "AttentionRecord",
    "load_checkpoint",
    "save_checkpoint",
    "Pose",
    "position_error",
    "orientation_error_deg",
    "median",
    "recall_at",
    "build_sinusoidal_2d",
    "pe_distance_map",
    "evaluate_model",
    "run_diagnostics",
    "run_training",
    "__version__",
]
