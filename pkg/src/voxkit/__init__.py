"""voxkit: 3D volumetric segmentation with a small numpy autodiff engine.

Modules map onto a plug-and-play pipeline: volume I/O, patch sampling,
network definitions (residual U-Net, FCN), losses, training, sliding-window
inference and per-class evaluation.
"""

from .config import ExperimentConfig, load_config
from .inference import labels_from_probs, sliding_window_predict
from .losses import LossConfig, compute_loss
from .metrics import aggregate_stats, emit_report, subject_metrics
from .models import ModelConfig, build_params, count_parameters, forward
from .sampling import SamplerConfig, Subject, batch_stream, make_batch
from .synthetic import PhantomSpec, generate_dataset, generate_phantom
from .training import Checkpoint, TrainHyper, Trainer, load_checkpoint, save_checkpoint, train
from .volume_io import Volume, read_manifest, read_volume, write_manifest, write_volume

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ExperimentConfig",
    "LossConfig",
    "ModelConfig",
    "PhantomSpec",
    "SamplerConfig",
    "Subject",
    "TrainHyper",
    "Trainer",
    "Volume",
    "aggregate_stats",
    "batch_stream",
    "build_params",
    "compute_loss",
    "count_parameters",
    "emit_report",
    "forward",
    "generate_dataset",
    "generate_phantom",
    "labels_from_probs",
    "load_checkpoint",
    "load_config",
    "make_batch",
    "read_manifest",
    "read_volume",
    "save_checkpoint",
    "sliding_window_predict",
    "subject_metrics",
    "train",
    "write_manifest",
    "write_volume",
]
