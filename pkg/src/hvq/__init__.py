"""Unsupervised temporal action segmentation with a hierarchical vector-quantized autoencoder.

The pipeline for one activity is :func:`train_activity` on an
:class:`ActivityDataset`, then :func:`segment_activity` to decode ordered
segmentations, then :func:`evaluate` against ground truth.
"""

from .data import (
    ActivityDataset,
    Checkpoint,
    FormatError,
    VideoFeatures,
    group_dataset,
    load_activity,
    load_checkpoint,
    load_features,
    load_labels,
    save_checkpoint,
    save_features,
    write_dataset,
)
from .inference import (
    ActivityStats,
    DecodeError,
    FifaConfig,
    cluster_order,
    dp_decode,
    fifa_decode,
    length_prior,
    segment_activity,
    segment_video,
    soft_assign,
)
from .metrics import MetricsReport, evaluate, hungarian_match, jsdist
from .numerics import ConfigError, OptimConfig, ParamStore, adamw_step, finite_diff_check
from .quantizer import Codebook, HvqConfig, QuantizeResult, ema_update, init_kmeans, quantize_hierarchy, reset_dead
from .synthetic import SeparationError, SyntheticSpec, synth_generate
from .tcn import DataError, TcnConfig, TcnModel, build_model, decode, encode
from .training import TrainConfig, TrainReport, TrainState, load_state, save_state, train_activity, train_step

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
