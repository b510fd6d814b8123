"""Semi-supervised twin-network verification with hand-written backprop.

Two weight-shared encoder branches embed a pair of samples; the embedding
distance decides whether they share a class. A weight-shared decoder pair
reconstructs both inputs so unlabeled pairs also shape the embedding. All
forward and backward passes are written out explicitly over numpy arrays.
"""

from .arch import ArchSpec, build_arch, tiny
from .config import HyperParams, derive_rng
from .data import (
    PairManifest,
    SampleSet,
    add_uniform_noise,
    assert_class_disjoint,
    batches,
    ingest_idx,
    ingest_image_dir,
    load_manifest,
    load_samples,
    make_pairs,
    save_manifest,
    save_samples,
    split_disjoint_classes,
    split_label_budget,
    split_train_test,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    SevenError,
    ShapeMismatchError,
    TrainingDivergedError,
)
from .layers import LayerSpec
from .model import (
    NEG,
    POS,
    UNL,
    LossReport,
    PairBatch,
    SevenModel,
    discriminative_loss,
    discriminative_loss_kl,
    generative_loss,
    load_checkpoint,
    pair_probability,
    save_checkpoint,
)
from .optim import RmsProp, zero_grads
from .train import (
    EvalReport,
    TrainTrace,
    ablate,
    calibrate_tau,
    evaluate,
    pair_distances,
    sweep_alpha,
    train,
    train_and_evaluate,
)

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "build_arch", "tiny",
    "HyperParams", "derive_rng",
    "PairManifest", "SampleSet", "add_uniform_noise", "assert_class_disjoint",
    "batches", "ingest_idx", "ingest_image_dir", "load_manifest", "load_samples",
    "make_pairs", "save_manifest", "save_samples", "split_disjoint_classes",
    "split_label_budget", "split_train_test",
    "CheckpointError", "ConfigError", "DataFormatError", "SevenError",
    "ShapeMismatchError", "TrainingDivergedError",
    "LayerSpec",
    "NEG", "POS", "UNL", "LossReport", "PairBatch", "SevenModel",
    "discriminative_loss", "discriminative_loss_kl", "generative_loss",
    "load_checkpoint", "pair_probability", "save_checkpoint",
    "RmsProp", "zero_grads",
    "EvalReport", "TrainTrace", "ablate", "calibrate_tau", "evaluate",
    "pair_distances", "sweep_alpha", "train", "train_and_evaluate",
]
