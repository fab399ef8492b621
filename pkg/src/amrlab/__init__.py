"""amrlab: a desk-scale training laboratory for attribution-balanced multimodal classifiers."""

__version__ = "0.1.0"

from .amr import AttributionTarget, amr_loss, amr_step, combined_training_step
from .attribution import (
    AttributionReport,
    aggregate_batch,
    compute_report,
    dominance_string,
    grad_times_input,
    normalize_per_sample,
    pool_l2,
)
from .baselines import StrategyConfig, train_unimodal
from .data import Dataset, DataSplits, SyntheticConfig, batches, generate_synthetic
from .harness import (
    MetricsReport,
    TrainConfig,
    accuracy,
    evaluate,
    mean_average_precision,
    run_matrix,
    train,
)
from .model import ModelConfig, MultimodalModel, init_model, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward, finite_difference_gradient, no_grad

__all__ = [
    "AttributionReport",
    "AttributionTarget",
    "Dataset",
    "DataSplits",
    "MetricsReport",
    "ModelConfig",
    "MultimodalModel",
    "StrategyConfig",
    "SyntheticConfig",
    "Tensor",
    "TrainConfig",
    "__version__",
    "accuracy",
    "aggregate_batch",
    "amr_loss",
    "amr_step",
    "backward",
    "batches",
    "combined_training_step",
    "compute_report",
    "dominance_string",
    "evaluate",
    "finite_difference_gradient",
    "generate_synthetic",
    "grad_times_input",
    "init_model",
    "load_checkpoint",
    "mean_average_precision",
    "no_grad",
    "normalize_per_sample",
    "pool_l2",
    "run_matrix",
    "save_checkpoint",
    "train",
    "train_unimodal",
]
