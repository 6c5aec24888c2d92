"""Adversarial example generation by momentum-guided diffusion sampling."""

from .attack import (
    AttackConfig,
    AttackRecord,
    BatchSummary,
    load_records,
    run_attack,
    run_batch,
    save_records,
)
from .data import Dataset, generate_dataset, load_dataset, save_dataset
from .diffusion import (
    DiffusionTrainConfig,
    NoiseSchedule,
    build_schedule,
    invert_image,
    load_diffusion,
    purify,
    sample,
    save_diffusion,
    train_denoiser,
)
from .errors import ContractViolationError, FormatError, NumericError, VenomError
from .metrics import (
    MetricReport,
    evaluate_suite,
    frechet_distance,
    inception_score_toy,
    metrics_csv,
    ssim,
)
from .victims import (
    VictimClassifier,
    VictimTrainConfig,
    adv_train_classifier,
    classify,
    load_victim,
    save_victim,
    train_classifier,
)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackRecord",
    "BatchSummary",
    "ContractViolationError",
    "Dataset",
    "DiffusionTrainConfig",
    "FormatError",
    "MetricReport",
    "NoiseSchedule",
    "NumericError",
    "VenomError",
    "VictimClassifier",
    "VictimTrainConfig",
    "adv_train_classifier",
    "build_schedule",
    "classify",
    "evaluate_suite",
    "frechet_distance",
    "generate_dataset",
    "inception_score_toy",
    "invert_image",
    "load_dataset",
    "load_diffusion",
    "load_records",
    "load_victim",
    "metrics_csv",
    "purify",
    "run_attack",
    "run_batch",
    "sample",
    "save_dataset",
    "save_diffusion",
    "save_records",
    "save_victim",
    "ssim",
    "train_classifier",
    "train_denoiser",
    "__version__",
]
