"""mahaguard: density-based out-of-distribution detection toolkit.

Gaussian statistics with Ledoit-Wolf shrinkage and streaming EMA updates,
Mahalanobis / relative-Mahalanobis scoring plus the standard output-based
baselines, a Mahalanobis-regularized training objective with a toy MLP
trainer, and an AUROC / FPR95 evaluation harness.
"""

from .embio import EmbeddingSet, read_csv, read_emb, write_emb
from .errors import MahaguardError, NumericalError, ValidationError
from .loss import LossConfig, LossOutput, combined_loss, maha_ce_loss, maha_posteriors
from .metrics import EvalReport, ScorerReport, auroc, evaluate, fpr_at_tpr
from .scorers import (
    KnnIndex,
    ScoreVector,
    ThresholdRule,
    calibrate_threshold,
    decide,
    mahalanobis_distance,
    score_energy,
    score_knn,
    score_md,
    score_msp,
    score_rmd,
)
from .stats import (
    GaussianStats,
    OnlineStatsState,
    Shrinkage,
    ema_update,
    finalize_stats,
    fit_batch_mle,
    fit_gaussian_stats,
    ledoit_wolf_shrink,
    load_stats,
    save_stats,
)
from .trainer import (
    GeneratorParams,
    MlpModel,
    SyntheticTask,
    TrainConfig,
    backward,
    forward,
    gaussian_log_likelihood,
    load_model,
    make_synthetic_task,
    save_model,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "EmbeddingSet",
    "EvalReport",
    "GaussianStats",
    "GeneratorParams",
    "KnnIndex",
    "LossConfig",
    "LossOutput",
    "MahaguardError",
    "MlpModel",
    "NumericalError",
    "OnlineStatsState",
    "ScoreVector",
    "ScorerReport",
    "Shrinkage",
    "SyntheticTask",
    "ThresholdRule",
    "TrainConfig",
    "ValidationError",
    "auroc",
    "backward",
    "calibrate_threshold",
    "combined_loss",
    "decide",
    "ema_update",
    "evaluate",
    "finalize_stats",
    "fit_batch_mle",
    "fit_gaussian_stats",
    "forward",
    "fpr_at_tpr",
    "gaussian_log_likelihood",
    "ledoit_wolf_shrink",
    "load_model",
    "load_stats",
    "maha_ce_loss",
    "maha_posteriors",
    "mahalanobis_distance",
    "make_synthetic_task",
    "read_csv",
    "read_emb",
    "save_model",
    "save_stats",
    "score_energy",
    "score_knn",
    "score_md",
    "score_msp",
    "score_rmd",
    "train",
    "write_emb",
]
