"""Stratified adversarial robustness with rejection: models, attacks, and metrics."""

from .attacks import AttackOutcome, PgdConfig, ensemble_evaluate, run_attack
from .data import Dataset, SyntheticSpec, generate, load_idx, split
from .metrics import (RejectionLoss, RobustnessCurve, robustness_curve, total_robust_loss,
                      total_robust_loss_general, total_robust_loss_ramp, total_robust_loss_step,
                      traditional_metrics)
from .nn import Mlp, init_mlp
from .selective import (REJECT, BaseClassifier, ConfidenceClassifier, CprClassifier, CprConfig,
                        calibrate_confidence, calibrate_cpr, cpr_classify)
from .train import TrainConfig, train_at, train_standard, train_trades

__version__ = "0.1.0"

__all__ = [
    "AttackOutcome", "BaseClassifier", "ConfidenceClassifier", "CprClassifier", "CprConfig",
    "Dataset", "Mlp", "PgdConfig", "REJECT", "RejectionLoss", "RobustnessCurve", "SyntheticSpec",
    "TrainConfig", "calibrate_confidence", "calibrate_cpr", "cpr_classify", "ensemble_evaluate",
    "generate", "init_mlp", "load_idx", "robustness_curve", "run_attack", "split",
    "total_robust_loss", "total_robust_loss_general", "total_robust_loss_ramp",
    "total_robust_loss_step", "traditional_metrics", "train_at", "train_standard", "train_trades",
]
