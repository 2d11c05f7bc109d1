"""Selective language-model pretraining with VaR/CVaR token selection."""

__version__ = "0.1.0"

from eslm.config import Mode, TrainConfig, desk_profile, load_config  # noqa: E402
from eslm.risk import RiskConfig, ScoreKind, cvar, select, var_threshold  # noqa: E402
from eslm.trainer import Trainer  # noqa: E402

__all__ = [
    "Mode", "RiskConfig", "ScoreKind", "TrainConfig", "Trainer",
    "cvar", "desk_profile", "load_config", "select", "var_threshold",
]
