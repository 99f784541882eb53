"""Cross-subject decoding of synthetic voxel responses with a shared backbone and low-rank subject adapters."""

from .cohort import generate_cohort, load_cohort, save_cohort, take_sessions
from .config import ExperimentConfig, load_config, preset
from .evaluation import MetricsReport, evaluate
from .fingerprint import run_fingerprint_experiment
from .model import AdaptedModel, SharedModel
from .training import contrastive_schedule, finetune, pretrain

__version__ = "0.1.0"

__all__ = [
    "AdaptedModel",
    "ExperimentConfig",
    "MetricsReport",
    "SharedModel",
    "contrastive_schedule",
    "evaluate",
    "finetune",
    "generate_cohort",
    "load_cohort",
    "load_config",
    "preset",
    "pretrain",
    "run_fingerprint_experiment",
    "save_cohort",
    "take_sessions",
]
