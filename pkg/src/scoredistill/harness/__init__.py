"""Training loops, metrics, persistence, audits and the command line."""

from .config import ExperimentConfig, load_config, reference_config, reference_edit_config
from .metrics import MetricsRow, compute_metrics
from .runner import RunRecord, run_editing, run_generation, sweep

__all__ = [
    "ExperimentConfig",
    "MetricsRow",
    "RunRecord",
    "compute_metrics",
    "load_config",
    "reference_config",
    "reference_edit_config",
    "run_editing",
    "run_generation",
    "sweep",
]
