"""Training, evaluation and domain-generalization protocols."""

from .config import ABLATIONS, ConfigError, TrainConfig, format_config, load_config, parse_config
from .train import (
    DivergenceError,
    Evaluation,
    RunManifest,
    TrainingError,
    TrainResult,
    evaluate,
    format_log,
    train,
)
