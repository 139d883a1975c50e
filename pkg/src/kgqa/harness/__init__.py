"""Configuration, orchestration and the command line."""
from .config import ConfigError, ExperimentConfig, build_config
from .runner import cmd_eval, cmd_gen_synthetic, cmd_mine, cmd_sweep, cmd_train, load_experiment, train_model

__all__ = ["ConfigError", "ExperimentConfig", "build_config", "cmd_eval", "cmd_gen_synthetic",
           "cmd_mine", "cmd_sweep", "cmd_train", "load_experiment", "train_model"]
