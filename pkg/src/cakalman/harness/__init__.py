"""Metrics, datasets, experiment orchestration and the command-line interface."""

from .config import ConfigError, ExperimentConfig, config_from_dict, load_config
from .datasets import Dataset, generate_onmodel, generate_synthetic, load_dataset, write_dataset
from .experiment import ResultRow, run_experiment, run_method
from .metrics import avg_nld, mse
