"""Federated learning with generated embedding-space augmentation for
clients whose input features are distributed differently.

The hot MMD kernel has a compiled implementation and a numpy fallback;
``fraug.kernels.BACKEND`` says which one was loaded.
"""

from fraug.config import ExperimentConfig, load_config
from fraug.federation import aggregate, communication_report, run_experiment
from fraug.kernels import BACKEND
from fraug.params import ParameterSet
from fraug.tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ExperimentConfig",
    "ParameterSet",
    "Tensor",
    "aggregate",
    "communication_report",
    "load_config",
    "run_experiment",
]
