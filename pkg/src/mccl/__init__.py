"""Semi-supervised segmentation with multi-constraint consistency (feature alignment,
self-adaptive masking and noise) on a small numpy autodiff engine."""

from .config import ExperimentConfig, LossWeights, Toggles, load_config
from .errors import ContractError, NonFiniteError
from .tensor import Tensor, detect_anomaly, no_grad

__all__ = [
    "ContractError",
    "ExperimentConfig",
    "LossWeights",
    "NonFiniteError",
    "Tensor",
    "Toggles",
    "detect_anomaly",
    "load_config",
    "no_grad",
]

__version__ = "0.1.0"
