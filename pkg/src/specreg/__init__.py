"""Spectral norm regularization for small numpy networks, plus the measurements used to compare objectives."""

from ._kernels import BACKEND
from .analyze import MetricsRecord, generalization_gap
from .linalg import PowerIterState, spectral_norm, svd_exact
from .nn import Network, init_network, parse_layers
from .regularize import KINDS, RegularizerConfig

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "KINDS",
    "MetricsRecord",
    "Network",
    "PowerIterState",
    "RegularizerConfig",
    "generalization_gap",
    "init_network",
    "parse_layers",
    "spectral_norm",
    "svd_exact",
]
