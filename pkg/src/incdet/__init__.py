"""Class-incremental toy object detection with unbiased distillation losses."""

from . import diffcore, detector, evalmetrics, kernels, losses, protocol, synthdata

__version__ = "0.1.0"

from . import cli

__all__ = [
    "cli",
    "diffcore",
    "detector",
    "evalmetrics",
    "kernels",
    "losses",
    "protocol",
    "synthdata",
    "__version__",
]
