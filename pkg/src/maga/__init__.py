"""Morpho-aware global attention for alpha matting, at desk scale.

Modules:

* ``tensor``    reverse-mode autodiff over numpy arrays
* ``attention`` tetris-kernel query enrichment and the MAGA block
* ``net``       matting network, losses and toy trainer
* ``metrics``   SAD / MSE / Grad / Conn
* ``data``      procedural hair-like composites and trimaps
* ``cli``       the ``maga`` command
"""

from .attention import MagaConfig, maga_block
from .metrics import MetricReport, evaluate
from .net import NetConfig, forward, init_params, train
from .tensor import ConfigError, ShapeError, Tensor, grad

__version__ = "0.1.0"

__all__ = ["ConfigError", "MagaConfig", "MetricReport", "NetConfig", "ShapeError", "Tensor",
           "evaluate", "forward", "grad", "init_params", "maga_block", "train"]
