"""tfse: dual-path time-frequency speech enhancement at desk scale.

A small, dependency-light stack: a numpy reverse-mode autodiff engine, an
STFT front end, selective state-space scan and multi-head attention layers,
a dual-path enhancement model with magnitude-mask and wrapped-phase
decoders, the training losses, objective metrics, and a synthetic corpus
generator.
"""

from .autodiff import Tensor, apply_primitive, backward, grad_check

__all__ = ["Tensor", "apply_primitive", "backward", "grad_check"]
__version__ = "0.1.0"
