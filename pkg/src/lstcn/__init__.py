"""Gait recognition with strip-pooled spatiotemporal convolutions.

A dual-branch network (static appearance + local spatiotemporal
convolution over strip features) built on a minimal float64 autodiff
core, together with a synthetic walker generator, training loop, and
cross-view rank-1 evaluation.
"""

__version__ = "0.1.0"

from .tensor import Tensor, NonFiniteError, gradcheck, no_grad

__all__ = ["Tensor", "NonFiniteError", "gradcheck", "no_grad", "__version__"]
