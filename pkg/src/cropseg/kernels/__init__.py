"""Backend-dispatched numeric kernels.

``depthwise_*`` and ``col2im_add`` come from the active backend (numba or
numpy, see :mod:`cropseg.backend`); ``im2col``/``conv_out_size`` are shared.
"""

from ..backend import ACTIVE_BACKEND
from .reference import conv_out_size, im2col

if ACTIVE_BACKEND == "numba":
    from .jit import (
        col2im_add,
        depthwise_backward_input,
        depthwise_backward_weights,
        depthwise_forward,
    )
else:
    from .reference import (
        col2im_add,
        depthwise_backward_input,
        depthwise_backward_weights,
        depthwise_forward,
    )

__all__ = [
    "ACTIVE_BACKEND",
    "conv_out_size",
    "im2col",
    "col2im_add",
    "depthwise_forward",
    "depthwise_backward_input",
    "depthwise_backward_weights",
]
