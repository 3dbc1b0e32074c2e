"""Kernel backend selection.

The compiled extension is used when it imports; set ``XMDISTILL_PURE_PYTHON=1``
to force the numpy fallback. ``BACKEND`` names the active one.
"""

import os

from . import _kernels_py

if os.environ.get("XMDISTILL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

conv1d_forward = _impl.conv1d_forward
conv1d_backward = _impl.conv1d_backward
gelu_forward = _impl.gelu_forward
# numpy's vectorised erf/exp beat the scalar libm loops here, so these stay on numpy
gelu_backward = _kernels_py.gelu_backward
layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
softmax_forward = _kernels_py.softmax_forward
softmax_backward = _impl.softmax_backward

__all__ = [
    "BACKEND",
    "conv1d_forward",
    "conv1d_backward",
    "gelu_forward",
    "gelu_backward",
    "layer_norm_forward",
    "layer_norm_backward",
    "softmax_forward",
    "softmax_backward",
]
