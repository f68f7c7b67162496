"""Hot-kernel dispatch.

The compiled extension is used when it imports; otherwise the numpy
fallback is used. Set ``FEDAL_BACKEND=python`` to force the fallback.
"""
import os

from fedal import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("FEDAL_BACKEND", "").lower() != "python":
    try:
        from fedal import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py

layernorm_forward = _impl.layernorm_forward
layernorm_backward = _impl.layernorm_backward
softmax_forward = _impl.softmax_forward
softmax_backward = _impl.softmax_backward
gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward
moving_average = _impl.moving_average
moving_average_backward = _impl.moving_average_backward

__all__ = [
    "BACKEND",
    "layernorm_forward",
    "layernorm_backward",
    "softmax_forward",
    "softmax_backward",
    "gelu_forward",
    "gelu_backward",
    "moving_average",
    "moving_average_backward",
]
