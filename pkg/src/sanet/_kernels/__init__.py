"""Convolution kernel backends.

Two interchangeable implementations of the same three functions:

* ``native``:  compiled extension (direct loops, fastest)
* ``python``:  numpy fallback (im2col + batched matmul)

The active backend is picked at import time: the compiled extension when it
is available, the numpy fallback otherwise.  Set ``SANET_BACKEND=python`` or
``SANET_BACKEND=native`` to force one; forcing ``native`` when the extension
is missing raises so a silent slowdown cannot masquerade as the fast path.
"""
import os

from . import pyfallback
from .pyfallback import conv_out_size

try:
    from . import _native
except ImportError:
    _native = None


def _select():
    choice = os.environ.get("SANET_BACKEND", "").strip().lower()
    if choice == "python":
        return "python", pyfallback
    if choice == "native":
        if _native is None:
            raise ImportError(
                "SANET_BACKEND=native but the compiled extension is not built"
            )
        return "native", _native
    if choice:
        raise ValueError(f"unknown SANET_BACKEND value: {choice!r}")
    if _native is not None:
        return "native", _native
    return "python", pyfallback


BACKEND, _impl = _select()

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight


def available_backends():
    names = ["python"]
    if _native is not None:
        names.insert(0, "native")
    return names


def get_backend(name):
    """Return the module implementing the named backend."""
    if name == "python":
        return pyfallback
    if name == "native":
        if _native is None:
            raise ImportError("compiled extension is not built")
        return _native
    raise ValueError(f"unknown backend: {name!r}")
