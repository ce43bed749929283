"""Hot-kernel dispatch.

The compiled extension is used when it was built; otherwise the numpy
fallback is used. Set ``DEVTRACE_KERNELS=python`` to force the fallback.
Callers must go through module attributes (``kernels.im2col_same(...)``) so
``set_backend`` takes effect everywhere.
"""

import logging
import os

from . import _kernels_py as python_impl

try:
    from . import _kernels as compiled_impl
except ImportError:  # extension not built
    compiled_impl = None

log = logging.getLogger(__name__)

KERNEL_NAMES = (
    "gmm_log_joint",
    "logsumexp_normalize",
    "lstm_gates_forward",
    "lstm_gates_backward",
    "im2col_same",
    "col2im_same",
    "maxpool2_forward",
    "maxpool2_backward",
)

BACKEND = None


def available_backends():
    return ["python"] + (["cython"] if compiled_impl is not None else [])


def set_backend(name):
    """Rebind every kernel to the ``"cython"`` or ``"python"`` implementation."""
    global BACKEND
    if name == "cython":
        if compiled_impl is None:
            raise RuntimeError("compiled kernels are not built; reinstall the package with Cython available")
        impl = compiled_impl
    elif name == "python":
        impl = python_impl
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    g = globals()
    for k in KERNEL_NAMES:
        g[k] = getattr(impl, k)
    BACKEND = name
    return name


def _default_backend():
    forced = os.environ.get("DEVTRACE_KERNELS", "").strip().lower()
    if forced:
        return forced
    return "cython" if compiled_impl is not None else "python"


set_backend(_default_backend())
log.debug("kernel backend: %s", BACKEND)
