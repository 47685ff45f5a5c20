"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementations are used.  Set ``MANTIS_CD_PURE_PYTHON=1`` to force the
fallback (useful for benchmarking and for cross-checking the two).
"""
import os

from . import _pykernels as python_kernels

compiled_kernels = None
if os.environ.get("MANTIS_CD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_kernels
    except ImportError:
        compiled_kernels = None

_impl = compiled_kernels if compiled_kernels is not None else python_kernels
BACKEND = _impl.BACKEND

im2col = _impl.im2col
col2im = _impl.col2im
upsample2x = _impl.upsample2x
upsample2x_backward = _impl.upsample2x_backward


def use_backend(name):
    """Switch kernels at runtime (``"cython"`` or ``"python"``); returns the previous name."""
    global _impl, BACKEND, im2col, col2im, upsample2x, upsample2x_backward
    previous = BACKEND
    if name == "cython":
        if compiled_kernels is None:
            raise RuntimeError("compiled kernels are not built")
        _impl = compiled_kernels
    elif name == "python":
        _impl = python_kernels
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = _impl.BACKEND
    im2col = _impl.im2col
    col2im = _impl.col2im
    upsample2x = _impl.upsample2x
    upsample2x_backward = _impl.upsample2x_backward
    return previous
