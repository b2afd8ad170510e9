"""Kernel backend selection.

The compiled Cython module is used when it was built and importable; set
``URBANWIND_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os
from types import ModuleType

from . import _fallback

_compiled: ModuleType | None
try:
    from . import _ckernels as _compiled
except ImportError:  # extension not built
    _compiled = None

if _compiled is not None and os.environ.get("URBANWIND_PURE_PYTHON", "") != "1":
    _impl: ModuleType = _compiled
    BACKEND = "cython"
else:
    _impl = _fallback
    BACKEND = "python"


def available_backends() -> list[str]:
    return ["cython", "python"] if _compiled is not None else ["python"]


def get_backend(name: str) -> ModuleType:
    if name == "python":
        return _fallback
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not available")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


sor_solve = _impl.sor_solve
dwconv_forward = _impl.dwconv_forward
dwconv_backward = _impl.dwconv_backward
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward

__all__ = [
    "BACKEND",
    "available_backends",
    "get_backend",
    "sor_solve",
    "dwconv_forward",
    "dwconv_backward",
    "maxpool2_forward",
    "maxpool2_backward",
]
