"""Backend selection for the numerical kernels.

The compiled extension is used when importable; otherwise the numpy
reference kernels take over. FLSIM_BACKEND=numpy forces the fallback and
FLSIM_BACKEND=compiled insists on the extension (ImportError if absent).
Both expose the same functions with the same conventions.
"""

import os

from . import kernels_numpy


def load_backend(name=None):
    """Return the kernel module for `name` (auto/numpy/compiled)."""
    if name is None:
        name = os.environ.get("FLSIM_BACKEND", "auto")
    if name in ("", "auto"):
        try:
            from . import _kernels
            return _kernels
        except ImportError:
            return kernels_numpy
    if name == "numpy":
        return kernels_numpy
    if name == "compiled":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}: use auto, numpy, or compiled")


def available_backends():
    names = ["numpy"]
    try:
        from . import _kernels  # noqa: F401
        names.append("compiled")
    except ImportError:
        pass
    return names


active = load_backend()
