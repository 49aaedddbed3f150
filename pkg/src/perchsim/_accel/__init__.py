"""Stepping-backend selection.

The compiled extension (``_core``, Cython + OpenMP) and the pure-numpy
reference (``reference``) implement the same stepping contract; the compiled
one is used when available.  Override with ``PERCHSIM_BACKEND=numpy`` or
``PERCHSIM_BACKEND=compiled`` (the latter raises if the extension is
missing).  Both backends are deterministic; they agree to floating-point
accumulation order.
"""

import os

from . import reference

try:
    from . import _core
    HAVE_COMPILED = True
except ImportError:
    _core = None
    HAVE_COMPILED = False

_env = os.environ.get("PERCHSIM_BACKEND", "auto").lower()
if _env in ("auto", ""):
    _active = "compiled" if HAVE_COMPILED else "numpy"
elif _env in ("compiled", "numpy"):
    if _env == "compiled" and not HAVE_COMPILED:
        raise ImportError("PERCHSIM_BACKEND=compiled but perchsim._accel._core is not built")
    _active = _env
else:
    raise ValueError(f"PERCHSIM_BACKEND={_env!r}: expected 'auto', 'compiled', or 'numpy'")


def active_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    """Switch backends at runtime (used by tests and the benchmark)."""
    global _active
    if name not in ("compiled", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "compiled" and not HAVE_COMPILED:
        raise ValueError("compiled backend is not available")
    _active = name


def backend_module():
    return _core if _active == "compiled" else reference
