"""Select the compiled kernels when available, else the numpy fallback.

Set ``DRIVENQUBIT_BACKEND=python`` to force the fallback.
"""
import os

from . import _core_py

BACKEND = "python"
core = _core_py

if os.environ.get("DRIVENQUBIT_BACKEND", "").lower() != "python":
    try:
        from . import _core as core  # noqa: F811
    except ImportError:
        core = _core_py
    else:
        BACKEND = "cython"


def get(name: str):
    """Return the kernel module for ``name`` in {"cython", "python"}."""
    if name == "python":
        return _core_py
    if name == "cython":
        from . import _core

        return _core
    raise ValueError(f"unknown backend {name!r}")
