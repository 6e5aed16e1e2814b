"""Backend selection between the compiled and pure-Python kernel lanes.

The environment variable DNABIOMASS_BACKEND picks the lane: "cython"
requires the compiled extension, "python" forces the numpy implementation,
and "auto" (the default) prefers the extension when it imports.
"""

from __future__ import annotations

import os

_ENV_VAR = "DNABIOMASS_BACKEND"


def _load():
    choice = os.environ.get(_ENV_VAR, "auto").lower()
    if choice not in ("auto", "cython", "python"):
        raise ValueError(
            f"{_ENV_VAR} must be 'auto', 'cython', or 'python', got {choice!r}"
        )
    if choice in ("auto", "cython"):
        try:
            from . import _kernels as module

            return module, "cython"
        except ImportError:
            if choice == "cython":
                raise
    from . import _kernels_py as module

    return module, "python"


kernels, BACKEND_NAME = _load()


def get_backend() -> str:
    """Name of the active kernel backend ('cython' or 'python')."""
    return BACKEND_NAME
