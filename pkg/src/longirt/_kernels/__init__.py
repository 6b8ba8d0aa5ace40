"""Likelihood kernel backends.

The compiled Cython extension is preferred when built; otherwise the
pure-NumPy implementation is selected at import time.  Set
LONGIRT_BACKEND=numpy (or =compiled) to force a choice.
"""

from __future__ import annotations

import os

from . import numpy_backend

try:
    from . import _core  # type: ignore[attr-defined]

    _HAVE_COMPILED = True
except ImportError:
    _core = None
    _HAVE_COMPILED = False

_FORCED = os.environ.get("LONGIRT_BACKEND")


def available_backends() -> tuple[str, ...]:
    return ("compiled", "numpy") if _HAVE_COMPILED else ("numpy",)


def get_backend(name: str | None = None):
    """Return a kernel module by name, or the default one."""
    if name is None:
        name = _FORCED or ("compiled" if _HAVE_COMPILED else "numpy")
    if name == "numpy":
        return numpy_backend
    if name == "compiled":
        if not _HAVE_COMPILED:
            raise RuntimeError("compiled kernel requested but the extension is not built")
        return _core
    raise ValueError(f"unknown backend {name!r}")


def backend_name() -> str:
    return get_backend().name
