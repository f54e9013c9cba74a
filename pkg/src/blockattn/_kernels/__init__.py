"""Numeric kernel backends.

The compiled Cython core is preferred when its extension module imports; the
pure-numpy fallback is selected otherwise. Both expose the same functions
with identical semantics, so everything above this package is backend-blind.
Set ``BLOCKATTN_BACKEND=pure`` (or ``compiled``) to pin the choice at import.
"""

from __future__ import annotations

import os

from . import pure

try:
    from . import _core as _compiled
except ImportError:  # extension not built on this install
    _compiled = None

DEFAULT_BACKEND = "compiled" if _compiled is not None else "pure"
_requested = os.environ.get("BLOCKATTN_BACKEND", DEFAULT_BACKEND)
if _requested == "compiled" and _compiled is None:
    raise ImportError(
        "BLOCKATTN_BACKEND=compiled but the extension module is not built"
    )
if _requested not in ("pure", "compiled"):
    raise ImportError(f"BLOCKATTN_BACKEND must be 'pure' or 'compiled', got {_requested!r}")
_active = _compiled if _requested == "compiled" else pure


def available_backends() -> tuple[str, ...]:
    return ("pure", "compiled") if _compiled is not None else ("pure",)


def get_backend() -> str:
    return _active.NAME


def set_backend(name: str) -> str:
    """Switch kernel backend; returns the previously active backend name."""
    global _active
    previous = _active.NAME
    if name == "pure":
        _active = pure
    elif name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernel core is not available")
        _active = _compiled
    else:
        raise ValueError(f"unknown backend {name!r}")
    return previous


def active():
    """The module providing the kernel functions."""
    return _active
