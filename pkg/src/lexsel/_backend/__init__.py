"""Backend selection.

The compiled core is used when importable; LEX_BACKEND=numpy|core
forces one side. Everything above this package calls `ops.*` and never
imports a concrete backend directly.
"""

import os

_choice = os.environ.get("LEX_BACKEND", "auto").strip().lower()

if _choice in ("", "auto"):
    try:
        from . import _core as ops  # type: ignore[attr-defined]
    except ImportError:
        from . import numpy_ops as ops  # type: ignore[no-redef]
elif _choice in ("core", "compiled", "cython"):
    from . import _core as ops  # type: ignore[attr-defined,no-redef]
elif _choice in ("numpy", "python"):
    from . import numpy_ops as ops  # type: ignore[no-redef]
else:
    raise RuntimeError(
        f"LEX_BACKEND={_choice!r} not recognized; use 'auto', 'core' or 'numpy'"
    )

BACKEND = ops.NAME

__all__ = ["ops", "BACKEND"]
