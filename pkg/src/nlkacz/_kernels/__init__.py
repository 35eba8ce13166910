"""Kernel backend selection.

The compiled extension is preferred when importable; the pure-numpy
fallback gives identical semantics at lower speed.  Set NLKACZ_BACKEND to
``compiled`` or ``python`` to force a choice (``compiled`` raises if the
extension is missing); anything else means auto.
"""

import os

from . import _fallback

_requested = os.environ.get("NLKACZ_BACKEND", "auto").lower()

if _requested == "python":
    _impl = _fallback
    _name = "python"
else:
    try:
        from . import _compiled as _impl  # type: ignore[no-redef]

        _name = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise ImportError(
                "NLKACZ_BACKEND=compiled but the extension is not built; "
                "run 'pip install -e . --no-build-isolation'"
            ) from None
        _impl = _fallback
        _name = "python"

KIND_CYCLIC = _fallback.KIND_CYCLIC
KIND_MAX_RESIDUAL = _fallback.KIND_MAX_RESIDUAL
KIND_THETA = _fallback.KIND_THETA
KIND_POSITIVE_CYCLIC = _fallback.KIND_POSITIVE_CYCLIC
TERM_TOL = _fallback.TERM_TOL
TERM_MAX = _fallback.TERM_MAX
TERM_ZERO = _fallback.TERM_ZERO
MODE_EXACT = _fallback.MODE_EXACT
MODE_STALE = _fallback.MODE_STALE
MODE_RECOMPUTE = _fallback.MODE_RECOMPUTE

h_batch = _impl.h_batch
dd_solve = _impl.dd_solve
onestep_solve = _impl.onestep_solve


def backend():
    """Name of the active kernel backend: 'compiled' or 'python'."""
    return _name


def backends_available():
    """All importable backend modules, keyed by name."""
    out = {"python": _fallback}
    try:
        from . import _compiled

        out["compiled"] = _compiled
    except ImportError:
        pass
    return out
