"""Backend selection for the pairwise likelihood kernel.

Prefers the compiled extension when it was built; falls back to the numpy
implementation otherwise. Set MPSLAM_FORCE_FALLBACK=1 to pin the numpy
backend (used by the parity tests and benchmarks).
"""

from __future__ import annotations

import os

from . import _fallback

if os.environ.get("MPSLAM_FORCE_FALLBACK", "").strip() not in ("", "0"):
    _impl = _fallback
    BACKEND = "numpy"
else:
    try:
        from . import _core as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback
        BACKEND = "numpy"

eval_loglik = _impl.eval_loglik
pair_geometry = _fallback.pair_geometry

__all__ = ["BACKEND", "eval_loglik", "pair_geometry"]
