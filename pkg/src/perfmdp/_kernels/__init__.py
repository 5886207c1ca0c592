"""Backend selection for the hot inner loops.

The compiled extension is used when available; otherwise the NumPy fallback.
PERF_LMDP_BACKEND=pure forces the fallback, PERF_LMDP_BACKEND=fast makes a
missing extension a hard error instead of a silent downgrade.
"""

import os

from . import pure

_requested = os.environ.get("PERF_LMDP_BACKEND", "auto")
if _requested not in ("auto", "fast", "pure"):
    raise ImportError(f"PERF_LMDP_BACKEND must be auto, fast or pure, got {_requested!r}")

if _requested == "pure":
    _impl = pure
    BACKEND = "pure"
else:
    try:
        from . import _fast as _impl

        BACKEND = "fast"
    except ImportError:
        if _requested == "fast":
            raise
        _impl = pure
        BACKEND = "pure"

admm_chunk = _impl.admm_chunk
projected_scan = _impl.projected_scan
