"""Select the compiled Sinkhorn kernel, falling back to numpy.

Set ``AVLOC_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _fallback

if os.environ.get("AVLOC_PURE_PYTHON", "") not in ("", "0"):
    _compiled = None
else:
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"


def get_kernel(name=None):
    """Return the batched log-domain solver for ``name`` (default: active backend)."""
    name = name or BACKEND
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled Sinkhorn kernel is not built")
        return _compiled.sinkhorn_log_batch
    if name == "python":
        return _fallback.sinkhorn_log_batch
    raise ValueError(f"unknown backend {name!r}")
