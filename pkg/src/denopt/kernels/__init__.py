"""Hot-kernel backend selection.

The compiled extension is preferred when importable; the numpy fallback is
always available. DENOPT_BACKEND=numpy|core forces a choice (forcing `core`
when the extension is missing is an error).
"""

from __future__ import annotations

import os

from . import numpy_backend

_requested = os.environ.get("DENOPT_BACKEND", "").strip().lower()

if _requested == "numpy":
    _impl = numpy_backend
elif _requested in ("", "core"):
    try:
        from . import _core as _impl  # type: ignore[no-redef]
    except ImportError:
        if _requested == "core":
            raise ImportError(
                "DENOPT_BACKEND=core requested but the compiled extension is "
                "not built; run `pip install -e . --no-build-isolation`"
            ) from None
        _impl = numpy_backend
else:
    raise ValueError(f"unknown DENOPT_BACKEND {_requested!r} (use 'numpy' or 'core')")

BACKEND = _impl.NAME

silu_fwd = _impl.silu_fwd
silu_bwd = _impl.silu_bwd
segment_sum = _impl.segment_sum
segment_sum_bwd = _impl.segment_sum_bwd
gather_rows = _impl.gather_rows
scatter_add_rows = _impl.scatter_add_rows
edge_sqdist = _impl.edge_sqdist
edge_sqdist_bwd = _impl.edge_sqdist_bwd
edge_message_silu = _impl.edge_message_silu
edge_message_silu_bwd = _impl.edge_message_silu_bwd
coord_step = _impl.coord_step
coord_step_bwd = _impl.coord_step_bwd
