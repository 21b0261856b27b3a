"""Backend selection: compiled extension if importable, numpy fallback otherwise.

Set EKPC_PURE_PYTHON=1 to force the fallback (used by the parity tests and
the kernel benchmark).
"""

from __future__ import annotations

import os

from . import kernels_py

if os.environ.get("EKPC_PURE_PYTHON"):
    _impl = kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = kernels_py

BACKEND: str = _impl.BACKEND
forward_batch = _impl.forward_batch
backward_batch = _impl.backward_batch
