"""Pick the compiled kernels when importable, else the numpy fallback.

Set ``COVSEL_BACKEND=python`` to force the fallback.
"""

from __future__ import annotations

import logging
import os

log = logging.getLogger(__name__)

if os.environ.get("COVSEL_BACKEND", "").lower() == "python":
    from . import _kernels_py as kernels
    BACKEND = "python"
else:
    try:
        from . import _kernels as kernels  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:
        from . import _kernels_py as kernels
        BACKEND = "python"
        log.debug("compiled kernels unavailable; using numpy fallback")

__all__ = ["kernels", "BACKEND"]
