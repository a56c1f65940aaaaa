"""Kernel backend selection.

The compiled Cython extension is used when it imports; otherwise (or when
``WSTRACK_PURE_PYTHON=1``) the numpy fallback is used. Both backends return
bit-identical results.
"""
import logging
import os

from . import _fallback

log = logging.getLogger(__name__)

BACKEND = "python"
_impl = _fallback

if os.environ.get("WSTRACK_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        log.debug("compiled kernels unavailable, using numpy fallback")

im2col = _impl.im2col
col2im = _impl.col2im
dilate_disc = _impl.dilate_disc
erode_disc = _impl.erode_disc
flood_fill8 = _impl.flood_fill8
