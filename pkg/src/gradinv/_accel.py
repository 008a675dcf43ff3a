"""Numba switch.

Set ``GRADINV_DISABLE_NUMBA=1`` to force the pure-numpy kernels, e.g. when
debugging or when numba is not installed.
"""

import logging
import os

logger = logging.getLogger(__name__)

_disabled = os.environ.get("GRADINV_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError("disabled by GRADINV_DISABLE_NUMBA")
    import numba

    njit = numba.njit
    HAVE_NUMBA = True
except ImportError as exc:
    logger.debug("numba unavailable (%s); using numpy kernels", exc)
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        """No-op stand-in for ``numba.njit``."""
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(func):
            return func

        return wrap
