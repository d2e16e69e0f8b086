"""Kernel backend selection.

``FEDLITH_BACKEND`` picks the implementation of the hot kernels:

* ``numba`` (default when importable) -- @njit loops for patch extraction /
  scatter, BLAS for the contractions.
* ``numpy`` -- pure-numpy fallback using stride tricks and slice arithmetic.

Both paths feed the exact same dgemm calls, so results are bitwise identical;
the flag only trades compilation time against per-call overhead.
"""

import os

_VALID = ("numba", "numpy")


def _detect() -> str:
    choice = os.environ.get("FEDLITH_BACKEND", "").strip().lower()
    if choice and choice not in _VALID:
        raise ValueError(
            f"FEDLITH_BACKEND must be one of {_VALID}, got {choice!r}"
        )
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise
        return "numpy"
    return "numba"


_ACTIVE = _detect()


def active_backend() -> str:
    """Backend chosen at import time: 'numba' or 'numpy'."""
    return _ACTIVE


def using_numba() -> bool:
    return _ACTIVE == "numba"
