"""Kernel backend selection.

Hot geometry kernels are written as plain nopython-compatible loops and
compiled with numba by default.  Setting ``VOLRIG_BACKEND=numpy`` skips JIT
compilation entirely; loop kernels then run interpreted and a few
throughput-critical ones dispatch to vectorized numpy implementations
instead (see :mod:`volrig.kernels`).  Both backends produce identical
results; ``benchmarks/bench_backends.py`` compares their speed.
"""

from __future__ import annotations

import os

_VALID = ("numba", "numpy")


def backend_name() -> str:
    name = os.environ.get("VOLRIG_BACKEND", "numba").lower()
    if name not in _VALID:
        raise ValueError(f"VOLRIG_BACKEND must be one of {_VALID}, got {name!r}")
    if name == "numba":
        try:
            import numba  # noqa: F401
        except ImportError:
            name = "numpy"
    return name


USE_NUMBA = backend_name() == "numba"


def maybe_njit(fn=None, **njit_kwargs):
    """Apply ``numba.njit`` when the numba backend is active, else no-op."""
    def wrap(f):
        if USE_NUMBA:
            import numba
            njit_kwargs.setdefault("cache", True)
            return numba.njit(**njit_kwargs)(f)
        return f

    if fn is None:
        return wrap
    return wrap(fn)
