"""Kernel backend selection.

The hot inner loops (depthwise convolutions, col2im scatter-adds) exist in
two versions: numba @njit kernels and pure-numpy fallbacks. The environment
variable CROPSEG_BACKEND picks one at import time:

    auto   - numba when importable and JIT is enabled, else numpy (default)
    numba  - force numba; raises if numba is unusable
    numpy  - force the pure-numpy fallbacks

Dense convolutions ride BLAS matmuls in both backends; the flag only swaps
the loop-bound kernels. ``benchmarks/bench_kernels.py`` times the two sides.
"""

from __future__ import annotations

import os

from .errors import ConfigError

_VALID = ("auto", "numba", "numpy")


def _numba_usable() -> bool:
    try:
        import numba
    except ImportError:
        return False
    # NUMBA_DISABLE_JIT turns @njit into plain Python: worse than the
    # vectorized fallbacks, so treat it as "no numba".
    return not getattr(numba.config, "DISABLE_JIT", False)


def resolve_backend(name: str | None = None) -> str:
    """Return 'numba' or 'numpy' for the requested (or env-configured) name."""
    if name is None:
        name = os.environ.get("CROPSEG_BACKEND", "auto").strip().lower() or "auto"
    if name not in _VALID:
        raise ConfigError(
            f"CROPSEG_BACKEND={name!r} is not valid; expected one of {_VALID}"
        )
    if name == "numpy":
        return "numpy"
    usable = _numba_usable()
    if name == "numba" and not usable:
        raise ConfigError("CROPSEG_BACKEND=numba but numba is not importable (or JIT is disabled)")
    return "numba" if usable else "numpy"


ACTIVE_BACKEND = resolve_backend()
