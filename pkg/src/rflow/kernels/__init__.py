"""Sampling kernels with import-time backend selection.

The compiled Cython core is preferred; the pure-Python twin is the
fallback when the extension is missing and the ground truth the compiled
core is verified against (the two are bit-identical by construction).
Set ``RFLOW_PURE_PYTHON=1`` to force the fallback.

Public surface: ``Stream``, ``sweep``, ``run_sweeps``,
``conditional_sample``, ``MAX_PROPOSALS``, and the ``IMPL`` name of the
active backend.
"""

import os
import warnings

from ..rng import ZIGGURAT_F, ZIGGURAT_R, ZIGGURAT_X
from . import _pykernels


def _load_compiled():
    from . import _core

    _core.init_tables(ZIGGURAT_X, ZIGGURAT_F, ZIGGURAT_R)
    return _core


if os.environ.get("RFLOW_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        _impl = _load_compiled()
    except ImportError:
        warnings.warn(
            "compiled kernels unavailable; falling back to the pure-Python "
            "backend (orders of magnitude slower)",
            RuntimeWarning,
            stacklevel=2,
        )
        _impl = _pykernels

IMPL = _impl.IMPL
Stream = _impl.Stream
sweep = _impl.sweep
run_sweeps = _impl.run_sweeps
conditional_sample = _impl.conditional_sample
MAX_PROPOSALS = _pykernels.MAX_PROPOSALS


def get_backend(name):
    """Explicit backend access for benchmarks and equivalence tests."""
    if name == "python":
        return _pykernels
    if name == "cython":
        return _load_compiled()
    raise ValueError(f"unknown kernel backend {name!r}")
