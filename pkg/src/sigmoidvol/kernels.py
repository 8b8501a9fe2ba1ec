"""Backend selection for the hot numerical kernels.

The compiled extension is used when it imports cleanly.  Set
``SIGMOIDVOL_BACKEND=python`` to force the numpy implementation, or
``SIGMOIDVOL_BACKEND=compiled`` to make a missing extension an error.
"""

from __future__ import annotations

import os

from . import _core_py
from ._core_py import (  # noqa: F401  backend independent helpers
    N_MARGINS,
    SIGMOID_ARCTAN,
    SIGMOID_ERF,
    SIGMOID_ERF_APPROX,
    node_margins,
    penalty_terms,
    saturation,
    sigmoid_parts,
    wing_function,
    wing_slope_margins,
)

_HOT = ("smile_derivs_batch", "evaluate_population", "erf_approx", "mills_ratio")


def _load(name: str):
    if name == "python":
        return _core_py
    if name == "compiled":
        from . import _core

        return _core
    raise ValueError(f"unknown backend {name!r}; expected 'python' or 'compiled'")


def _select():
    requested = os.environ.get("SIGMOIDVOL_BACKEND", "").strip().lower()
    if requested:
        return requested, _load(requested)
    try:
        return "compiled", _load("compiled")
    except ImportError:
        return "python", _core_py


BACKEND, _impl = _select()

smile_derivs_batch = _impl.smile_derivs_batch
evaluate_population = _impl.evaluate_population
erf_approx = _impl.erf_approx
mills_ratio = _impl.mills_ratio


def backend_module(name: str):
    """Return the kernel module for ``name`` ('python' or 'compiled')."""
    return _load(name)
