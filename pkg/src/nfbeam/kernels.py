"""Kernel backend selection.

The compiled Cython module is used when it was built and importable; the numpy
fallback otherwise. Set ``NFBEAM_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from nfbeam import _pykernels

_ext = None
if os.environ.get("NFBEAM_PURE_PYTHON") != "1":
    try:
        from nfbeam import _ckernels as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "cython" if _ext is not None else "python"
_impl = _ext if _ext is not None else _pykernels

# ties in a noiseless sweep are declared within this relative tolerance
TIE_RTOL = 1e-12


def codeword_table(antennas: np.ndarray, points: np.ndarray, wavenumber: float) -> np.ndarray:
    return _impl.codeword_table(
        np.ascontiguousarray(antennas, dtype=np.float64),
        np.ascontiguousarray(points, dtype=np.float64),
        float(wavenumber),
    )


def gain_sweep(table: np.ndarray, h: np.ndarray) -> np.ndarray:
    return _impl.gain_sweep(table, np.ascontiguousarray(h, dtype=np.complex128))


def subset_gains(table: np.ndarray, rows, h: np.ndarray) -> np.ndarray:
    return _impl.subset_gains(
        table,
        np.ascontiguousarray(rows, dtype=np.int64),
        np.ascontiguousarray(h, dtype=np.complex128),
    )


def first_argmax(values: np.ndarray, rtol: float = TIE_RTOL) -> int:
    return int(_impl.first_argmax(np.ascontiguousarray(values, dtype=np.float64), float(rtol)))
