"""Pure-numpy fallback for the compiled kernels in ``_ckernels.pyx``."""

from __future__ import annotations

import numpy as np


def codeword_table(antennas: np.ndarray, points: np.ndarray, wavenumber: float) -> np.ndarray:
    d = np.linalg.norm(points[:, None, :] - antennas[None, :, :], axis=2)
    return np.exp(-1j * wavenumber * d) / np.sqrt(antennas.shape[0])


def gain_sweep(table: np.ndarray, h: np.ndarray) -> np.ndarray:
    return np.abs(table.conj() @ h) ** 2


def subset_gains(table: np.ndarray, rows: np.ndarray, h: np.ndarray) -> np.ndarray:
    return np.abs(table[rows].conj() @ h) ** 2


def first_argmax(values: np.ndarray, rtol: float) -> int:
    vmax = values.max()
    return int(np.flatnonzero(values >= vmax - rtol * abs(vmax))[0])
