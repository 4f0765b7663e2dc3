"""Daubechies wavelet basis for the repeatable modulation of an arrival.

The synthesis matrix D (signal_len x C) is materialized once per basis from
unit-coefficient inverse transforms; the state-space likelihood only needs the
few coefficients whose basis functions touch a given sample.
"""
import functools
import logging
import warnings
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import pywt

from sigmon.base import DimensionError


_LOG = logging.getLogger('sigmon.wavelet')

PRODUCTION_MODE = 'zero'
DIAGNOSTIC_MODE = 'periodization'


@dataclass(frozen=True)
class WaveletBasis:
    wavelet: str
    levels: int
    signal_len: int
    mode: str
    lengths: Tuple[int, ...]
    matrix: np.ndarray
    active: Tuple[np.ndarray, ...]
    first_row: np.ndarray
    last_row: np.ndarray

    @property
    def n_coeffs(self) -> int:
        return int(self.matrix.shape[1])

    def descriptor(self) -> dict:
        return {"wavelet": self.wavelet, "levels": self.levels, "signal_len": self.signal_len,
                "mode": self.mode, "n_coeffs": self.n_coeffs}


def _index_structure(matrix: np.ndarray) -> Tuple[Tuple[np.ndarray, ...], np.ndarray, np.ndarray]:
    nonzero = matrix != 0.0
    active = tuple(np.flatnonzero(row) for row in nonzero)
    touched = nonzero.any(axis=0)
    first = np.where(touched, nonzero.argmax(axis=0), matrix.shape[0])
    last = np.where(touched, matrix.shape[0] - 1 - nonzero[::-1].argmax(axis=0), -1)
    return active, first.astype(int), last.astype(int)


def _decompose(signal: np.ndarray, wavelet: str, levels: int, mode: str) -> List[np.ndarray]:
    with warnings.catch_warnings():
        # deep decompositions of short windows are intended
        warnings.simplefilter("ignore", UserWarning)
        return pywt.wavedec(signal, wavelet, mode=mode, level=levels)


@functools.lru_cache(maxsize=16)
def build_basis(signal_len: int = 200, levels: int = 5, wavelet: str = 'db4',
                mode: str = PRODUCTION_MODE) -> WaveletBasis:
    if signal_len < 1 or levels < 1:
        raise DimensionError(f"bad basis shape: signal_len={signal_len}, levels={levels}")
    lengths = tuple(len(c) for c in _decompose(np.zeros(signal_len), wavelet, levels, mode))
    n_coeffs = sum(lengths)
    matrix = np.empty((signal_len, n_coeffs))
    unit = np.zeros(n_coeffs)
    for c in range(n_coeffs):
        unit[c] = 1.0
        matrix[:, c] = _reconstruct(unit, lengths, wavelet, mode, signal_len)
        unit[c] = 0.0
    matrix.setflags(write=False)
    active, first, last = _index_structure(matrix)
    _LOG.debug(f"{wavelet} basis: {signal_len} samples, {levels} levels, {n_coeffs} coefficients")
    return WaveletBasis(wavelet, levels, signal_len, mode, lengths, matrix, active, first, last)


def custom_basis(matrix: np.ndarray) -> WaveletBasis:
    """Basis given by an explicit synthesis matrix; forward transform is D^T."""
    matrix = np.array(matrix, dtype=float)
    if matrix.ndim != 2:
        raise DimensionError("basis matrix must be two-dimensional")
    matrix.setflags(write=False)
    active, first, last = _index_structure(matrix)
    return WaveletBasis('custom', 0, matrix.shape[0], 'custom', (matrix.shape[1],), matrix, active, first, last)


def _reconstruct(coeffs: np.ndarray, lengths: Tuple[int, ...], wavelet: str, mode: str, signal_len: int) -> np.ndarray:
    parts = np.split(np.asarray(coeffs, dtype=float), np.cumsum(lengths)[:-1])
    return pywt.waverec(parts, wavelet, mode=mode)[:signal_len]


def dwt_forward(signal: np.ndarray, basis: WaveletBasis) -> np.ndarray:
    signal = np.asarray(signal, dtype=float)
    if signal.shape != (basis.signal_len,):
        raise DimensionError(f"signal has {signal.shape} samples, basis expects {basis.signal_len}")
    if basis.wavelet == 'custom':
        return basis.matrix.T @ signal
    return np.concatenate(_decompose(signal, basis.wavelet, basis.levels, basis.mode))


def dwt_inverse(coeffs: np.ndarray, basis: WaveletBasis) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (basis.n_coeffs,):
        raise DimensionError(f"got {coeffs.shape} coefficients, basis has {basis.n_coeffs}")
    if basis.wavelet == 'custom':
        return basis.matrix @ coeffs
    return _reconstruct(coeffs, basis.lengths, basis.wavelet, basis.mode, basis.signal_len)


def active_coefficients(sample_index: int, basis: WaveletBasis) -> np.ndarray:
    if not 0 <= sample_index < basis.signal_len:
        raise DimensionError(f"sample index {sample_index} outside [0, {basis.signal_len})")
    return basis.active[sample_index]


def filter_bank(wavelet: str = 'db4') -> Tuple[np.ndarray, np.ndarray]:
    w = pywt.Wavelet(wavelet)
    return np.asarray(w.dec_lo), np.asarray(w.dec_hi)
