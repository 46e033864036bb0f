"""Radix-2 FFT used by the estimation pipeline.

Convention: ``fft`` is the plain unnormalised DFT, ``ifft`` carries the
1/N factor, so ``ifft(fft(x)) == x``.  Both operate along the last axis
and accept power-of-two lengths only.
"""

import numpy as np

from .errors import ValidationError

# per-length cache of (bit-reversal permutation, per-stage twiddle tables)
_PLANS: dict[int, tuple[np.ndarray, list[np.ndarray]]] = {}


def _plan(n: int) -> tuple[np.ndarray, list[np.ndarray]]:
    plan = _PLANS.get(n)
    if plan is None:
        bits = n.bit_length() - 1
        rev = np.zeros(n, dtype=np.intp)
        for i in range(n):
            rev[i] = int(format(i, f"0{bits}b")[::-1], 2) if bits else 0
        twiddles = []
        m = 2
        while m <= n:
            twiddles.append(np.exp(-2j * np.pi * np.arange(m // 2) / m))
            m *= 2
        plan = (rev, twiddles)
        _PLANS[n] = plan
    return plan


def fft(x: np.ndarray) -> np.ndarray:
    """Unnormalised DFT along the last axis (length must be a power of two)."""
    x = np.asarray(x)
    n = x.shape[-1]
    if n < 1 or n & (n - 1):
        raise ValidationError(f"fft length must be a power of two, got {n}")
    rev, twiddles = _plan(n)
    y = np.ascontiguousarray(x[..., rev], dtype=np.complex128)
    m = 2
    for w in twiddles:
        half = m // 2
        v = y.reshape(*y.shape[:-1], n // m, m)
        t = v[..., half:] * w
        u = v[..., :half].copy()
        v[..., :half] = u + t
        v[..., half:] = u - t
        m *= 2
    return y


def ifft(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft`; carries the 1/N normalisation."""
    x = np.asarray(x)
    return np.conj(fft(np.conj(x))) / x.shape[-1]
