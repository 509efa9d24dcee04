"""Iterative radix-2 Cooley-Tukey FFT, vectorized over leading axes."""

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=32)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=64)
def _twiddles(size: int, inverse: bool) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    return np.exp(sign * 2j * np.pi * np.arange(size // 2) / size)


def fft(x, inverse: bool = False) -> np.ndarray:
    """1-D DFT along the last axis. Length must be a power of two."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n < 1 or n & (n - 1):
        raise ValueError(f"length {n} is not a power of two")
    lead = x.shape[:-1]
    x = x[..., _bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        blocks = x.reshape(*lead, n // size, size)
        even = blocks[..., :half].copy()
        odd = blocks[..., half:] * _twiddles(size, inverse)
        blocks[..., :half] += odd
        blocks[..., half:] = even - odd
        size *= 2
    if inverse:
        x = x / n
    return x


def fft2(x) -> np.ndarray:
    """2-D DFT over the last two axes."""
    y = fft(x)
    return np.swapaxes(fft(np.swapaxes(y, -1, -2)), -1, -2)


def ifft2(x) -> np.ndarray:
    y = fft(x, inverse=True)
    return np.swapaxes(fft(np.swapaxes(y, -1, -2), inverse=True), -1, -2)
