"""Exact discrete Fourier transforms for arbitrary lengths.

Conventions, fixed across the whole package:

    dft(x)[j]  =  sum_n exp(-2i*pi*n*j/L) * x[n]          (unnormalized)
    idft(X)[k] =  (1/L) * sum_n exp(+2i*pi*k*n/L) * X[n]  (1/L inverse)

so ``idft(dft(x)) == x`` and Parseval reads ``sum |x|^2 == (1/L) sum |X|^2``.

Lengths are never padded: padding would shift which bin a given frequency
lands in, and downstream frequency masks are indexed by bin. Power-of-two
lengths run an iterative radix-2 algorithm, short other lengths use the
direct O(L^2) matrix, and everything else goes through the Bluestein
chirp-z reduction to a power-of-two convolution.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _node

__all__ = ["Spectrum", "dft", "idft", "dft_batch", "idft_batch", "dft_t", "idft_t"]

_DIRECT_MAX = 128


def _bit_reverse_indices(levels):
    idx = np.arange(1 << levels)
    rev = np.zeros_like(idx)
    for _ in range(levels):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


_pow2_plans = {}


def _pow2_plan(length, sign):
    """Cached bit-reversal permutation and per-level twiddle factors."""
    key = (length, sign)
    plan = _pow2_plans.get(key)
    if plan is None:
        levels = length.bit_length() - 1
        twiddles = [
            np.exp(sign * 2j * np.pi * np.arange(1 << lv) / (2 << lv))
            for lv in range(levels)
        ]
        plan = (_bit_reverse_indices(levels), twiddles)
        _pow2_plans[key] = plan
    return plan


def _fft_pow2(rows, sign):
    """Iterative radix-2 transform of (R, L) rows, L a power of two."""
    r, length = rows.shape
    rev, twiddles = _pow2_plan(length, sign)
    a = rows[:, rev]
    m = 2
    for w in twiddles:
        half = m // 2
        v = a.reshape(r, length // m, m)
        t = v[:, :, half:] * w
        v[:, :, half:] = v[:, :, :half] - t
        v[:, :, :half] += t
        m *= 2
    return a


def _chirp(length, sign):
    # n^2 reduced mod 2L in exact integers keeps the phase accurate for
    # long signals, where pi*n^2/L would lose low-order bits.
    n = np.arange(length, dtype=np.int64)
    m2 = (n * n) % (2 * length)
    return np.exp(sign * 1j * np.pi * m2 / length)


def _fft_bluestein(rows, sign):
    """Arbitrary-length transform via chirp-z over a radix-2 convolution."""
    r, length = rows.shape
    c = _chirp(length, sign)
    m = 1 << (2 * length - 1).bit_length()

    u = np.zeros((r, m), dtype=np.complex128)
    u[:, :length] = rows * c

    cc = np.conj(c)
    v = np.zeros(m, dtype=np.complex128)
    v[:length] = cc
    v[m - length + 1:] = cc[1:][::-1]

    conv = _fft_pow2(_fft_pow2(u, -1) * _fft_pow2(v[None, :], -1), +1) / m
    return conv[:, :length] * c


def _dft_direct(rows, sign):
    length = rows.shape[1]
    n = np.arange(length, dtype=np.int64)
    angles = (n[:, None] * n[None, :]) % length
    matrix = np.exp(sign * 2j * np.pi * angles / length)
    return rows @ matrix


def _transform_rows(rows, sign):
    length = rows.shape[1]
    if length == 1:
        return rows.copy()
    if length & (length - 1) == 0:
        return _fft_pow2(rows, sign)
    if length <= _DIRECT_MAX:
        return _dft_direct(rows, sign)
    return _fft_bluestein(rows, sign)


def _transform(a, sign, axis=-1):
    a = np.asarray(a)
    if a.shape[axis] == 0:
        raise ValueError("transform length must be at least 1")
    out_dtype = np.complex64 if a.dtype in (np.float32, np.complex64) else np.complex128
    moved = np.moveaxis(a, axis, -1)
    rows = np.ascontiguousarray(moved, dtype=np.complex128).reshape(-1, moved.shape[-1])
    out = _transform_rows(rows, sign).reshape(moved.shape)
    return np.moveaxis(out, -1, axis).astype(out_dtype, copy=False)


def dft(x, axis=-1):
    """Unnormalized forward transform along `axis` (default: a 1-D signal)."""
    return _transform(x, -1, axis)


def idft(x, axis=-1):
    """Inverse transform along `axis`, carrying the 1/L normalization."""
    x = np.asarray(x)
    return _transform(x, +1, axis) / x.shape[axis]


@dataclass
class Spectrum:
    """Complex coefficients of a (batch, channels, length) signal array.

    For real input signals the coefficients satisfy conjugate symmetry,
    values[..., j] == conj(values[..., (L - j) % L]).
    """

    values: np.ndarray
    origin_length: int


def dft_batch(batch):
    """Transform every (batch, channel) row of a (B, C, L) array."""
    batch = np.asarray(batch)
    if batch.ndim != 3:
        raise ValueError(f"dft_batch expects a (B, C, L) array, got {batch.shape}")
    return Spectrum(_transform(batch, -1), batch.shape[-1])


def idft_batch(spec):
    """Inverse of :func:`dft_batch`; accepts a Spectrum or a (B, C, L) array."""
    values = spec.values if isinstance(spec, Spectrum) else np.asarray(spec)
    if values.ndim != 3:
        raise ValueError(f"idft_batch expects a (B, C, L) array, got {values.shape}")
    return _transform(values, +1) / values.shape[-1]


# -- differentiable wrappers -------------------------------------------------
#
# Both transforms are linear maps; the vector-Jacobian product of a linear
# map with matrix M is multiplication by the conjugate transpose, which for
# these symmetric transform matrices is again a transform of the other sign.


def dft_t(x, axis=-1):
    """Differentiable forward transform of a Tensor along `axis`."""
    out = _transform(x.data, -1, axis)

    def backward(g):
        return (_transform(g, +1, axis),)

    return _node(out, (x,), backward)


def idft_t(x, axis=-1):
    """Differentiable inverse transform (1/L normalized) of a Tensor."""
    length = x.data.shape[axis]
    out = _transform(x.data, +1, axis) / length

    def backward(g):
        return (_transform(g, -1, axis) / length,)

    return _node(out, (x,), backward)
