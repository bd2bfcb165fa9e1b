"""Reference results the simulator is checked against.

Nothing here imports the engine, the mapper or the MAC array; the
integer oracles use plain Python ints and the float oracles use numpy in
double precision.
"""
import math
from fractions import Fraction

import numpy as np


def requantize(acc, shift, relu=False):
    """Round-half-to-even of acc / 2**shift, then optional ReLU."""
    value = round(Fraction(int(acc), 1 << shift)) if shift else int(acc)
    return max(value, 0) if relu else value


def full_width_mul(a, w):
    return int(a) * int(w)


def relative_rms(actual, expected):
    actual = np.asarray(actual, dtype=np.complex128)
    expected = np.asarray(expected, dtype=np.complex128)
    norm = np.sqrt(np.mean(np.abs(expected) ** 2))
    if norm == 0:
        return float(np.sqrt(np.mean(np.abs(actual) ** 2)))
    return float(np.sqrt(np.mean(np.abs(actual - expected) ** 2)) / norm)


# -- transforms in double precision ---------------------------------------------

def dft(x, inverse=False):
    """Direct O(N^2) DFT, unscaled in both directions."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.size
    k = np.arange(n)
    sign = 1.0 if inverse else -1.0
    basis = np.exp(sign * 2j * np.pi * np.outer(k, k) / n)
    return basis @ x


def dct_matrix(size=8):
    c = np.zeros((size, size))
    for m in range(size):
        alpha = math.sqrt((1 if m == 0 else 2) / size)
        for k in range(size):
            c[m, k] = alpha * math.cos((2 * k + 1) * m * math.pi / (2 * size))
    return c


def dct2d(block):
    """Orthonormal 2-D DCT-II of one square block."""
    block = np.asarray(block, dtype=np.float64)
    c = dct_matrix(block.shape[0])
    return c @ block @ c.T


def dwt(x, lo, hi, levels):
    """Multi-level stride-2 filter bank with zero extension on the right.

    Returns [hi_1, ..., hi_levels, lo_levels] as float arrays.
    """
    approx = np.asarray(x, dtype=np.float64)
    out = []
    for _ in range(levels):
        padded = np.concatenate([approx, np.zeros(len(lo) + len(hi))])
        half = approx.size // 2
        lo_part = np.array([np.dot(lo, padded[2 * i:2 * i + len(lo)]) for i in range(half)])
        hi_part = np.array([np.dot(hi, padded[2 * i:2 * i + len(hi)]) for i in range(half)])
        out.append(hi_part)
        approx = lo_part
    out.append(approx)
    return out


# -- exact integer oracles -------------------------------------------------------

def fir(x, h):
    """Causal FIR accumulators: y[n] = sum_k h[k] * x[n-k]."""
    x = [int(v) for v in x]
    h = [int(v) for v in h]
    y = []
    for n in range(len(x)):
        acc = 0
        for k, coeff in enumerate(h):
            if n - k >= 0:
                acc += coeff * x[n - k]
        y.append(acc)
    return y


def conv2d(x, w, stride=1, pad=(0, 0)):
    """Exact integer conv. x is HxWxC, w is MxKHxKWxC; returns OHxOWxM accumulators."""
    x = np.asarray(x, dtype=object)
    w = np.asarray(w, dtype=object)
    h, width, c = x.shape
    m, kh, kw, _ = w.shape
    pad_h, pad_w = pad
    oh = (h + 2 * pad_h - kh) // stride + 1
    ow = (width + 2 * pad_w - kw) // stride + 1
    out = np.zeros((oh, ow, m), dtype=object)
    for oy in range(oh):
        for ox in range(ow):
            for mm in range(m):
                acc = 0
                for ky in range(kh):
                    iy = oy * stride + ky - pad_h
                    if not 0 <= iy < h:
                        continue
                    for kx in range(kw):
                        ix = ox * stride + kx - pad_w
                        if not 0 <= ix < width:
                            continue
                        for cc in range(c):
                            acc += int(x[iy, ix, cc]) * int(w[mm, ky, kx, cc])
                out[oy, ox, mm] = acc
    return out


def conv_layer(x, w, stride=1, pad=(0, 0), shift=0, relu=False):
    acc = conv2d(x, w, stride, pad)
    return np.vectorize(lambda v: requantize(v, shift, relu), otypes=[np.int64])(acc)


def dwt_fixed(x, lo_q, hi_q, levels, shift):
    """Integer filter bank with per-level requantization by `shift`."""
    approx = [int(v) for v in x]
    out = []
    for _ in range(levels):
        half = len(approx) // 2

        def tap(coeffs, i):
            acc = 0
            for k, c in enumerate(coeffs):
                j = 2 * i + k
                if j < len(approx):
                    acc += int(c) * approx[j]
            return requantize(acc, shift)

        lo_part = [tap(lo_q, i) for i in range(half)]
        out.append([tap(hi_q, i) for i in range(half)])
        approx = lo_part
    out.append(approx)
    return out


def _bit_reverse(i, bits):
    r = 0
    for _ in range(bits):
        r = (r << 1) | (i & 1)
        i >>= 1
    return r


def fixed_fft(re, im, bits, inverse=False):
    """Radix-2 DIT FFT in fixed point, halving at every stage.

    Twiddles are Q(bits-2) and rounded half-to-even; every butterfly output is
    (p + w*q) / 2 rounded half-to-even. Returns (re, im) lists in natural order
    holding approximately DFT(x) / n.
    """
    n = len(re)
    stages = n.bit_length() - 1
    one = 1 << (bits - 2)
    shift = bits - 1
    data = [(int(re[_bit_reverse(i, stages)]), int(im[_bit_reverse(i, stages)])) for i in range(n)]
    sign = 1.0 if inverse else -1.0
    for s in range(stages):
        h = 1 << s
        for t in range(h):
            theta = math.pi * t / h
            wr = round(math.cos(theta) * one)
            wi = round(sign * math.sin(theta) * one)
            for start in range(0, n, 2 * h):
                p, q = start + t, start + t + h
                pr, pi = data[p]
                qr, qi = data[q]
                tr = wr * qr - wi * qi
                ti = wi * qr + wr * qi
                data[p] = (requantize(one * pr + tr, shift), requantize(one * pi + ti, shift))
                data[q] = (requantize(one * pr - tr, shift), requantize(one * pi - ti, shift))
    return [d[0] for d in data], [d[1] for d in data]
