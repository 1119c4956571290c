"""Low-level numerical kernels.

Tensors are plain ``numpy.ndarray`` objects in float64, row-major.  Image
tensors use the channels-last layout ``(H, W, C)`` or ``(B, H, W, C)``.
Convolutions are cross-correlations (no kernel flip).
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Prng",
    "gaussian_fill",
    "matmul",
    "conv2d_same",
    "conv2d_grads",
    "relu",
    "relu_grad",
    "dft",
    "idft",
    "circulant_matrix",
    "circular_convolve_direct",
    "circular_convolve_fft",
    "circular_correlate_fft",
    "grad_check",
]

_MASK64 = (1 << 64) - 1
_TWO_M53 = 2.0 ** -53


class Prng:
    """Deterministic random stream.

    Bits come from the counter-based Philox-4x64 generator keyed by
    ``(seed, stream)``.  Uniform doubles take the top 53 bits of each
    64-bit word; Gaussian draws use the Box-Muller transform on consecutive
    uniform pairs, cosine branch first.  Output therefore depends only on
    ``seed``, ``stream`` and the sequence of calls.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._bits = np.random.Philox(key=self.seed | (self.stream << 64))

    def __repr__(self):
        return f"Prng(seed={self.seed}, stream={self.stream})"

    def substream(self, index: int) -> "Prng":
        """Independent stream derived from this generator's seed."""
        return Prng(self.seed, (self.stream * 0x9E3779B97F4A7C15 + int(index) + 1) & _MASK64)

    def uniform(self, size=None) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        n = 1 if size is None else int(np.prod(size))
        raw = self._bits.random_raw(n)
        u = (raw >> np.uint64(11)).astype(np.float64) * _TWO_M53
        return u[0] if size is None else u.reshape(size)

    def normal(self, size=None, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        n = 1 if size is None else int(np.prod(size))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))  # 1 - u lies in (0, 1]
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        z = mean + std * z.reshape(-1)[:n]
        return z[0] if size is None else z.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def integers(self, high: int, size=None) -> np.ndarray:
        """Integers in [0, high)."""
        u = self.uniform(size)
        return np.minimum((u * high).astype(np.int64), high - 1)


def gaussian_fill(t: np.ndarray, mean: float, std: float, rng: Prng) -> np.ndarray:
    """Fill ``t`` in place, in row-major order, with N(mean, std**2) draws."""
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    t[...] = rng.normal(t.shape, mean, std) if t.size else t
    return t


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ValueError("matmul expects vectors or matrices")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


# --- convolution -----------------------------------------------------------


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected (H, W, C) or (B, H, W, C), got shape {x.shape}")
    return x, False


def _check_kernel(x, k):
    if k.ndim != 4:
        raise ValueError(f"kernel must be (kh, kw, c_in, c_out), got {k.shape}")
    kh, kw, cin, _ = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    if x.shape[-1] != cin:
        raise ValueError(f"input has {x.shape[-1]} channels, kernel expects {cin}")


def _correlate_same(x, k):
    """Same-padded cross-correlation of a (B, H, W, Cin) batch, no bias.

    Two equivalent strategies: im2col (one wide GEMM against the unrolled
    input) when the kernel fans out, and kn2row (GEMM first, then a shifted
    sum of kh*kw partial maps) when it fans in.  The second avoids building
    a kh*kw*Cin-wide column matrix only to multiply it by a thin kernel.
    """
    b, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    k = np.ascontiguousarray(k)  # flipped views have negative strides, which defeat BLAS
    if kh == 1 and kw == 1:
        return (x.reshape(-1, cin) @ k[0, 0]).reshape(b, h, w, cout)
    if cin <= cout:
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # b,h,w,cin,kh,kw
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, kh * kw * cin)
        return (cols @ k.reshape(kh * kw * cin, cout)).reshape(b, h, w, cout)
    # z[dy, dx, co] is the full-size map x . k[dy, dx, :, co]; shift and sum
    kk = k.transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
    z = (kk @ x.reshape(-1, cin).T).reshape(kh, kw, cout, b, h, w)
    out = np.zeros((cout, b, h, w))
    for dy in range(kh):
        r0, r1 = max(0, ph - dy), min(h, h + ph - dy)
        for dx in range(kw):
            c0, c1 = max(0, pw - dx), min(w, w + pw - dx)
            out[:, :, r0:r1, c0:c1] += z[dy, dx, :, :, r0 + dy - ph:r1 + dy - ph, c0 + dx - pw:c1 + dx - pw]
    return out.transpose(1, 2, 3, 0)


def conv2d_same(x, k, bias=None) -> np.ndarray:
    """Zero-padded ("same") 2-D cross-correlation.

    Parameters
    ----------
    x : ndarray, shape (H, W, Cin) or (B, H, W, Cin)
    k : ndarray, shape (kh, kw, Cin, Cout), kh and kw odd
    bias : ndarray, shape (Cout,), optional

    Returns
    -------
    ndarray with the spatial extents of ``x`` and ``Cout`` channels.
    """
    xb, squeeze = _as_batch(x)
    k = np.asarray(k, dtype=np.float64)
    _check_kernel(xb, k)
    out = _correlate_same(xb, k)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (k.shape[3],):
            raise ValueError(f"bias shape {bias.shape} does not match {k.shape[3]} outputs")
        out += bias
    return out[0] if squeeze else out


def conv2d_grads(x, k, grad_out):
    """Gradients of :func:`conv2d_same` with respect to input, kernel and bias."""
    xb, squeeze = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    k = np.asarray(k, dtype=np.float64)
    _check_kernel(xb, k)
    kh, kw, cin, cout = k.shape
    if gb.shape != xb.shape[:3] + (cout,):
        raise ValueError(f"grad_out shape {gb.shape} inconsistent with input {xb.shape}")
    b, h, w, _ = xb.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2

    grad_bias = gb.sum(axis=(0, 1, 2))
    # the input gradient is a same-correlation of grad_out with the
    # spatially flipped, channel-transposed kernel
    grad_x = _correlate_same(gb, k[::-1, ::-1].transpose(0, 1, 3, 2))

    if kh == 1 and kw == 1:
        grad_k = (xb.reshape(-1, cin).T @ gb.reshape(-1, cout)).reshape(1, 1, cin, cout)
    elif cin <= cout:
        xp = np.pad(xb, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, kh * kw * cin)
        grad_k = (cols.T @ gb.reshape(-1, cout)).reshape(kh, kw, cin, cout)
    else:
        xp = np.pad(xb, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        gp = np.pad(gb, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
        win = sliding_window_view(gp, (kh, kw), axis=(1, 2))[..., ::-1, ::-1]
        gcols = win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * cout)
        gk = xp.reshape(-1, cin).T @ gcols
        grad_k = gk.reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
    if squeeze:
        grad_x = grad_x[0]
    return grad_x, grad_k, grad_bias


def relu(x) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x, grad_out) -> np.ndarray:
    return np.where(np.asarray(x) > 0, grad_out, 0.0)


# --- arbitrary-length Fourier transform and circular convolution ----------


def _next_pow2(n):
    return 1 << (n - 1).bit_length()


def _bluestein(x, sign):
    n = x.shape[-1]
    k = np.arange(n)
    # k^2 reduced mod 2n keeps the chirp phase exact for large n
    chirp = np.exp(sign * 1j * np.pi * ((k * k) % (2 * n)) / n)
    L = _next_pow2(2 * n - 1)
    a = np.zeros(x.shape[:-1] + (L,), dtype=np.complex128)
    a[..., :n] = x * chirp
    filt = np.zeros(L, dtype=np.complex128)
    filt[:n] = np.conj(chirp)
    filt[L - n + 1:] = np.conj(chirp[1:])[::-1]
    conv = np.fft.ifft(np.fft.fft(a, axis=-1) * np.fft.fft(filt), axis=-1)
    return conv[..., :n] * chirp


def dft(x) -> np.ndarray:
    """Forward DFT along the last axis for any length.

    Power-of-two lengths go straight to a radix-2 FFT; every other length is
    mapped onto one through the chirp-z (Bluestein) identity.
    """
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n == 0:
        raise ValueError("empty transform")
    if n & (n - 1) == 0:
        return np.fft.fft(x, axis=-1)
    return _bluestein(x, -1.0)


def idft(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.complex128)
    return np.conj(dft(np.conj(X))) / X.shape[-1]


def circulant_matrix(c) -> np.ndarray:
    """Dense circ(c): first column c, each further column shifted down by one."""
    c = np.asarray(c, dtype=np.float64)
    n = c.shape[0]
    idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
    return c[idx]


def _check_lengths(c, x):
    c = np.asarray(c, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if c.shape[-1] != x.shape[-1]:
        raise ValueError(f"length mismatch: {c.shape[-1]} vs {x.shape[-1]}")
    return c, x


def circular_convolve_direct(c, x) -> np.ndarray:
    """y[i] = sum_j c[(i - j) mod n] x[j], evaluated term by term (O(n^2))."""
    c, x = _check_lengths(c, x)
    if c.ndim != 1 or x.ndim != 1:
        raise ValueError("direct circular convolution takes 1-D inputs")
    n = c.shape[0]
    y = np.zeros(n)
    for j in range(n):
        y += np.roll(c, j) * x[j]
    return y


def circular_convolve_fft(c, x) -> np.ndarray:
    """Circular convolution through the DFT; broadcasts over leading axes."""
    c, x = _check_lengths(c, x)
    return idft(dft(c) * dft(x)).real


def circular_correlate_fft(g, x) -> np.ndarray:
    """r[t] = sum_i g[i] x[(i - t) mod n]; the adjoint of convolving by x."""
    g, x = _check_lengths(g, x)
    return idft(dft(g) * np.conj(dft(x))).real


# --- verification ------------------------------------------------------------


def grad_check(fn, params, eps: float = 1e-5, indices=None) -> float:
    """Compare an analytic gradient with central finite differences.

    Parameters
    ----------
    fn : callable
        ``fn(params) -> (value, grad)`` with ``grad`` shaped like ``params``.
    params : ndarray
        Point of evaluation.  Not modified.
    eps : float
        Finite-difference half step.
    indices : iterable of int, optional
        Flat indices to check; all entries by default.

    Returns
    -------
    float
        ``max |a - f| / max(|a|, |f|, 1e-8)`` over the checked entries.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = np.array(params, dtype=np.float64)
    value, analytic = fn(p.copy())
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite function value {value}")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    flat = p.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = fn(p.copy())[0]
        flat[i] = old - eps
        fm = fn(p.copy())[0]
        flat[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value near entry {i}")
        num = (fp - fm) / (2 * eps)
        a = analytic[i]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    return worst
