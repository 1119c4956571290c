"""Block compressive-sensing simulator.

Pixels live on [0, 1].  Noise levels are quoted on the 0-255 scale and
divided by 255 internally.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .tensor import Prng

BLOCK_SIDE = 33
BLOCK_PIXELS = BLOCK_SIDE * BLOCK_SIDE

# measurement counts used for the standard rates on 33x33 blocks
_STANDARD_M = {0.25: 272, 0.10: 109, 0.04: 43, 0.01: 10}


@dataclass
class MeasurementMatrix:
    """A sensing operator ``phi`` (m x n) and where it came from.

    ``kind`` is one of ``"gaussian-orthonormal"``, ``"learned"`` or
    ``"quantized"``; quantized matrices remember ``source_kind`` and ``bits``.
    """

    phi: np.ndarray
    mr: float
    kind: str = "gaussian-orthonormal"
    seed: Optional[int] = None
    bits: Optional[int] = None
    source_kind: Optional[str] = None

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if self.phi.ndim != 2 or self.phi.shape[0] > self.phi.shape[1]:
            raise ValueError(f"measurement matrix must be m x n with m <= n, got {self.phi.shape}")

    @property
    def m(self) -> int:
        return self.phi.shape[0]

    @property
    def n(self) -> int:
        return self.phi.shape[1]

    def orthonormality_error(self) -> float:
        """max |phi phi^T - I|."""
        return float(np.abs(self.phi @ self.phi.T - np.eye(self.m)).max())


@dataclass(frozen=True)
class NoiseSpec:
    sigma_255: float = 0.0

    def __post_init__(self):
        if self.sigma_255 < 0:
            raise ValueError("noise sigma must be non-negative")

    @property
    def sigma(self) -> float:
        """Standard deviation on the internal [0, 1] pixel scale."""
        return self.sigma_255 / 255.0


def mr_to_m(mr: float, n: int = BLOCK_PIXELS) -> int:
    if not 0.0 < mr <= 1.0:
        raise ValueError(f"measurement rate must be in (0, 1], got {mr}")
    if n == BLOCK_PIXELS:
        for rate, m in _STANDARD_M.items():
            if abs(mr - rate) < 1e-12:
                return m
    return int(min(max(round(mr * n), 1), n))


def gen_gaussian_orthonormal(n: int = BLOCK_PIXELS, mr: float = 0.25, seed: int = 0,
                             max_retries: int = 8) -> MeasurementMatrix:
    """Random Gaussian matrix with orthonormalized rows.

    Rows are drawn i.i.d. N(0, 1) from ``Prng(seed)`` in row-major order,
    then orthonormalized with a Householder QR of the transpose.  Signs are
    fixed so that R has a positive diagonal, which makes the result the
    Gram-Schmidt basis of the drawn rows.  A numerically rank-deficient draw
    is retried with ``seed + 1``, ``seed + 2``, ...
    """
    m = mr_to_m(mr, n)
    for attempt in range(max_retries):
        g = Prng(seed + attempt).normal((m, n))
        q, r = np.linalg.qr(g.T)
        d = np.diag(r)
        if np.min(np.abs(d)) > 1e-8 * np.max(np.abs(d)):
            q = q * np.sign(d)
            return MeasurementMatrix(np.ascontiguousarray(q.T), mr, seed=seed + attempt)
    raise np.linalg.LinAlgError(f"rank-deficient draws for seeds {seed}..{seed + max_retries - 1}")


def _matrix(phi):
    return phi.phi if isinstance(phi, MeasurementMatrix) else np.asarray(phi, dtype=np.float64)


def sense(phi, x) -> np.ndarray:
    """y = phi x for one vectorized block or a batch of them (leading axis)."""
    p = _matrix(phi)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim > 1 and x.shape[-1] != p.shape[1]:
        # a lone 2-D block flattens to one vector; otherwise keep the batch axis
        x = x.reshape(-1) if x.ndim == 2 and x.size == p.shape[1] else x.reshape(x.shape[0], -1)
    if x.shape[-1] != p.shape[1]:
        raise ValueError(f"block has {x.shape[-1]} pixels, matrix expects {p.shape[1]}")
    return x @ p.T


def add_noise(y, spec: NoiseSpec, rng: Prng) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if spec.sigma_255 == 0:
        return y.copy()
    return y + rng.normal(y.shape, 0.0, spec.sigma)


def quantize_matrix(phi: MeasurementMatrix, bits: int = 8) -> MeasurementMatrix:
    """Round every entry to the nearest of 2**bits levels spanning [min, max]."""
    if not 1 <= bits <= 16:
        raise ValueError(f"bits must be in [1, 16], got {bits}")
    lo, hi = float(phi.phi.min()), float(phi.phi.max())
    if hi == lo:
        return phi
    step = (hi - lo) / (2 ** bits - 1)
    q = lo + np.round((phi.phi - lo) / step) * step
    source = phi.source_kind if phi.kind == "quantized" else phi.kind
    return replace(phi, phi=np.clip(q, lo, hi), kind="quantized", bits=bits, source_kind=source)


def quantization_step(phi: MeasurementMatrix, bits: int) -> float:
    return (float(phi.phi.max()) - float(phi.phi.min())) / (2 ** bits - 1)


def estimate_noise_sigma(blocks, phi) -> float:
    """Median over blocks of sqrt(||y_i - phi x_i||^2 / m).

    ``blocks`` is an iterable of ``(y_i, x_i)`` pairs.
    """
    p = _matrix(phi)
    est = [np.sqrt(np.sum((np.asarray(y) - p @ np.ravel(x)) ** 2) / p.shape[0]) for y, x in blocks]
    if not est:
        raise ValueError("need at least one block")
    return float(np.median(est))
