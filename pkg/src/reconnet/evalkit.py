"""Whole-image reconstruction, PSNR, evaluation sweeps and timing."""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .models import ReconNet
from .sensing import BLOCK_SIDE, MeasurementMatrix, NoiseSpec, add_noise, sense
from .tensor import Prng

CSV_HEADER = ("image", "mr", "sigma", "variant", "psnr_db", "seconds")
DEFAULT_SIGMAS = (0, 10, 20, 30)


@dataclass(frozen=True)
class TileGeometry:
    height: int
    width: int
    padded_height: int
    padded_width: int
    pad_mode: str = "reflect"

    @property
    def grid(self) -> tuple[int, int]:
        return self.padded_height // BLOCK_SIDE, self.padded_width // BLOCK_SIDE

    @property
    def n_blocks(self) -> int:
        gy, gx = self.grid
        return gy * gx


def _pad_to(size):
    return BLOCK_SIDE * math.ceil(size / BLOCK_SIDE)


def tile_blocks(img) -> tuple[np.ndarray, TileGeometry]:
    """Reflect-pad to multiples of 33 and cut raster-ordered 33x33 blocks."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected a non-empty 2-D image, got shape {img.shape}")
    h, w = img.shape
    geom = TileGeometry(h, w, _pad_to(h), _pad_to(w))
    ph, pw = geom.padded_height - h, geom.padded_width - w
    # numpy's reflect needs pad < size; symmetric-extend tiny images instead
    mode = "reflect" if ph < h and pw < w else "symmetric"
    padded = np.pad(img, ((0, ph), (0, pw)), mode=mode) if ph or pw else img
    gy, gx = geom.grid
    blocks = padded.reshape(gy, BLOCK_SIDE, gx, BLOCK_SIDE).swapaxes(1, 2).reshape(-1, BLOCK_SIDE, BLOCK_SIDE)
    return blocks.copy(), geom


def stitch_blocks(blocks, geom: TileGeometry) -> np.ndarray:
    """Inverse of :func:`tile_blocks`: reassemble, crop and clamp to [0, 1]."""
    blocks = np.asarray(blocks, dtype=np.float64)
    if blocks.shape != (geom.n_blocks, BLOCK_SIDE, BLOCK_SIDE):
        raise ValueError(f"expected {geom.n_blocks} blocks of 33x33, got {blocks.shape}")
    gy, gx = geom.grid
    img = blocks.reshape(gy, gx, BLOCK_SIDE, BLOCK_SIDE).swapaxes(1, 2)
    img = img.reshape(geom.padded_height, geom.padded_width)[: geom.height, : geom.width]
    return np.clip(img, 0.0, 1.0)


def measure_blocks(phi: MeasurementMatrix, blocks, noise: NoiseSpec, rng: Prng) -> np.ndarray:
    """Sense every block and add noise from a per-block substream.

    Block i draws its noise from ``rng.substream(i)``, so the result does
    not depend on the order in which blocks are processed.
    """
    y = sense(phi, blocks.reshape(len(blocks), -1))
    if noise.sigma_255 == 0:
        return y
    return np.stack([add_noise(y[i], noise, rng.substream(i)) for i in range(len(y))])


def reconstruct_image(model: ReconNet, phi: MeasurementMatrix, img, noise: NoiseSpec = NoiseSpec(),
                      rng: Optional[Prng] = None, clock: Callable[[], float] = time.perf_counter,
                      batch: int = 64):
    """Block-wise sense, optional noise, ReconNet forward and stitch.

    Returns ``(image, seconds)``; only the forward passes are timed.
    """
    if phi.m != model.m:
        raise ValueError(f"model expects {model.m} measurements, phi gives {phi.m}")
    blocks, geom = tile_blocks(img)
    y = measure_blocks(phi, blocks, noise, rng if rng is not None else Prng(0))
    out = np.empty_like(blocks)
    t0 = clock()
    for i in range(0, len(y), batch):
        out[i:i + batch] = model.forward(y[i:i + batch])
    seconds = clock() - t0
    return stitch_blocks(out, geom), seconds


def linear_decode(phi: MeasurementMatrix, img, noise: NoiseSpec = NoiseSpec(),
                  rng: Optional[Prng] = None) -> np.ndarray:
    """The phi^T y baseline, through the same tiling and noise path."""
    blocks, geom = tile_blocks(img)
    y = measure_blocks(phi, blocks, noise, rng if rng is not None else Prng(0))
    return stitch_blocks((y @ phi.phi).reshape(blocks.shape), geom)


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in dB; ``inf`` when the images are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def format_psnr(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


@dataclass
class EvalRow:
    image: str
    mr: float
    sigma: float
    variant: str
    psnr_db: float
    seconds: float

    def cells(self):
        return [self.image, f"{self.mr:g}", f"{self.sigma:g}", self.variant,
                format_psnr(self.psnr_db), f"{self.seconds:.6f}"]


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in self.rows:
            w.writerow(row.cells())
        return buf.getvalue()

    def write(self, path):
        Path(path).write_text(self.to_csv())

    def mean_psnr(self, **where) -> float:
        vals = [r.psnr_db for r in self.rows if all(getattr(r, k) == v for k, v in where.items())]
        return float(np.mean(vals)) if vals else math.nan


def run_eval(models, images, mrs, sigmas=DEFAULT_SIGMAS, out=None, seed: int = 0,
             clock: Callable[[], float] = time.perf_counter) -> EvalReport:
    """Sweep images x rates x noise levels for every model variant.

    ``models`` maps ``(variant, mr)`` to ``(model, phi)``.  ``images`` maps
    an image id to its pixels.  Rows come out in (image, mr, sigma, variant)
    order.  Noise for each (image, sigma) pair comes from a fixed substream
    of ``Prng(seed)``, so variants see identical measurements and re-runs
    give identical PSNRs.
    """
    variants = sorted({v for v, _ in models})
    for mr in mrs:
        if not any(m == mr for _, m in models):
            raise KeyError(f"no model for measurement rate {mr}")
    report = EvalReport()
    root = Prng(seed)
    for i, (name, img) in enumerate(images.items()):
        for mr in mrs:
            for j, sigma in enumerate(sigmas):
                rng = root.substream(i).substream(j)
                for variant in variants:
                    if (variant, mr) not in models:
                        continue
                    model, phi = models[(variant, mr)]
                    rec, secs = reconstruct_image(model, phi, img, NoiseSpec(sigma), rng, clock)
                    report.rows.append(EvalRow(name, mr, sigma, variant, psnr(img, rec), secs))
    if out is not None:
        report.write(out)
    return report


def bench(model: ReconNet, phi: MeasurementMatrix, image_side: int = 256, repeats: int = 11,
          seed: int = 0) -> float:
    """Median forward-phase seconds for reconstructing one square image."""
    if repeats < 3:
        raise ValueError("bench needs at least 3 repeats")
    img = Prng(seed).uniform((image_side, image_side))
    times = [reconstruct_image(model, phi, img)[1] for _ in range(repeats)]
    return statistics.median(times)
