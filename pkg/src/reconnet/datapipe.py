"""Image I/O, luminance conversion, patch extraction and patch datasets.

Gray images are 2-D float64 arrays with pixels on [0, 1].
"""

from __future__ import annotations

import math
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .sensing import BLOCK_SIDE
from .tensor import Prng

PATCH_STRIDE = 14
TRAIN, VAL = 0, 1


class ImageFormatError(ValueError):
    """Unsupported or malformed image file."""


class DatasetError(ValueError):
    """Malformed or truncated dataset container."""


# --- PGM ------------------------------------------------------------------------


def _pgm_header(data):
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # a single whitespace byte ends the header


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM with maxval <= 255 as floats v / 255."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise ImageFormatError(f"{path}: unsupported format {data[:2]!r}, only binary P5 PGM is read")
    (_, w, h, maxval), pos = _pgm_header(data)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: bad PGM header") from exc
    if maxval > 255 or maxval < 1:
        raise ImageFormatError(f"{path}: maxval {maxval} not supported")
    payload = data[pos:pos + w * h]
    if len(payload) != w * h:
        raise ImageFormatError(f"{path}: truncated payload ({len(payload)} of {w * h} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w) / 255.0


def to_uint8(img) -> np.ndarray:
    """Scale [0, 1] pixels to 0..255, rounding halves away from zero."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def write_pgm(img, path):
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("write_pgm expects a 2-D gray image")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(to_uint8(img).tobytes())


def rgb_to_luma(r, g, b):
    """BT.601 luma 0.299 R + 0.587 G + 0.114 B of [0, 1] channels."""
    chans = [np.asarray(c, dtype=np.float64) for c in (r, g, b)]
    if any(np.any((c < 0) | (c > 1)) for c in chans):
        warnings.warn("RGB values outside [0, 1] were clamped", RuntimeWarning, stacklevel=2)
        chans = [np.clip(c, 0.0, 1.0) for c in chans]
    y = 0.299 * chans[0] + 0.587 * chans[1] + 0.114 * chans[2]
    return float(y) if y.ndim == 0 else y


def read_image(path) -> np.ndarray:
    """Read PGM directly, anything else through Pillow, as a gray [0, 1] image."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover
        raise ImageFormatError(f"{path}: Pillow is needed for non-PGM images") from exc
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    return rgb_to_luma(arr[..., 0], arr[..., 1], arr[..., 2])


IMAGE_SUFFIXES = (".pgm", ".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def list_images(directory):
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# --- patches ----------------------------------------------------------------


@dataclass
class PatchDataset:
    """33x33 blocks with provenance.

    ``patches`` is stored as float32, the container's storage precision,
    so a save/load round trip is exact.  ``coords`` holds the (x0, y0)
    top-left corner of each patch in its source image.
    """

    patches: np.ndarray = field(default_factory=lambda: np.zeros((0, BLOCK_SIDE, BLOCK_SIDE), np.float32))
    sources: list = field(default_factory=list)
    coords: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.uint32))
    split: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint8))

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float32)
        self.coords = np.asarray(self.coords, dtype=np.uint32).reshape(-1, 2)
        self.split = np.asarray(self.split, dtype=np.uint8)
        n = len(self.patches)
        if not (len(self.sources) == len(self.coords) == len(self.split) == n):
            raise ValueError("patches, sources, coords and split must have equal lengths")

    def __len__(self):
        return len(self.patches)

    @property
    def side(self) -> int:
        return self.patches.shape[1] if len(self) else BLOCK_SIDE

    def subset(self, mask_or_idx) -> "PatchDataset":
        idx = np.arange(len(self))[mask_or_idx]
        return PatchDataset(self.patches[idx], [self.sources[i] for i in idx],
                            self.coords[idx], self.split[idx])

    def train(self) -> "PatchDataset":
        return self.subset(self.split == TRAIN)

    def val(self) -> "PatchDataset":
        return self.subset(self.split == VAL)

    def blocks(self) -> np.ndarray:
        """Patches as float64, shape (N, 33, 33)."""
        return self.patches.astype(np.float64)

    @staticmethod
    def concat(parts) -> "PatchDataset":
        parts = list(parts)
        if not parts:
            return PatchDataset()
        return PatchDataset(
            np.concatenate([p.patches for p in parts]),
            [s for p in parts for s in p.sources],
            np.concatenate([p.coords for p in parts]),
            np.concatenate([p.split for p in parts]),
        )


def patch_grid(h, w, size=BLOCK_SIDE, stride=PATCH_STRIDE):
    return (h - size) // stride + 1, (w - size) // stride + 1


def extract_patches(img, size: int = BLOCK_SIDE, stride: int = PATCH_STRIDE,
                    source: str = "") -> PatchDataset:
    """All size x size windows at the given stride, in raster order."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} is smaller than a {size}x{size} patch")
    win = sliding_window_view(img, (size, size))[::stride, ::stride]
    ny, nx = win.shape[:2]
    ys, xs = np.meshgrid(np.arange(ny) * stride, np.arange(nx) * stride, indexing="ij")
    coords = np.stack([xs.ravel(), ys.ravel()], axis=1)
    n = ny * nx
    return PatchDataset(win.reshape(n, size, size), [source] * n, coords, np.zeros(n, np.uint8))


def split_train_val(ds: PatchDataset, val_fraction: float, seed: int) -> PatchDataset:
    """Tag floor(val_fraction * N) randomly chosen patches as validation."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
    n = len(ds)
    n_val = int(math.floor(val_fraction * n + 1e-9))
    split = np.zeros(n, np.uint8)
    split[Prng(seed).permutation(n)[:n_val]] = VAL
    return PatchDataset(ds.patches, list(ds.sources), ds.coords, split)


# --- dataset container -------------------------------------------------------

DATASET_MAGIC = b"RCD1"
DATASET_VERSION = 1


def save_dataset(ds: PatchDataset, path):
    side = ds.side
    out = bytearray(DATASET_MAGIC)
    out += struct.pack("<IIH", DATASET_VERSION, len(ds), side)
    for i in range(len(ds)):
        name = ds.sources[i].encode()
        out += struct.pack("<I", len(name)) + name
        x0, y0 = (int(v) for v in ds.coords[i])
        out += struct.pack("<IIB", x0, y0, int(ds.split[i]))
        out += ds.patches[i].astype("<f4").tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(out)
    os.replace(tmp, path)


def load_dataset(path) -> PatchDataset:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise DatasetError(f"{path}: truncated dataset")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != DATASET_MAGIC:
        raise DatasetError(f"{path}: bad magic")
    version, count, side = struct.unpack("<IIH", take(10))
    if version != DATASET_VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    per_patch = side * side * 4
    # every patch needs at least its fixed-size fields
    if count * (13 + per_patch) > len(data) - pos:
        raise DatasetError(f"{path}: patch count {count} exceeds file size")
    patches = np.empty((count, side, side), np.float32)
    sources, coords, split = [], np.empty((count, 2), np.uint32), np.empty(count, np.uint8)
    for i in range(count):
        (nl,) = struct.unpack("<I", take(4))
        sources.append(take(nl).decode())
        x0, y0, tag = struct.unpack("<IIB", take(9))
        if tag not in (TRAIN, VAL):
            raise DatasetError(f"{path}: bad split tag {tag} at patch {i}")
        coords[i] = (x0, y0)
        split[i] = tag
        patches[i] = np.frombuffer(take(per_patch), dtype="<f4").reshape(side, side)
    if pos != len(data):
        raise DatasetError(f"{path}: trailing bytes")
    return PatchDataset(patches, sources, coords, split)


def dataset_from_images(paths, stride: int = PATCH_STRIDE) -> PatchDataset:
    return PatchDataset.concat(
        extract_patches(read_image(p), stride=stride, source=Path(p).name) for p in paths
    )


# --- desk-scale corpus --------------------------------------------------------

TRAIN_IMAGES = ("camera", "astronaut", "coffee", "chelsea", "rocket", "moon", "brick", "immunohistochemistry")
TEST_IMAGES = ("coins", "clock", "cat", "hubble_deep_field", "page", "grass")


def sample_image(name: str, side: int = 256) -> np.ndarray:
    """A scikit-image sample picture as a side x side gray image.

    The picture is center-cropped to a square, area-resampled and
    re-quantized to the 8-bit grid so it survives a PGM round trip exactly.
    """
    from skimage import data, transform

    img = np.asarray(getattr(data, name)())
    if img.dtype == bool:
        img = img.astype(np.float64)
    elif img.dtype == np.uint8:
        img = img / 255.0
    if img.ndim == 3:
        img = rgb_to_luma(img[..., 0], img[..., 1], img[..., 2])
    h, w = img.shape
    s = min(h, w)
    img = img[(h - s) // 2:(h - s) // 2 + s, (w - s) // 2:(w - s) // 2 + s]
    img = transform.resize(img, (side, side), anti_aliasing=True, order=1)
    return to_uint8(img) / 255.0


def write_sample_corpus(directory, names=TRAIN_IMAGES, side: int = 256):
    """Write sample pictures as PGM files; returns their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in names:
        p = directory / f"{name}.pgm"
        write_pgm(sample_image(name, side), p)
        paths.append(p)
    return paths
