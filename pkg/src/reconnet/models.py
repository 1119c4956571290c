"""ReconNet generators, the discriminator, the learnable encoder, checkpoints."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .layers import (
    ChannelsLast,
    CirculantBank,
    Conv2D,
    Dense,
    Dropout,
    Layer,
    ReLU,
    Reshape,
    Sigmoid,
    StridedConv2D,
)
from .sensing import BLOCK_PIXELS, BLOCK_SIDE, MeasurementMatrix, mr_to_m
from .tensor import Prng

# (kernel side, output maps) for the three convolutions of one unit
UNIT_PLAN = ((11, 64), (1, 32), (7, 1))
DEFAULT_INIT_STD = 0.05


class Sequential:
    """An ordered stack of layers with a flat name -> tensor view of parameters."""

    def __init__(self, layers):
        self.layers: list[Layer] = list(layers)
        names = [k for layer in self.layers for k in layer.params]
        if len(names) != len(set(names)):
            raise ValueError("parameter names must be unique")

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {k: v for layer in self.layers for k, v in layer.params.items()}

    @property
    def grads(self) -> dict[str, np.ndarray]:
        return {k: v for layer in self.layers for k, v in layer.grads.items()}

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def set_params(self, values: dict):
        own = self.params
        for k, v in values.items():
            if k not in own:
                raise KeyError(f"unknown parameter {k!r}")
            if own[k].shape != np.shape(v):
                raise ValueError(f"{k}: shape {np.shape(v)} != {own[k].shape}")
            own[k][...] = v

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


@dataclass(frozen=True)
class ReconNetSpec:
    mr: float
    n_units: int = 2
    first_stage: str = "fc"  # "fc" or "circulant"
    gamma: int = 1
    m: Optional[int] = None  # derived from mr when omitted

    def __post_init__(self):
        if self.n_units < 1:
            raise ValueError("need at least one ReconNet unit")
        if self.first_stage not in ("fc", "circulant"):
            raise ValueError(f"unknown first stage {self.first_stage!r}")
        if self.gamma < 1:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")
        if self.first_stage == "fc" and self.gamma != 1:
            raise ValueError("gamma only applies to a circulant first stage")

    @property
    def measurements(self) -> int:
        return self.m if self.m is not None else mr_to_m(self.mr)

    @property
    def channels(self) -> int:
        return self.gamma if self.first_stage == "circulant" else 1


class ReconNet(Sequential):
    """First stage (FC or circulant bank) followed by ReconNet units.

    ``forward`` maps measurements ``(B, m)`` (or a single ``(m,)`` vector) to
    blocks ``(B, 33, 33)``.  The output is not clamped.
    """

    def __init__(self, spec: ReconNetSpec, layers):
        super().__init__(layers)
        self.spec = spec

    @property
    def m(self) -> int:
        return self.spec.measurements

    @property
    def first_stage(self) -> Layer:
        return self.layers[0]

    def conv_layers(self) -> list[Conv2D]:
        return [layer for layer in self.layers if isinstance(layer, Conv2D)]

    def forward(self, y, train=False):
        y = np.asarray(y, dtype=np.float64)
        single = y.ndim == 1
        if y.shape[-1] != self.m:
            raise ValueError(f"model expects {self.m} measurements, got {y.shape[-1]}")
        out = super().forward(y[None] if single else y, train)[..., 0]
        return out[0] if single else out

    def backward(self, grad):
        return super().backward(grad[..., None])


def _conv_stack(rng, c_in, n_units, std, start=1):
    layers = []
    idx = start
    for _ in range(n_units):
        for side, c_out in UNIT_PLAN:
            k = rng.normal((side, side, c_in, c_out), 0.0, std)
            layers += [Conv2D(f"conv{idx}", k, np.zeros(c_out)), ReLU(f"relu{idx}")]
            c_in = c_out
            idx += 1
    return layers


def build_reconnet(spec: ReconNetSpec, rng: Prng, init: str = "gaussian",
                   phi: Optional[MeasurementMatrix] = None,
                   std: float = DEFAULT_INIT_STD, fc_std: Optional[float] = None) -> ReconNet:
    """Assemble a ReconNet.

    ``init="gaussian"`` draws the first stage from N(0, fc_std**2);
    ``init="phit"`` sets the FC weights to phi^T with zero bias.
    Convolution kernels are always N(0, std**2) and their biases zero.
    Parameters are drawn first-stage first, then conv1, conv2, ...
    """
    m = spec.measurements
    n = BLOCK_PIXELS
    fc_std = std if fc_std is None else fc_std
    if spec.first_stage == "fc":
        if init == "phit":
            if phi is None or phi.m != m:
                raise ValueError(f"phi^T initialization needs a {m} x {n} measurement matrix")
            W = phi.phi.T.copy()
        elif init == "gaussian":
            W = rng.normal((n, m), 0.0, fc_std)
        else:
            raise ValueError(f"unknown init {init!r}")
        first = [Dense("fc", W, np.zeros(n)), Reshape((BLOCK_SIDE, BLOCK_SIDE, 1))]
    else:
        if init != "gaussian":
            raise ValueError("circulant first stages only support gaussian init")
        c = rng.normal((spec.gamma, n), 0.0, fc_std)
        first = [CirculantBank("circ", c, m), ChannelsLast(BLOCK_SIDE)]
    return ReconNet(spec, first + _conv_stack(rng, spec.channels, spec.n_units, std))


def reconnet_forward(model: ReconNet, y) -> np.ndarray:
    return model.forward(y, train=False)


# --- discriminator ------------------------------------------------------------

D_MAPS = 4
D_KERNEL = 4
D_STRIDE = 2
D_DROPOUT = 0.5


class Discriminator(Sequential):
    """Three strided 4x4 convolutions (4 maps each), dropout, FC, sigmoid.

    ``forward`` takes blocks ``(B, 33, 33)`` and returns probabilities ``(B,)``.
    """

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        if x.shape[-2:] != (BLOCK_SIDE, BLOCK_SIDE):
            raise ValueError(f"discriminator expects 33x33 blocks, got {x.shape}")
        x = x[None] if single else x
        p = super().forward(x[..., None], train)[:, 0]
        return p[0] if single else p

    def backward(self, grad):
        return super().backward(np.asarray(grad).reshape(-1, 1))[..., 0]


def discriminator_sizes(side=BLOCK_SIDE, layers=3):
    sizes = [side]
    for _ in range(layers):
        sizes.append(StridedConv2D.out_size(sizes[-1], D_KERNEL, D_STRIDE))
    return sizes


def build_discriminator(rng: Prng, std: Optional[float] = None) -> Discriminator:
    """Discriminator with N(0, std**2) weights and zero biases.

    Without ``std`` each layer uses sqrt(2 / fan_in).
    """

    def scale(fan_in):
        return math.sqrt(2.0 / fan_in) if std is None else std

    layers = []
    c_in = 1
    for i in range(1, 4):
        k = rng.normal((D_KERNEL, D_KERNEL, c_in, D_MAPS), 0.0, scale(D_KERNEL * D_KERNEL * c_in))
        layers += [StridedConv2D(f"d_conv{i}", k, np.zeros(D_MAPS), D_STRIDE), ReLU(f"d_relu{i}")]
        c_in = D_MAPS
    s = discriminator_sizes()[-1]
    flat = s * s * D_MAPS
    layers += [
        Reshape((flat,), name="d_flatten"),
        Dropout(D_DROPOUT, rng.substream(1), name="d_dropout"),
        Dense("d_fc", rng.normal((1, flat), 0.0, scale(flat)), np.zeros(1)),
        Sigmoid("d_sigmoid"),
    ]
    return Discriminator(layers)


def discriminator_forward(model: Discriminator, block, train=False):
    return model.forward(block, train=train)


# --- encoder --------------------------------------------------------------------


class Encoder(Sequential):
    """Single bias-free linear map from a flattened block to m measurements."""

    @property
    def m(self) -> int:
        return self.layers[0].out_features

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-2:] == (BLOCK_SIDE, BLOCK_SIDE):
            x = x.reshape(x.shape[:-2] + (BLOCK_PIXELS,))
        return super().forward(x, train)

    def export_phi(self, mr: Optional[float] = None) -> MeasurementMatrix:
        W = self.layers[0].params["enc.W"].copy()
        return MeasurementMatrix(W, mr if mr is not None else self.m / BLOCK_PIXELS, kind="learned")


def build_encoder(m: int, rng: Prng, init_phi: Optional[MeasurementMatrix] = None,
                  std: Optional[float] = None) -> Encoder:
    """Bias-free linear encoder, seeded from ``init_phi`` or drawn at random."""
    if not 1 <= m <= BLOCK_PIXELS:
        raise ValueError(f"m must be in [1, {BLOCK_PIXELS}], got {m}")
    if init_phi is not None:
        if init_phi.m != m:
            raise ValueError("initial matrix has the wrong number of rows")
        W = init_phi.phi.copy()
    else:
        W = rng.normal((m, BLOCK_PIXELS), 0.0, std if std is not None else BLOCK_PIXELS ** -0.5)
    return Encoder([Dense("enc", W)])


# --- bookkeeping -------------------------------------------------------------


def param_count(model: Sequential, include_bias: bool = True, stage: Optional[str] = None) -> int:
    """Number of scalar parameters.

    ``stage`` restricts the count: ``"first"`` for the FC/circulant first
    stage, ``"convs"`` for the convolution stack, ``None`` for everything.
    """
    total = 0
    for name, value in model.params.items():
        if not include_bias and name.endswith(".b"):
            continue
        if stage == "first" and not name.startswith(("fc.", "circ.")):
            continue
        if stage == "convs" and not name.startswith("conv"):
            continue
        total += value.size
    return total


def first_layer_reduction(mr: float, gamma: int, n: int = BLOCK_PIXELS) -> float:
    """Percent fewer first-stage weights for a gamma-circulant bank vs an FC layer."""
    fc = param_count(build_reconnet(ReconNetSpec(mr, 1), Prng(0), std=0.0), False, "first")
    circ = param_count(build_reconnet(ReconNetSpec(mr, 1, "circulant", gamma), Prng(0), std=0.0),
                       False, "first")
    return 100.0 * (1.0 - circ / fc)


# --- checkpoint container ------------------------------------------------------

MAGIC = b"RCN1"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible container file."""


def write_container(path, metadata: dict, tensors: dict, magic: bytes = MAGIC,
                    dtype_code: int = 0):
    """Serialize string metadata and named float tensors (little-endian)."""
    out = bytearray(magic)
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", len(metadata))
    for k, v in metadata.items():
        kb, vb = str(k).encode(), str(v).encode()
        out += struct.pack("<H", len(kb)) + kb + struct.pack("<H", len(vb)) + vb
    out += struct.pack("<I", len(tensors))
    dt = _DTYPES[dtype_code]
    for name, t in tensors.items():
        t = np.ascontiguousarray(t, dtype=dt)
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", dtype_code, t.ndim)
        out += struct.pack(f"<{t.ndim}I", *t.shape)
        out += t.tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(out)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path, magic: bytes = MAGIC):
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != magic:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    metadata = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        (kl,) = r.unpack("<H")
        key = r.take(kl).decode()
        (vl,) = r.unpack("<H")
        metadata[key] = r.take(vl).decode()
    tensors = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        (nl,) = r.unpack("<H")
        name = r.take(nl).decode()
        code, rank = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}I")
        dt = _DTYPES[code]
        size = int(np.prod(shape)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(size), dtype=dt).reshape(shape).copy()
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: trailing bytes")
    return metadata, tensors


@dataclass
class Checkpoint:
    model: ReconNet
    phi: Optional[MeasurementMatrix]
    metadata: dict = field(default_factory=dict)


def _phi_metadata(phi: MeasurementMatrix) -> dict:
    meta = {"kind": phi.kind, "mr": repr(phi.mr)}
    if phi.seed is not None:
        meta["seed"] = str(phi.seed)
    if phi.bits is not None:
        meta["bits"] = str(phi.bits)
    if phi.source_kind is not None:
        meta["source_kind"] = phi.source_kind
    return meta


def _phi_from(meta: dict, phi) -> MeasurementMatrix:
    return MeasurementMatrix(
        phi,
        float(meta["mr"]),
        kind=meta.get("kind", "gaussian-orthonormal"),
        seed=int(meta["seed"]) if "seed" in meta else None,
        bits=int(meta["bits"]) if "bits" in meta else None,
        source_kind=meta.get("source_kind"),
    )


def save_checkpoint(model: ReconNet, path, phi: Optional[MeasurementMatrix] = None,
                    metadata: Optional[dict] = None):
    s = model.spec
    meta = {
        "model": "reconnet",
        "mr": repr(s.mr),
        "m": str(s.measurements),
        "n_units": str(s.n_units),
        "first_stage": s.first_stage,
        "gamma": str(s.gamma),
    }
    if phi is not None:
        meta.update({f"phi.{k}": v for k, v in _phi_metadata(phi).items()})
    for k, v in (metadata or {}).items():
        meta.setdefault(k, str(v))
    tensors = dict(model.params)
    if phi is not None:
        tensors["phi"] = phi.phi
    write_container(path, meta, tensors)


def load_checkpoint(path) -> Checkpoint:
    meta, tensors = read_container(path)
    if meta.get("model") != "reconnet":
        raise CheckpointError(f"{path}: not a ReconNet checkpoint")
    try:
        spec = ReconNetSpec(float(meta["mr"]), int(meta["n_units"]), meta["first_stage"],
                            int(meta["gamma"]), int(meta["m"]))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model metadata ({exc})") from exc
    model = build_reconnet(spec, Prng(0), std=0.0)
    phi_t = tensors.pop("phi", None)
    try:
        model.set_params(tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    missing = set(model.params) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    phi = None
    if phi_t is not None:
        pm = {k[4:]: v for k, v in meta.items() if k.startswith("phi.")}
        phi = _phi_from(pm, phi_t)
    return Checkpoint(model, phi, meta)


def save_matrix(phi: MeasurementMatrix, path):
    write_container(path, _phi_metadata(phi), {"phi": phi.phi})


def load_matrix(path) -> MeasurementMatrix:
    meta, tensors = read_container(path)
    if set(tensors) != {"phi"}:
        raise CheckpointError(f"{path}: expected a single 'phi' tensor, found {sorted(tensors)}")
    return _phi_from(meta, tensors["phi"])
