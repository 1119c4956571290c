"""Differentiable layers and the training losses.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``grads`` on ``backward``.  Batches
are the leading axis throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Prng, conv2d_grads, conv2d_same, dft, idft

BCE_EPS = 1e-7


class Layer:
    """Base class: no parameters, identity shapes."""

    name = ""
    frozen = False

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def _add_param(self, key, value):
        full = f"{self.name}.{key}"
        self.params[full] = np.asarray(value, dtype=np.float64)
        self.grads[full] = np.zeros_like(self.params[full])
        return full

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError


class Dense(Layer):
    """y = W x + b on a batch of row vectors.  ``W`` has shape (out, in)."""

    def __init__(self, name, W, b=None):
        super().__init__()
        self.name = name
        self.kW = self._add_param("W", W)
        self.kb = self._add_param("b", b) if b is not None else None
        if b is not None and self.params[self.kb].shape != (self.params[self.kW].shape[0],):
            raise ValueError("bias length must equal the number of outputs")

    @property
    def in_features(self):
        return self.params[self.kW].shape[1]

    @property
    def out_features(self):
        return self.params[self.kW].shape[0]

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_features:
            raise ValueError(f"{self.name}: expected {self.in_features} inputs, got {x.shape[-1]}")
        self._x = x
        y = x @ self.params[self.kW].T
        if self.kb is not None:
            y = y + self.params[self.kb]
        return y

    def backward(self, grad_out):
        if not self.frozen:
            self.grads[self.kW] += grad_out.T @ self._x
            if self.kb is not None:
                self.grads[self.kb] += grad_out.sum(axis=0)
        return grad_out @ self.params[self.kW]


class CirculantBank(Layer):
    """Bank of ``gamma`` circulant layers sharing one zero-padded input.

    The length-M input is padded with N - M zeros and circularly convolved
    with each row of ``c`` (shape (gamma, N)).  The output is laid out as
    ``(B, gamma, N)``.
    """

    def __init__(self, name, c, in_features):
        super().__init__()
        self.name = name
        self.kc = self._add_param("c", np.atleast_2d(c))
        n = self.params[self.kc].shape[1]
        if in_features > n:
            raise ValueError(f"input length {in_features} exceeds circulant size {n}")
        self.in_features = in_features

    @property
    def size(self):
        return self.params[self.kc].shape[1]

    @property
    def gamma(self):
        return self.params[self.kc].shape[0]

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_features:
            raise ValueError(f"{self.name}: expected {self.in_features} inputs, got {x.shape[-1]}")
        xp = np.zeros(x.shape[:-1] + (self.size,))
        xp[..., : self.in_features] = x
        self._fx = dft(xp)[:, None, :]
        self._fc = dft(self.params[self.kc])[None]
        return idft(self._fc * self._fx).real

    def backward(self, grad_out):
        fg = dft(grad_out)
        if not self.frozen:
            # correlation of grad_out with the padded input, summed over the batch
            self.grads[self.kc] += idft((fg * np.conj(self._fx)).sum(axis=0)).real
        gx = idft((fg * np.conj(self._fc)).sum(axis=1)).real
        return gx[..., : self.in_features]


class Conv2D(Layer):
    """Same-padded convolution, kernel (kh, kw, c_in, c_out)."""

    def __init__(self, name, k, b):
        super().__init__()
        self.name = name
        self.kk = self._add_param("k", k)
        self.kb = self._add_param("b", b)

    def forward(self, x, train=False):
        self._x = x
        return conv2d_same(x, self.params[self.kk], self.params[self.kb])

    def backward(self, grad_out):
        gx, gk, gb = conv2d_grads(self._x, self.params[self.kk], grad_out)
        if not self.frozen:
            self.grads[self.kk] += gk
            self.grads[self.kb] += gb
        return gx


def strided_conv_valid(x, k, bias, stride):
    """Valid (unpadded) strided cross-correlation of a (B, H, W, C) batch."""
    kh, kw, cin, cout = k.shape
    if x.shape[-1] != cin:
        raise ValueError(f"input has {x.shape[-1]} channels, kernel expects {cin}")
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    b, ho, wo = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, kh * kw * cin)
    return (cols @ k.reshape(-1, cout) + bias).reshape(b, ho, wo, cout), cols


class StridedConv2D(Layer):
    """Unpadded convolution with a stride; used only by the discriminator."""

    def __init__(self, name, k, b, stride=2):
        super().__init__()
        self.name = name
        self.stride = stride
        self.kk = self._add_param("k", k)
        self.kb = self._add_param("b", b)

    @staticmethod
    def out_size(size, kernel, stride):
        return (size - kernel) // stride + 1

    def forward(self, x, train=False):
        self._shape = x.shape
        y, self._cols = strided_conv_valid(x, self.params[self.kk], self.params[self.kb], self.stride)
        return y

    def backward(self, grad_out):
        k = self.params[self.kk]
        kh, kw, cin, cout = k.shape
        g = grad_out.reshape(-1, cout)
        if not self.frozen:
            self.grads[self.kk] += (self._cols.T @ g).reshape(k.shape)
            self.grads[self.kb] += g.sum(axis=0)
        b, ho, wo, _ = grad_out.shape
        z = (g @ k.reshape(-1, cout).T).reshape(b, ho, wo, kh, kw, cin)
        gx = np.zeros(self._shape)
        s = self.stride
        for dy in range(kh):
            for dx in range(kw):
                gx[:, dy:dy + s * ho:s, dx:dx + s * wo:s, :] += z[:, :, :, dy, dx, :]
        return gx


class ReLU(Layer):
    def __init__(self, name="relu"):
        super().__init__()
        self.name = name

    def forward(self, x, train=False):
        self._mask = x > 0
        return np.maximum(x, 0.0)

    def backward(self, grad_out):
        return grad_out * self._mask


class Sigmoid(Layer):
    def __init__(self, name="sigmoid"):
        super().__init__()
        self.name = name

    def forward(self, x, train=False):
        self._y = sigmoid(x)
        return self._y

    def backward(self, grad_out):
        return grad_out * self._y * (1.0 - self._y)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class Dropout(Layer):
    """Inverted dropout: train-time survivors are scaled by 1/(1-p)."""

    def __init__(self, p, rng: Prng, name="dropout"):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.name = name
        self.p = p
        self.rng = rng
        self._scale = None

    def forward(self, x, train=False, mask=None):
        if not train or self.p == 0.0:
            self._scale = None
            return x
        if mask is None:
            mask = self.rng.uniform(x.shape) >= self.p
        self._scale = mask / (1.0 - self.p)
        return x * self._scale

    def backward(self, grad_out):
        return grad_out if self._scale is None else grad_out * self._scale


class Reshape(Layer):
    def __init__(self, shape, name="reshape"):
        super().__init__()
        self.name = name
        self.shape = tuple(shape)

    def forward(self, x, train=False):
        self._in = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, grad_out):
        return grad_out.reshape(self._in)


class ChannelsLast(Layer):
    """(B, gamma, N) circulant outputs to (B, side, side, gamma) feature maps."""

    def __init__(self, side, name="to_maps"):
        super().__init__()
        self.name = name
        self.side = side

    def forward(self, x, train=False):
        b, g, _ = x.shape
        return x.reshape(b, g, self.side, self.side).transpose(0, 2, 3, 1)

    def backward(self, grad_out):
        b = grad_out.shape[0]
        return grad_out.transpose(0, 3, 1, 2).reshape(b, grad_out.shape[3], -1)


# --- losses --------------------------------------------------------------------


@dataclass
class LossValue:
    value: float
    grad: np.ndarray


def euclidean_loss(pred, target) -> LossValue:
    """Mean over the batch of per-sample squared L2 errors.

    The leading axis is the batch; all remaining axes are summed.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.ndim == 0 or pred.shape[0] < 1:
        raise ValueError("need a batch of at least one sample")
    b = pred.shape[0]
    diff = pred - target
    return LossValue(float(np.sum(diff * diff) / b), (2.0 / b) * diff)


def bce_loss(prob, label, eps: float = BCE_EPS) -> LossValue:
    """Binary cross-entropy, averaged over entries.

    ``prob`` is clamped to ``[eps, 1 - eps]`` before the logarithms.  The
    returned gradient is that of the unclamped expression evaluated at the
    clamped probability, so saturated predictions still pass a finite,
    non-zero signal back.
    """
    prob = np.asarray(prob, dtype=np.float64)
    label = np.broadcast_to(np.asarray(label, dtype=np.float64), prob.shape)
    p = np.clip(prob, eps, 1.0 - eps)
    n = max(prob.size, 1)
    value = -(label * np.log(p) + (1.0 - label) * np.log1p(-p)).sum() / n
    grad = (-label / p + (1.0 - label) / (1.0 - p)) / n
    return LossValue(float(value), grad)
