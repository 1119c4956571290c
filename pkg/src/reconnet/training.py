"""Optimizers and training procedures."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .datapipe import PatchDataset
from .layers import bce_loss, euclidean_loss
from .models import (
    DEFAULT_INIT_STD,
    Discriminator,
    Encoder,
    ReconNet,
    ReconNetSpec,
    build_reconnet,
)
from .sensing import MeasurementMatrix, sense
from .tensor import Prng

log = logging.getLogger(__name__)

LR_GRID = (1e-2, 1e-3, 1e-4)


class TrainingDiverged(FloatingPointError):
    """A loss became NaN or infinite."""

    def __init__(self, iteration, loss):
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


# --- optimizers ---------------------------------------------------------------


@dataclass
class OptimizerState:
    """Per-parameter moments (Adam) or velocity (SGD) and a step counter."""

    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)
    step: int = 0


def _check(params, grads):
    for k, g in grads.items():
        if params[k].shape != g.shape:
            raise ValueError(f"{k}: gradient shape {g.shape} != parameter shape {params[k].shape}")


def sgd_step(params: dict, grads: dict, state: OptimizerState, lr: float, momentum: float = 0.9):
    """v <- momentum v - lr g;  p <- p + v.  Updates ``params`` in place."""
    _check(params, grads)
    for k, g in grads.items():
        v = state.first.get(k)
        if v is None:
            v = state.first[k] = np.zeros_like(g)
        v *= momentum
        v -= lr * g
        params[k] += v
    state.step += 1


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Adam with bias-corrected moments.  Updates ``params`` in place."""
    _check(params, grads)
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, g in grads.items():
        m = state.first.get(k)
        if m is None:
            m = state.first[k] = np.zeros_like(g)
            state.second[k] = np.zeros_like(g)
        v = state.second[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class TrainConfig:
    batch_size: int = 128
    iterations: int = 1000
    learning_rate: float = 1e-4
    optimizer: str = "sgd"  # "sgd" or "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    validation_fraction: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def step(self, params, grads, state, lr=None):
        lr = self.learning_rate if lr is None else lr
        if self.optimizer == "sgd":
            sgd_step(params, grads, state, lr, self.momentum)
        else:
            adam_step(params, grads, state, lr, self.beta1, self.beta2, self.eps)


@dataclass
class GanConfig:
    lambda_rec: float = 1.0
    lambda_adv: float = 1e-4
    lr_g: float = 1e-3
    lr_d: float = 1e-5
    g_steps_per_d: int = 2
    iterations: int = 100_000
    batch_size: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lambda_rec < 0 or self.lambda_adv < 0:
            raise ValueError("loss weights must be non-negative")
        if self.g_steps_per_d < 1:
            raise ValueError("g_steps_per_d must be >= 1")


# --- data --------------------------------------------------------------------


def _blocks(data) -> np.ndarray:
    if isinstance(data, PatchDataset):
        return data.blocks()
    return np.asarray(data, dtype=np.float64).reshape(-1, 33, 33)


class BatchSampler:
    """Epoch-shuffled mini-batches of indices.

    The order is reshuffled from the run generator at every epoch boundary.
    Batches larger than the dataset are capped at the dataset size.
    """

    def __init__(self, n: int, batch_size: int, rng: Prng):
        if n < 1:
            raise ValueError("empty training set")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def __iter__(self):
        return self

    def __next__(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def _check_finite(it, value):
    if not math.isfinite(value):
        raise TrainingDiverged(it, value)


def _trainable(model, names):
    params, grads = model.params, model.grads
    if names is None:
        return params, grads
    return {k: params[k] for k in names}, {k: grads[k] for k in names}


def euclidean_gradients(model: ReconNet, y, x) -> float:
    """Forward, loss and backward on one batch; gradients land in ``model.grads``."""
    model.zero_grad()
    out = model.forward(y, train=True)
    loss = euclidean_loss(out, x)
    model.backward(loss.grad)
    return loss.value


def mean_loss(model: ReconNet, y, x, chunk: int = 64) -> float:
    """Mean per-block squared error of ``model`` over a whole set."""
    total = 0.0
    for i in range(0, len(x), chunk):
        diff = model.forward(y[i:i + chunk]) - x[i:i + chunk]
        total += float(np.sum(diff * diff))
    return total / len(x)


def train_euclidean(model: ReconNet, dataset, phi: MeasurementMatrix, cfg: TrainConfig,
                    trainable=None, callback: Optional[Callable] = None):
    """Mini-batch training on (phi x, x) pairs with the Euclidean loss.

    ``trainable`` optionally restricts updates to the named parameters.
    ``callback(iteration, loss, model)`` runs after every update.
    Returns ``(model, loss_history)``; history entry i is the batch loss
    evaluated before update i.
    """
    x = _blocks(dataset)
    if phi.m != model.m:
        raise ValueError(f"model expects {model.m} measurements, phi gives {phi.m}")
    y = sense(phi, x.reshape(len(x), -1))
    rng = Prng(cfg.seed)
    sampler = BatchSampler(len(x), cfg.batch_size, rng)
    state = OptimizerState()
    history = np.empty(cfg.iterations)
    for it in range(cfg.iterations):
        idx = next(sampler)
        loss = euclidean_gradients(model, y[idx], x[idx])
        _check_finite(it, loss)
        history[it] = loss
        params, grads = _trainable(model, trainable)
        cfg.step(params, grads, state)
        if callback is not None:
            callback(it, loss, model)
    return model, history


def lr_grid_search(make_model: Callable[[], ReconNet], dataset, valset, phi, cfg: TrainConfig,
                   grid=LR_GRID):
    """Train one model per learning rate; keep the lowest validation loss.

    Diverged runs are discarded.  Returns ``(best_lr, model, val_losses)``.
    """
    xv = _blocks(valset)
    yv = sense(phi, xv.reshape(len(xv), -1))
    results = {}
    best = None
    for lr in grid:
        model = make_model()
        try:
            train_euclidean(model, dataset, phi, _with_lr(cfg, lr))
        except TrainingDiverged as exc:
            log.info("lr %g diverged: %s", lr, exc)
            results[lr] = math.inf
            continue
        results[lr] = mean_loss(model, yv, xv)
        if best is None or results[lr] < results[best[0]]:
            best = (lr, model)
    if best is None:
        raise TrainingDiverged(-1, math.nan)
    return best[0], best[1], results


def _with_lr(cfg, lr):
    new = copy.copy(cfg)
    new.learning_rate = lr
    return new


def select_by_validation(models, valset, phi):
    """The candidate with the lowest mean Euclidean loss; first wins ties.

    ``phi`` is a single measurement matrix or one per candidate.
    """
    models = list(models)
    if not models:
        raise ValueError("no candidate models")
    phis = phi if isinstance(phi, (list, tuple)) else [phi] * len(models)
    xv = _blocks(valset)
    best, best_loss = None, math.inf
    for model, p in zip(models, phis):
        loss = mean_loss(model, sense(p, xv.reshape(len(xv), -1)), xv)
        if best is None or loss < best_loss:
            best, best_loss = model, loss
    return best


# --- adversarial training ------------------------------------------------------


def generator_gradients(G: ReconNet, D: Discriminator, y, x, cfg: GanConfig):
    """Gradients of lambda_rec * Euclidean + lambda_adv * BCE(D(G(y)), 1).

    Gradients land in ``G.grads``; the discriminator's own gradients are
    cleared afterwards because only G is stepped.  Returns
    ``(total, euclidean, adversarial, grad_wrt_measurements)``.
    """
    G.zero_grad()
    out = G.forward(y, train=True)
    rec = euclidean_loss(out, x)
    grad = rec.grad if cfg.lambda_rec == 1.0 else cfg.lambda_rec * rec.grad
    adv_value = 0.0
    if cfg.lambda_adv != 0.0:
        p = D.forward(out, train=True)
        adv = bce_loss(p, 1.0)
        adv_value = adv.value
        grad = grad + cfg.lambda_adv * D.backward(adv.grad)
        D.zero_grad()
    gy = G.backward(grad)
    total = cfg.lambda_rec * rec.value + cfg.lambda_adv * adv_value
    return total, rec.value, adv_value, gy


def discriminator_gradients(D: Discriminator, real, fake):
    """Gradients of BCE(D(real), 1) + BCE(D(fake), 0), batch-averaged."""
    D.zero_grad()
    p_real = D.forward(real, train=True)
    l_real = bce_loss(p_real, 1.0)
    D.backward(l_real.grad)
    p_fake = D.forward(fake, train=True)
    l_fake = bce_loss(p_fake, 0.0)
    D.backward(l_fake.grad)
    return l_real.value + l_fake.value, p_real, p_fake


@dataclass
class GanHistory:
    g_loss: list = field(default_factory=list)
    g_rec: list = field(default_factory=list)
    g_adv: list = field(default_factory=list)
    d_loss: list = field(default_factory=list)
    d_real: list = field(default_factory=list)  # mean D(x) per D update
    d_fake: list = field(default_factory=list)  # mean D(G(y)) per D update
    g_updates: int = 0
    d_updates: int = 0


def train_adversarial(G: ReconNet, D: Discriminator, dataset, phi: Optional[MeasurementMatrix],
                      cfg: GanConfig, encoder: Optional[Encoder] = None,
                      callback: Optional[Callable] = None):
    """Alternating generator/discriminator training.

    Each outer iteration makes ``g_steps_per_d`` Adam updates of G on fresh
    batches, then one Adam update of D on a fresh batch.  With an
    ``encoder`` the measurements are ``encoder(x)`` and the encoder is
    updated together with G; otherwise they are ``phi x``.
    """
    x_all = _blocks(dataset)
    flat = x_all.reshape(len(x_all), -1)
    y_all = None if encoder is not None else sense(phi, flat)
    rng = Prng(cfg.seed)
    sampler = BatchSampler(len(x_all), cfg.batch_size, rng)
    g_state, d_state = OptimizerState(), OptimizerState()
    hist = GanHistory()
    steps_per_epoch = max(1, len(x_all) // sampler.batch_size)
    saturated_run = 0
    sat_eps = 1e-3

    def measure(idx):
        if encoder is None:
            return y_all[idx]
        return encoder.forward(flat[idx], train=True)

    def g_params():
        params, grads = dict(G.params), dict(G.grads)
        if encoder is not None:
            params.update(encoder.params)
            grads.update(encoder.grads)
        return params, grads

    for it in range(cfg.iterations):
        for _ in range(cfg.g_steps_per_d):
            idx = next(sampler)
            if encoder is not None:
                encoder.zero_grad()
            total, rec, adv, gy = generator_gradients(G, D, measure(idx), x_all[idx], cfg)
            _check_finite(it, total)
            if encoder is not None:
                encoder.backward(gy)
            params, grads = g_params()
            adam_step(params, grads, g_state, cfg.lr_g, cfg.beta1, cfg.beta2, cfg.eps)
            hist.g_updates += 1
            hist.g_loss.append(total)
            hist.g_rec.append(rec)
            hist.g_adv.append(adv)

        idx = next(sampler)
        fake = G.forward(measure(idx))
        d_loss, p_real, p_fake = discriminator_gradients(D, x_all[idx], fake)
        _check_finite(it, d_loss)
        adam_step(D.params, D.grads, d_state, cfg.lr_d, cfg.beta1, cfg.beta2, cfg.eps)
        hist.d_updates += 1
        hist.d_loss.append(d_loss)
        hist.d_real.append(float(np.mean(p_real)))
        hist.d_fake.append(float(np.mean(p_fake)))

        probs = np.concatenate([p_real, p_fake])
        if np.all((probs < sat_eps) | (probs > 1 - sat_eps)):
            saturated_run += 1
            if saturated_run == steps_per_epoch:
                log.warning("discriminator saturated for a full epoch (iteration %d)", it)
        else:
            saturated_run = 0
        if callback is not None:
            callback(it, hist)
    return G, D, hist


# --- joint measurement learning -------------------------------------------------


def train_autoencoder(encoder: Encoder, decoder: ReconNet, dataset, cfg: TrainConfig,
                      callback: Optional[Callable] = None):
    """Train a linear encoder and a ReconNet decoder end to end on (x, x).

    Returns ``(learned_phi, decoder, loss_history)``.
    """
    if encoder.m != decoder.m:
        raise ValueError(f"encoder gives {encoder.m} measurements, decoder expects {decoder.m}")
    x = _blocks(dataset)
    flat = x.reshape(len(x), -1)
    rng = Prng(cfg.seed)
    sampler = BatchSampler(len(x), cfg.batch_size, rng)
    state = OptimizerState()
    history = np.empty(cfg.iterations)
    for it in range(cfg.iterations):
        idx = next(sampler)
        encoder.zero_grad()
        decoder.zero_grad()
        out = decoder.forward(encoder.forward(flat[idx], train=True), train=True)
        rec = euclidean_loss(out, x[idx])
        loss = rec.value
        _check_finite(it, loss)
        history[it] = loss
        encoder.backward(decoder.backward(rec.grad))
        params = {**encoder.params, **decoder.params}
        grads = {**encoder.grads, **decoder.grads}
        cfg.step(params, grads, state)
        if callback is not None:
            callback(it, loss, decoder)
    return encoder.export_phi(), decoder, history


# --- FC-only retraining ---------------------------------------------------------


def finetune_fc(base: ReconNet, new_phi: MeasurementMatrix, dataset, cfg: TrainConfig,
                iterations: int = 1000, fc_std: float = DEFAULT_INIT_STD) -> ReconNet:
    """Retrain only a fresh FC first stage on top of frozen convolutions.

    The returned model is a new object; ``base`` is left untouched.
    """
    if base.spec.first_stage != "fc":
        raise ValueError("FC-only retraining needs a base model with an FC first stage")
    spec = ReconNetSpec(new_phi.mr, base.spec.n_units, "fc", 1, new_phi.m)
    rng = Prng(cfg.seed)
    model = build_reconnet(spec, rng, fc_std=fc_std, std=0.0)
    model.set_params({k: v for k, v in base.params.items() if not k.startswith("fc.")})
    fc_names = [k for k in model.params if k.startswith("fc.")]
    for layer in model.conv_layers():
        layer.frozen = True
    cfg = _with_iterations(cfg, iterations)
    train_euclidean(model, dataset, new_phi, cfg, trainable=fc_names)
    for layer in model.conv_layers():
        layer.frozen = False
    return model


def _with_iterations(cfg, iterations):
    new = copy.copy(cfg)
    new.iterations = iterations
    return new


# --- histories -------------------------------------------------------------------


def write_history_csv(path, loss, d_loss=None, g_adv=None):
    """Loss history as CSV: iteration, loss[, d_loss, g_adv_loss]."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["iteration", "loss"]
        if d_loss is not None:
            header += ["d_loss", "g_adv_loss"]
        w.writerow(header)
        for i, v in enumerate(loss):
            row = [i, repr(float(v))]
            if d_loss is not None:
                row += [repr(float(d_loss[i])) if i < len(d_loss) else "",
                        repr(float(g_adv[i])) if i < len(g_adv) else ""]
            w.writerow(row)
