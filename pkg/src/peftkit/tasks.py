"""Synthetic tasks and small adapted models for desk-scale experiments."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import adapters as ad
from . import linalg
from .errors import DimensionError
from .linalg import Rng

VAL_FRACTION = 0.2


@dataclass(frozen=True)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray  # float targets (regression) or int labels (classification)
    x_val: np.ndarray
    y_val: np.ndarray

    @property
    def is_classification(self) -> bool:
        return self.y_train.dtype.kind in "iu"

    @property
    def n_train(self) -> int:
        return self.x_train.shape[0]


@dataclass(frozen=True)
class PlantedTarget:
    """Teacher weight ``a_star * W_base / ||W_base|| + b_star * u_hat``."""

    w_base: np.ndarray
    u_hat: np.ndarray
    u_factors: tuple  # (P, Q) with P @ Q == u_hat
    a_star: float
    b_star: float

    @property
    def w_target(self) -> np.ndarray:
        return self.a_star * (self.w_base / linalg.frob_norm(self.w_base)) + self.b_star * self.u_hat


def _split(x: np.ndarray, y: np.ndarray) -> Dataset:
    n_val = int(round(VAL_FRACTION * x.shape[0]))
    cut = x.shape[0] - n_val
    return Dataset(x[:cut], y[:cut], x[cut:], y[cut:])


def gen_teacher_student(rng: Rng, n: int, m: int, r: int, a_star: float, b_star: float,
                        samples: int, noise_std: float = 0.01,
                        w_base: Optional[np.ndarray] = None) -> tuple[Dataset, PlantedTarget]:
    """Regression data from a teacher built in the MAP form with known scalars.

    ``w_base`` defaults to N(0, 1/n) entries drawn from ``rng``. The planted
    direction is the Frobenius-normalized product of two random rank-``r``
    Gaussian factors.
    """
    if not 1 <= r <= min(n, m):
        raise ValueError(f"rank {r} must lie in [1, {min(n, m)}]")
    if not noise_std >= 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    if w_base is None:
        w_base = linalg.gaussian_init(rng, n, m, 1.0 / math.sqrt(n))
    elif w_base.shape != (n, m):
        raise DimensionError("w_base", w_base.shape, (n, m))
    p = linalg.gaussian_init(rng, n, r, 1.0)
    q = linalg.gaussian_init(rng, r, m, 1.0)
    q = q / linalg.lowrank_frob_norm(p, q)
    u_hat = p @ q
    u_hat = u_hat / linalg.frob_norm(u_hat)
    target = PlantedTarget(w_base, u_hat, (p, q), float(a_star), float(b_star))

    x = linalg.gaussian_init(rng, samples, n, 1.0)
    noise = linalg.gaussian_init(rng, samples, m, noise_std)
    y = x @ target.w_target + noise
    return _split(x, y), target


def gen_gaussian_blobs(rng: Rng, n: int, classes: int, samples: int,
                       radius: float = 3.0, std: float = 1.0) -> Dataset:
    """Isotropic Gaussian classes with means evenly spaced on a circle in the
    first two coordinates; labels are balanced then shuffled."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if n < 2:
        raise ValueError("blobs need n >= 2 input dimensions")
    angles = 2.0 * math.pi * np.arange(classes) / classes
    means = np.zeros((classes, n))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    labels = (np.arange(samples) % classes)[rng.permutation(samples)]
    x = means[labels] + linalg.gaussian_init(rng, samples, n, std)
    return _split(x, labels.astype(np.int64))


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise DimensionError("mse", pred.shape, target.shape)
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy", logits.shape, labels.shape)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(labels.size)
    loss = -float(np.mean(log_p[rows, labels]))
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return loss, grad / labels.size


class Model:
    """Adapted linear layers with tanh between them (none after the last)."""

    def __init__(self, layers: Sequence[ad.AdapterState], loss: str = "mse"):
        if loss not in ("mse", "xent"):
            raise ValueError(f"unknown loss {loss!r}")
        for i in range(1, len(layers)):
            if layers[i - 1].m != layers[i].n:
                raise DimensionError(f"layers {i - 1}->{i}", layers[i - 1].base.shape,
                                     layers[i].base.shape)
        self.layers = list(layers)
        self.loss = loss

    def params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params().items()}

    def trainable_count(self) -> int:
        return sum(layer.trainable_count() for layer in self.layers)

    def map_scalars(self) -> list[tuple[float, float]]:
        return [(float(l.map_params.alpha), float(l.map_params.beta))
                for l in self.layers if l.map_params is not None]

    def forward(self, x: np.ndarray, rng: Optional[Rng] = None):
        caches = []
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h, cache = ad.forward(h, layer, rng)
            if i < last:
                h = np.tanh(h)
            caches.append((cache, h))
        return h, caches

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def loss_and_grad(self, x: np.ndarray, y: np.ndarray, rng: Optional[Rng] = None):
        return loss_and_grad(self, (x, y), rng)

    def evaluate(self, x: np.ndarray, y: np.ndarray) -> dict:
        out = self.predict(x)
        if self.loss == "mse":
            return {"loss": mse(out, y)[0]}
        return {"loss": cross_entropy(out, y)[0],
                "accuracy": float(np.mean(np.argmax(out, axis=1) == y))}


def loss_and_grad(model: Model, batch, rng: Optional[Rng] = None) -> tuple[float, dict]:
    """Mean loss over the batch and gradients for every trainable parameter,
    keyed ``"<layer>.<param>"``."""
    x, y = batch
    if x.ndim != 2 or x.shape[1] != model.layers[0].n:
        raise DimensionError("model input", x.shape, (None, model.layers[0].n))
    out, caches = model.forward(x, rng)
    loss, g = mse(out, y) if model.loss == "mse" else cross_entropy(out, y)
    grads = {}
    last = len(model.layers) - 1
    for i in range(last, -1, -1):
        cache, h = caches[i]
        if i < last:
            g = g * (1.0 - h * h)
        bundle = ad.backward(g, cache, model.layers[i])
        for k, v in bundle.as_dict().items():
            grads[f"{i}.{k}"] = v
        g = bundle.d_x
    return loss, grads


def build_model(kind, rng: Rng, sizes: Sequence[int], r: int, loss: str = "mse",
                base_weights: Optional[Sequence[np.ndarray]] = None, **adapter_kw) -> Model:
    """Adapted MLP over ``sizes``; frozen base weights are Kaiming-normal
    unless given. Each layer's rank is capped at its smaller dimension."""
    layers = []
    for i, (n, m) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = base_weights[i] if base_weights is not None else linalg.kaiming_init(rng, n, m)
        base = ad.FrozenBase.from_weight(w)
        layers.append(ad.init_adapter(kind, rng, base, min(r, n, m), **adapter_kw))
    return Model(layers, loss)


def fit_planted_scalars(data: Dataset, target: PlantedTarget, tol: float = 1e-12,
                        max_steps: int = 10_000) -> tuple[float, float, int]:
    """Full-batch gradient descent on MAP's (alpha, beta) with A, B frozen to
    the planted factors. Returns (alpha, beta, steps taken).

    With A, B fixed the training MSE is a convex quadratic in (alpha, beta),
    so a step of 1 / lambda_max of its (exact, 2 x 2) Hessian is stable.
    """
    p, q = target.u_factors
    base = ad.FrozenBase.from_weight(target.w_base)
    state = ad.AdapterState(ad.Kind.MAP, base, ad.LowRankFactors(p.copy(), q.copy(), 1.0),
                            ad.MapParams.create(base.w_fnorm, 1.0))
    x, y = data.x_train, data.y_train
    feats = np.stack([np.ravel(x @ (base.w / base.w_fnorm)), np.ravel(x @ target.u_hat)], axis=1)
    hessian = (2.0 / y.size) * feats.T @ feats
    lr = 1.0 / float(np.linalg.eigvalsh(hessian)[-1])
    alpha, beta = state.map_params.alpha, state.map_params.beta
    for step in range(1, max_steps + 1):
        out, cache = ad.map_forward(x, state)
        _, g = mse(out, y)
        grads = ad.map_backward(g, cache, state)
        alpha -= lr * grads.d_alpha
        beta -= lr * grads.d_beta
        if max(abs(grads.d_alpha), abs(grads.d_beta)) < tol:
            break
    return float(alpha), float(beta), step
