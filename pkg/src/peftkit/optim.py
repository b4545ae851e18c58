"""SGD/AdamW, the warmup-then-linear-decay schedule, and joint vs stepwise
training loops over named parameter dictionaries."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import ConfigError, DimensionError, NonFiniteError, RangeError, TrainingDiverged

MAGNITUDE_PARAMS = frozenset({"alpha", "beta", "mags"})
DIRECTION_PARAMS = frozenset({"a", "b"})


def leaf(name: str) -> str:
    return name.rsplit(".", 1)[-1]


def decays(name: str) -> bool:
    """Weight decay touches the low-rank factors only, never learned magnitudes."""
    return leaf(name) in DIRECTION_PARAMS


@dataclass(frozen=True)
class Schedule:
    warmup_steps: int
    total_steps: int
    peak_lr: float

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(
                f"need 0 <= warmup_steps ({self.warmup_steps}) <= total_steps ({self.total_steps})")
        if not self.peak_lr > 0:
            raise ConfigError(f"peak_lr must be positive, got {self.peak_lr}")


def schedule_lr(s: Schedule, step: int) -> float:
    if not 0 <= step <= s.total_steps:
        raise RangeError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    decay_span = s.total_steps - s.warmup_steps
    if decay_span == 0:
        return s.peak_lr
    return s.peak_lr * (s.total_steps - step) / decay_span


class OptKind(str, Enum):
    SGD = "sgd"
    ADAMW = "adamw"


@dataclass
class OptimizerState:
    """Hyper-parameters plus per-parameter moment buffers.

    ``step_count`` counts optimizer applications. Bias correction uses a
    per-parameter count (``param_steps``) so that a parameter frozen by a
    stepwise mask resumes with correctly corrected moments.
    """

    kind: OptKind = OptKind.ADAMW
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)
    param_steps: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = OptKind(self.kind)

    def init_buffers(self, params: dict) -> "OptimizerState":
        for name, p in params.items():
            self.param_steps.setdefault(name, 0)
            if self.kind is OptKind.ADAMW:
                self.exp_avg.setdefault(name, np.zeros(p.shape))
                self.exp_avg_sq.setdefault(name, np.zeros(p.shape))
        return self


def make_optimizer(params: dict, kind="adamw", **hyper) -> OptimizerState:
    return OptimizerState(kind=OptKind(kind), **hyper).init_buffers(params)


def _selected(params: dict, grads: dict, mask):
    for name, p in params.items():
        if mask is not None and name not in mask:
            continue
        g = grads[name]
        if np.shape(g) != p.shape:
            raise DimensionError(f"gradient for {name}", np.shape(g), p.shape)
        yield name, p, g


def adamw_step(opt: OptimizerState, params: dict, grads: dict, lr: Optional[float] = None,
               mask: Optional[Iterable[str]] = None) -> dict:
    """Update ``params`` in place; names outside ``mask`` are left bit-identical."""
    lr = opt.lr if lr is None else lr
    mask = None if mask is None else set(mask)
    b1, b2 = opt.beta1, opt.beta2
    for name, p, g in _selected(params, grads, mask):
        if name not in opt.exp_avg:
            opt.init_buffers({name: p})
        t = opt.param_steps[name] + 1
        m = opt.exp_avg[name]
        v = opt.exp_avg_sq[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        if opt.weight_decay and decays(name):
            p *= 1.0 - lr * opt.weight_decay
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + opt.eps)
        opt.param_steps[name] = t
    opt.step_count += 1
    return params


def sgd_step(opt: OptimizerState, params: dict, grads: dict, lr: Optional[float] = None,
             mask: Optional[Iterable[str]] = None) -> dict:
    lr = opt.lr if lr is None else lr
    mask = None if mask is None else set(mask)
    for name, p, g in _selected(params, grads, mask):
        if opt.weight_decay and decays(name):
            p *= 1.0 - lr * opt.weight_decay
        p -= lr * g
        opt.param_steps[name] = opt.param_steps.get(name, 0) + 1
    opt.step_count += 1
    return params


def apply_step(opt: OptimizerState, params: dict, grads: dict, lr: Optional[float] = None,
               mask: Optional[Iterable[str]] = None) -> dict:
    step = adamw_step if opt.kind is OptKind.ADAMW else sgd_step
    return step(opt, params, grads, lr, mask)


@dataclass(frozen=True)
class OptMode:
    """``joint`` updates everything each step; ``stepwise`` alternates blocks
    of ``period`` steps on magnitudes (alpha, beta, DoRA mags) and on the
    low-rank factors, starting with magnitudes."""

    mode: str = "joint"
    period: int = 1

    def __post_init__(self):
        if self.mode not in ("joint", "stepwise"):
            raise ConfigError(f"unknown optimization mode {self.mode!r}")
        if self.period < 1:
            raise ConfigError(f"stepwise period must be >= 1, got {self.period}")

    def mask(self, step: int, trainable: Iterable[str]) -> frozenset:
        names = frozenset(trainable)
        if self.mode == "stepwise":
            group = MAGNITUDE_PARAMS if (step // self.period) % 2 == 0 else DIRECTION_PARAMS
            names = frozenset(n for n in names if leaf(n) in group)
        if not names:
            raise ConfigError(f"step {step}: no trainable parameters selected ({self.mode})")
        return names


@dataclass
class StepRow:
    step: int
    lr: float
    loss: float
    alpha: tuple = ()
    beta: tuple = ()
    step_ms: float = math.nan


def _norms(params: dict) -> dict:
    return {k: float(np.linalg.norm(np.ravel(v))) for k, v in params.items()}


def run_phase(
    model,
    batch_at: Callable[[int], tuple],
    opt: OptimizerState,
    schedule: Schedule,
    mode: OptMode,
    trainable: Optional[Iterable[str]] = None,
    *,
    steps: Optional[Iterable[int]] = None,
    rng=None,
) -> list[StepRow]:
    """Run optimizer steps ``steps`` (default: the whole schedule) and return one row per step.

    ``model`` must provide ``params()``, ``loss_and_grad(x, y, rng)`` and
    ``map_scalars()``. The loss in each row is the pre-update batch loss; the
    alpha/beta columns are the post-update values.
    """
    params = model.params()
    trainable = list(params) if trainable is None else list(trainable)
    if not trainable:
        raise ConfigError("trainable parameter set is empty")
    unknown = set(trainable) - set(params)
    if unknown:
        raise ConfigError(f"unknown trainable parameters: {sorted(unknown)}")
    steps = range(schedule.total_steps) if steps is None else steps
    rows = []
    for step in steps:
        t0 = time.perf_counter()
        lr = schedule_lr(schedule, step)
        mask = mode.mask(step, trainable)
        x, y = batch_at(step)
        try:
            loss, grads = model.loss_and_grad(x, y, rng)
        except NonFiniteError as exc:
            raise TrainingDiverged(step, lr, _norms(params)) from exc
        if not math.isfinite(loss):
            raise TrainingDiverged(step, lr, _norms(params))
        apply_step(opt, params, grads, lr, mask)
        elapsed = (time.perf_counter() - t0) * 1e3
        scalars = model.map_scalars()
        rows.append(StepRow(step, lr, loss, tuple(a for a, _ in scalars),
                            tuple(b for _, b in scalars), elapsed))
    return rows
