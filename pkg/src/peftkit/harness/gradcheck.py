"""Central finite-difference verification of the analytic backward passes."""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from .. import adapters as ad
from .. import linalg, tasks
from ..errors import PeftError
from ..linalg import Rng
from .config import TrainConfig

THRESHOLD = 1e-5
STEP = 1e-6

GradHook = Callable[[str, dict], dict]


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``arr``.

    ``arr`` is perturbed in place and restored exactly afterwards.
    """
    out = np.zeros(arr.shape)
    flat = arr.reshape(-1)
    assert np.shares_memory(flat, arr)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f()
        flat[i] = orig - h
        f_minus = f()
        flat[i] = orig
        out.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * h)
    return out


def rel_error(analytic, numeric) -> float:
    """Largest absolute discrepancy relative to the group's gradient scale."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    diff = float(np.max(np.abs(a - n))) if a.size else 0.0
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)))
    if diff == 0.0:
        return 0.0
    return diff / scale if scale > 0 else math.inf


def randomize_point(state: ad.AdapterState, rng: Rng) -> ad.AdapterState:
    """Move a freshly initialized adapter to a generic point (B != 0) in place."""
    b = state.factors.b
    b[...] = linalg.gaussian_init(rng, *b.shape, 1.0 / math.sqrt(b.shape[0]))
    if state.dora_params is not None:
        state.dora_params.mags[...] *= 1.0 + 0.2 * rng.uniform(state.m)
    if state.map_params is not None:
        state.map_params.beta[...] = 0.5 + rng.uniform(1)[0]
    return state


def check_layer(state: ad.AdapterState, rng: Rng, batch: int = 4, h: float = STEP,
                grad_hook: Optional[GradHook] = None) -> dict[str, float]:
    """Errors of every gradient group for the objective ``sum(g_y * y)``."""
    x = linalg.gaussian_init(rng, batch, state.n, 1.0)
    g_y = linalg.gaussian_init(rng, batch, state.m, 1.0)
    dropout_state = rng.derive(7).get_state()

    def dropout_rng():
        return Rng.from_state(dropout_state) if state.dropout_p > 0 else None

    _, cache = ad.forward(x, state, dropout_rng())
    bundle = ad.backward(g_y, cache, state)
    analytic = bundle.as_dict()
    analytic["x"] = bundle.d_x
    if grad_hook is not None:
        analytic = grad_hook("layer", analytic)

    def objective() -> float:
        return float(np.sum(g_y * ad.forward(x, state, dropout_rng())[0]))

    report = {}
    for name, p in state.params().items():
        report[name] = rel_error(analytic[name], numeric_grad(objective, p, h))
    report["x"] = rel_error(analytic["x"], numeric_grad(objective, x, h))
    return report


def check_model(model: tasks.Model, x: np.ndarray, y: np.ndarray, h: float = STEP,
                grad_hook: Optional[GradHook] = None) -> dict[str, float]:
    _, analytic = tasks.loss_and_grad(model, (x, y))
    if grad_hook is not None:
        analytic = grad_hook("model", analytic)

    def objective() -> float:
        return tasks.loss_and_grad(model, (x, y))[0]

    return {name: rel_error(analytic[name], numeric_grad(objective, p, h))
            for name, p in model.params().items()}


def gradcheck_layer_for(config: TrainConfig, rng: Rng) -> ad.AdapterState:
    w = linalg.gaussian_init(rng, config.n, config.m, 1.0)
    state = ad.init_adapter(config.adapter_kind, rng, ad.FrozenBase.from_weight(w), config.r,
                            lora_alpha=config.lora_alpha, beta_init=config.beta_init,
                            b_init_std=config.b_init_std, dropout_p=config.dropout_p)
    return randomize_point(state, rng)


def gradcheck_model_for(config: TrainConfig, rng: Rng, batch: int = 4):
    """Two-layer tanh MLP n -> m -> classes with cross-entropy loss."""
    sizes = [config.n, config.m, config.classes]
    model = tasks.build_model(config.adapter_kind, rng, sizes, config.r, loss="xent",
                              lora_alpha=config.lora_alpha, beta_init=config.beta_init,
                              b_init_std=config.b_init_std)
    for layer in model.layers:
        randomize_point(layer, rng)
    x = linalg.gaussian_init(rng, batch, config.n, 1.0)
    y = np.floor(rng.uniform(batch) * config.classes).astype(np.int64)
    return model, x, y


def run_gradcheck(config: TrainConfig, state: Optional[ad.AdapterState] = None,
                  grad_hook: Optional[GradHook] = None, batch: int = 4) -> dict[str, float]:
    rng = Rng(config.seed)
    if state is None:
        state = gradcheck_layer_for(config, rng.derive(1))
    report = {f"layer.{k}": v for k, v in check_layer(state, rng.derive(2), batch,
                                                       grad_hook=grad_hook).items()}
    model, x, y = gradcheck_model_for(config, rng.derive(3), batch)
    report.update({f"model.{k}": v for k, v in check_model(model, x, y,
                                                           grad_hook=grad_hook).items()})
    return report


def cmd_gradcheck(config: TrainConfig, out=print, state: Optional[ad.AdapterState] = None,
                  grad_hook: Optional[GradHook] = None, threshold: float = THRESHOLD) -> int:
    """Print one line per parameter group; return 1 if any group breaches ``threshold``."""
    try:
        report = run_gradcheck(config, state, grad_hook)
    except PeftError as exc:
        out(f"error: {type(exc).__name__}: {exc}")
        return 1
    failed = []
    out(f"gradcheck kind={config.adapter_kind.value} n={config.n} m={config.m} r={config.r} "
        f"seed={config.seed} h={STEP:g} threshold={threshold:g}")
    for group, err in report.items():
        ok = err < threshold
        out(f"  {group:<16} max_rel_err={err:.3e}  {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(group)
    if failed:
        out(f"FAILED: gradient mismatch in {', '.join(failed)}")
        return 1
    return 0
