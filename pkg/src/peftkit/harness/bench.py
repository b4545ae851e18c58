"""Per-step wall time of each adapter kind at identical shapes."""

from __future__ import annotations

import statistics
import time

import numpy as np

from .. import adapters as ad
from .. import linalg, optim
from ..linalg import Rng

KINDS = (ad.Kind.LORA, ad.Kind.MAP, ad.Kind.DORA)


def _make_step(kind: ad.Kind, rng: Rng, w: np.ndarray, r: int, x: np.ndarray, g_y: np.ndarray):
    state = ad.init_adapter(kind, rng, ad.FrozenBase.from_weight(w), r)
    params = state.params()
    opt = optim.make_optimizer(params, "adamw", lr=1e-4)

    def step():
        _, cache = ad.forward(x, state)
        grads = ad.backward(g_y, cache, state).as_dict()
        optim.adamw_step(opt, params, grads)

    return step


def run_bench(n: int = 512, m: int = 512, r: int = 8, batch: int = 16, steps: int = 200,
              warmup: int = 20, seed: int = 0, kinds=KINDS) -> dict[str, list[float]]:
    """Timed steps in ms per kind.

    Kinds run round-robin so slow drifts in machine load hit all of them
    equally; the first ``warmup`` rounds are discarded.
    """
    rng = Rng(seed)
    w = linalg.gaussian_init(rng, n, m, 1.0 / np.sqrt(n))
    x = linalg.gaussian_init(rng, batch, n, 1.0)
    g_y = linalg.gaussian_init(rng, batch, m, 1.0 / batch)
    kinds = [ad.Kind.parse(k) for k in kinds]
    runners = {k.value: _make_step(k, rng.derive(i), w, r, x, g_y) for i, k in enumerate(kinds)}
    times = {name: [] for name in runners}
    for i in range(warmup + steps):
        for name, step in runners.items():
            t0 = time.perf_counter()
            step()
            elapsed = (time.perf_counter() - t0) * 1e3
            if i >= warmup:
                times[name].append(elapsed)
    return times


def medians(times: dict[str, list[float]]) -> dict[str, float]:
    return {k: statistics.median(v) for k, v in times.items()}


def format_table(med: dict[str, float], n: int, m: int, r: int, steps: int) -> str:
    lines = [f"bench n={n} m={m} r={r} timed_steps={steps}",
             f"{'kind':<6} {'median_ms':>10} {'vs_lora':>8}"]
    base = med.get("lora")
    for kind, value in med.items():
        ratio = f"{value / base:.3f}" if base else "-"
        lines.append(f"{kind:<6} {value:>10.4f} {ratio:>8}")
    return "\n".join(lines)


def cmd_bench(n: int = 512, m: int = 512, r: int = 8, batch: int = 16, steps: int = 200,
              warmup: int = 20, seed: int = 0, out=print) -> dict[str, float]:
    med = medians(run_bench(n, m, r, batch, steps, warmup, seed))
    out(format_table(med, n, m, r, steps))
    return med
