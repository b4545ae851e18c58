"""One training run: data, model, optimizer and step loop rebuilt from a config."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .. import linalg, optim, tasks
from ..adapters import Kind, param_count
from ..errors import ConfigError
from ..linalg import Rng
from .config import TrainConfig

# child-stream keys under the run seed
INIT_STREAM = 1
DATA_STREAM = 2
SHUFFLE_STREAM = 3
DROPOUT_STREAM = 4

CSV_COLUMNS = ("step", "lr", "loss", "alpha", "beta", "step_ms")


@dataclass
class RunRecord:
    rows: list
    final: dict
    trainable_params: int
    config_hash: str
    seed: int
    artifacts: dict = field(default_factory=dict)


class TrainSession:
    """Holds everything a run mutates; ``run`` advances it step by step."""

    def __init__(self, config: TrainConfig):
        self.config = config
        root = Rng(config.seed)
        data_rng = root.derive(DATA_STREAM)
        self.target = None
        base_weights = None
        if config.task == "teacher_student":
            w_base = linalg.gaussian_init(data_rng, config.n, config.m, 1.0 / math.sqrt(config.n))
            a_star = config.a_star_scale * linalg.frob_norm(w_base)
            self.data, self.target = tasks.gen_teacher_student(
                data_rng, config.n, config.m, config.r, a_star, config.b_star, config.samples,
                config.noise_std, w_base=w_base)
            base_weights = [w_base]
            loss = "mse"
        else:
            self.data = tasks.gen_gaussian_blobs(data_rng, config.n, config.classes, config.samples,
                                                 config.blob_radius, config.blob_std)
            loss = "xent"
        self.model = tasks.build_model(
            config.adapter_kind, root.derive(INIT_STREAM), config.layer_sizes, config.r, loss,
            base_weights, lora_alpha=config.lora_alpha, beta_init=config.beta_init,
            b_init_std=config.b_init_std, dropout_p=config.dropout_p)
        self.opt = optim.make_optimizer(
            self.model.params(), config.optimizer, lr=config.lr, beta1=config.beta1,
            beta2=config.beta2, eps=config.eps, weight_decay=config.weight_decay)
        self.steps_per_epoch = math.ceil(self.data.n_train / config.batch_size)
        self.total_steps = config.steps if config.steps is not None else config.epochs * self.steps_per_epoch
        self.schedule = optim.Schedule(min(config.warmup_steps, self.total_steps), self.total_steps, config.lr)
        self.mode = optim.OptMode(config.opt_mode, config.period or self.steps_per_epoch)
        names = list(self.model.params())
        # fail before any step if a stepwise phase would select nothing
        for probe in (0, self.mode.period):
            self.mode.mask(probe, names)
        self.shuffle_root = root.derive(SHUFFLE_STREAM)
        self.dropout_rng = root.derive(DROPOUT_STREAM)
        self.step = 0
        self.rows: list[optim.StepRow] = []

    def batch_at(self, step: int):
        epoch, k = divmod(step, self.steps_per_epoch)
        perm = self.shuffle_root.derive(epoch).permutation(self.data.n_train)
        idx = perm[k * self.config.batch_size:(k + 1) * self.config.batch_size]
        return self.data.x_train[idx], self.data.y_train[idx]

    def run(self, until: Optional[int] = None) -> list[optim.StepRow]:
        until = self.total_steps if until is None else until
        if not self.step <= until <= self.total_steps:
            raise ConfigError(f"cannot run from step {self.step} to {until} (total {self.total_steps})")
        rng = self.dropout_rng if self.config.dropout_p > 0 else None
        rows = optim.run_phase(self.model, self.batch_at, self.opt, self.schedule, self.mode,
                               steps=range(self.step, until), rng=rng)
        self.step = until
        self.rows.extend(rows)
        return rows

    def evaluate(self) -> dict:
        d = self.data
        out = {}
        for split, (x, y) in (("train", (d.x_train, d.y_train)), ("val", (d.x_val, d.y_val))):
            for key, value in self.model.evaluate(x, y).items():
                out[f"{split}_{key}"] = value
        scalars = self.model.map_scalars()
        if scalars:
            out["alpha"] = [a for a, _ in scalars]
            out["beta"] = [b for _, b in scalars]
        if self.target is not None:
            out["a_star"] = self.target.a_star
            out["b_star"] = self.target.b_star
            if scalars:
                a, b = scalars[0]
                out["alpha_rel_err"] = abs(a - self.target.a_star) / abs(self.target.a_star)
                out["beta_rel_err"] = abs(b - self.target.b_star) / abs(self.target.b_star)
        return out

    def record(self) -> RunRecord:
        final = self.evaluate()
        final["steps"] = self.step
        timed = [r.step_ms for r in self.rows if math.isfinite(r.step_ms)]
        # wall time would make the summary differ between identical runs
        if timed and self.config.record_timing:
            final["median_step_ms"] = statistics.median(timed)
        return RunRecord(self.rows, final, self.model.trainable_count(),
                         self.config.config_hash(), self.config.seed)


def _fmt(x: float) -> str:
    return repr(float(x))


def _fmt_many(values) -> str:
    return ";".join(_fmt(v) for v in values)


def csv_header(config_hash: str) -> str:
    return f"# config_hash={config_hash}\n" + ",".join(CSV_COLUMNS) + "\n"


def csv_lines(rows, record_timing: bool) -> str:
    """Rows as text; alpha/beta are ';'-joined across MAP layers and blank otherwise."""
    out = []
    for r in rows:
        ms = f"{r.step_ms:.3f}" if record_timing else ""
        out.append(f"{r.step},{_fmt(r.lr)},{_fmt(r.loss)},{_fmt_many(r.alpha)},{_fmt_many(r.beta)},{ms}\n")
    return "".join(out)


def write_metrics(path: Path, rows, config: TrainConfig, start_step: int) -> None:
    """Write ``rows``; when resuming into a file holding exactly the earlier
    steps, append so the result equals an uninterrupted run byte for byte."""
    header = csv_header(config.config_hash())
    body = csv_lines(rows, config.record_timing)
    if start_step > 0 and path.exists():
        existing = path.read_bytes().decode()
        if existing.startswith(header) and existing.count("\n") - 2 == start_step:
            with open(path, "a", newline="\n") as fh:
                fh.write(body)
            return
    with open(path, "w", newline="\n") as fh:
        fh.write(header + body)


def summary_text(record: RunRecord, config: TrainConfig) -> str:
    kind = config.adapter_kind
    sizes = config.layer_sizes
    lora = sum(param_count(Kind.LORA, n, m, min(config.r, n, m)) for n, m in zip(sizes[:-1], sizes[1:]))
    lines = [
        f"config_hash: {record.config_hash}",
        f"seed: {record.seed}",
        f"task: {config.task}",
        f"kind: {kind.value}",
        f"layer_sizes: {sizes}",
        f"trainable_params: {record.trainable_params}",
        f"lora_params: {lora}",
        f"overhead_vs_lora: {record.trainable_params - lora:+d}",
    ]
    for key, value in record.final.items():
        if isinstance(value, list):
            value = ", ".join(_fmt(v) for v in value)
        elif isinstance(value, float):
            value = _fmt(value)
        lines.append(f"{key}: {value}")
    return "\n".join(lines) + "\n"
