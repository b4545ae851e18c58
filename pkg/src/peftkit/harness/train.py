from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

from .checkpoint import restore_session, save_checkpoint
from .config import TrainConfig
from .session import RunRecord, TrainSession, summary_text, write_metrics

log = logging.getLogger(__name__)


def cmd_train(config: Optional[TrainConfig], out_dir, resume=None,
              stop_after: Optional[int] = None) -> RunRecord:
    """Run (or resume) training and write metrics.csv, checkpoint.{json,bin}
    and summary.txt into ``out_dir``.

    ``stop_after`` ends the invocation early at that global step; the
    checkpoint written then can be passed back as ``resume``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    session = restore_session(resume) if resume is not None else TrainSession(config)
    config = session.config
    start = session.step
    log.info("training %s/%s from step %d to %s (hash %s)", config.task, config.kind, start,
             stop_after if stop_after is not None else session.total_steps, config.config_hash()[:12])
    rows = session.run(stop_after)
    metrics = out_dir / "metrics.csv"
    write_metrics(metrics, rows, config, start)
    ckpt = save_checkpoint(session, out_dir / "checkpoint.json")
    record = session.record()
    summary = out_dir / "summary.txt"
    summary.write_text(summary_text(record, config))
    record.artifacts = {"metrics": metrics, "checkpoint": ckpt, "summary": summary}
    return record
