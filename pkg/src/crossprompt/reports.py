"""CSV/JSON artefacts written by a run.

Column headers (fixed):

- ``accuracy_matrix.csv``  ``stage,<task_1..task_T>``; row = stage, blank above the diagonal
- ``stage_metrics.csv``    ``stage,bwt,mean_accuracy`` plus an ``average`` row over stages 2..T
- ``routing_confusion.csv`` ``true_task,routed_1..routed_T`` row percentages
- ``routing_log.csv``      ``true_task,routed_task`` per final-stage test sample
- ``spectra.csv``          ``task,layer,rank,component,eigenvalue``
- ``loss_curve.csv``       ``task,step,loss,lr_generator``
- ``attention.csv``        ``task,sample,prompt_row,visual_row,weight``

Task and stage numbers in reports are 1-based.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .metrics import (
    routing_confusion,
    stage_metrics,
    write_confusion_csv,
    write_matrix_csv,
    write_stage_metrics_csv,
)
from .stream import TaskStream, stack_samples


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def spectra_csv(spectra: list[dict]) -> str:
    rows = [
        (rec["task"] + 1, rec["layer"], rec["rank"], k + 1, repr(float(v)))
        for rec in spectra
        for k, v in enumerate(rec["spectrum"])
    ]
    return _csv(["task", "layer", "rank", "component", "eigenvalue"], rows)


def loss_curve_csv(history) -> str:
    return _csv(["task", "step", "loss", "lr_generator"], [(t + 1, s, repr(l), repr(lr)) for t, s, l, lr in history])


def routing_log_csv(log) -> str:
    return _csv(["true_task", "routed_task"], [(a + 1, b + 1) for a, b in log])


def attention_csv(estimator, stream: TaskStream) -> str:
    """Prompt-to-visual cross-attention weights of every test sample, final state."""
    rows = []
    for task in stream:
        batch = stack_samples(task.test)
        _, _, att = estimator.infer(batch, return_attention=True)
        for i, a in enumerate(att):
            if a is None:
                continue
            for p, q in np.ndindex(a.shape):
                rows.append((task.id + 1, i, p, q, repr(float(a[p, q]))))
    return _csv(["task", "sample", "prompt_row", "visual_row", "weight"], rows)


def summarize(estimator, stream: TaskStream, config: dict, extra: dict | None = None) -> dict:
    m = stage_metrics(estimator.accuracy_)
    log = estimator.routing_log(stream)
    routing_acc = 100.0 * float(np.mean([a == b for a, b in log]))
    return {
        "final_average": m["final_average"],
        "bwt_mean": m["bwt_mean"],
        "ma_mean": m["ma_mean"],
        "routing_accuracy": routing_acc,
        "bwt": {str(k): v for k, v in m["bwt"].items()},
        "ma": {str(k): v for k, v in m["ma"].items()},
        "nullspace": bool(config["model"]["nullspace"]),
        "config": config,
        **(extra or {}),
    }


def write_run_reports(directory, estimator, stream: TaskStream, attention: bool = True) -> dict[str, Path]:
    """Write every CSV report into ``directory``; returns ``{name: path}``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = [f"task_{i + 1}" for i in range(len(stream))]
    log = estimator.routing_log(stream)
    conf, rows, cols = routing_confusion(log, n_tasks=len(stream))
    texts = {
        "accuracy_matrix.csv": write_matrix_csv(estimator.accuracy_, names),
        "stage_metrics.csv": write_stage_metrics_csv(stage_metrics(estimator.accuracy_)),
        "routing_confusion.csv": write_confusion_csv(conf, rows, cols),
        "routing_log.csv": routing_log_csv(log),
        "spectra.csv": spectra_csv(estimator.spectra_),
        "loss_curve.csv": loss_curve_csv(estimator.loss_history_),
    }
    if attention:
        texts["attention.csv"] = attention_csv(estimator, stream)
    out = {}
    for name, text in texts.items():
        path = directory / name
        path.write_text(text)
        out[name] = path
    return out


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
