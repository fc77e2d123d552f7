"""Command-line entry point: ``crossprompt {run,gradcheck,metrics,routeprobe}``.

Exit codes: 0 success, 1 runtime failure (or a failed gradcheck), 2 invalid
configuration or malformed input.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError, ConfigurationError
from .metrics import (
    MalformedMatrixError,
    read_matrix_csv,
    round_half_up,
    routing_confusion,
    stage_metrics,
    write_confusion_csv,
    write_stage_metrics_csv,
)

# training modules are imported inside the commands that need them; they pull
# in scikit-learn, which would dominate the start-up time of ``metrics``
log = logging.getLogger("crossprompt")


class UsageError(Exception):
    """Bad user input; reported with exit code 2."""


def _overrides(args) -> dict:
    out = {}
    if args.router_mode is not None:
        out["router_mode"] = args.router_mode
    if args.generator_mode is not None:
        out["generator_mode"] = args.generator_mode
    if args.no_nullspace:
        out["nullspace"] = False
    if args.no_crossattn:
        out["cross_attention"] = False
    for flag, key in (("eps", "eps"), ("lp", "prompt_len"), ("hidden", "hidden"), ("tau", "tau")):
        value = getattr(args, flag)
        if value is not None:
            out[key] = value
    return out


def cmd_run(args) -> int:
    from .config import RunConfig, load_config
    from .reports import dump_json, summarize, write_run_reports
    from .stream import generate_stream

    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    cfg = cfg.with_model(**_overrides(args))
    out = Path(args.out)
    for sub in ("checkpoints", "reports", "logs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())

    handler = logging.FileHandler(out / "logs" / "train.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("crossprompt")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    try:
        stream = generate_stream(cfg.stream)
        hashes = {}

        def after_task(est, task):
            name = f"task_{task.id + 1}"
            hashes[name] = est.save(out / "checkpoints" / name)
            row = [round_half_up(a) for a in est.accuracy_[: task.id + 1, task.id]]
            log.info("stage %d accuracies %s", task.id + 1, row)

        est = cfg.estimator().fit(stream, callback=after_task)
        write_run_reports(out / "reports", est, stream)
        summary = summarize(est, stream, cfg.to_dict(), {"checkpoint_manifests": hashes})
        dump_json(summary, out / "summary.json")
    finally:
        root.removeHandler(handler)
        handler.close()
    print(f"final_average {round_half_up(summary['final_average'])}")
    print(f"bwt_mean {round_half_up(summary['bwt_mean'])}")
    print(f"ma_mean {round_half_up(summary['ma_mean'])}")
    print(f"routing_accuracy {round_half_up(summary['routing_accuracy'])}")
    print(f"run directory {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .diagnostics import model_gradcheck

    ok = True
    for seed in range(args.seed, args.seed + args.seeds):
        report = model_gradcheck(seed=seed, prompt_len=args.lp, hidden=args.hidden, d=args.dim, tol=args.tol)
        lines = report.lines() if args.verbose else report.lines()[-1:]
        for line in lines:
            print(f"seed {seed}: {line}")
        ok &= report.passed
    return 0 if ok else 1


def cmd_metrics(args) -> int:
    try:
        A, _ = read_matrix_csv(Path(args.matrix).read_text())
        m = stage_metrics(A)
    except OSError as exc:
        raise UsageError(f"cannot read {args.matrix}: {exc}") from exc
    except (MalformedMatrixError, ValueError, IndexError) as exc:
        raise UsageError(f"malformed matrix CSV: {exc}") from exc
    sys.stdout.write(write_stage_metrics_csv(m))
    print(f"final_average,{round_half_up(m['final_average'])}")
    return 0


def cmd_routeprobe(args) -> int:
    from .stream import StreamConfig, generate_stream
    from .trainer import ContinualPromptTuner

    try:
        est = ContinualPromptTuner.load(args.checkpoint)
    except (CheckpointError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot load checkpoint: {exc}") from exc
    stream = generate_stream(StreamConfig(**est.stream_config_.to_dict()))
    pairs = est.routing_log(stream)
    conf, rows, cols = routing_confusion(pairs, n_tasks=est.n_tasks_seen_)
    for r, row in zip(rows, conf):
        print(f"task {r + 1}: routing accuracy {round_half_up(row[cols.index(r)])}")
    print(f"overall {round_half_up(100.0 * np.mean([a == b for a, b in pairs]))}")
    text = write_confusion_csv(conf, rows, cols)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossprompt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train the full task stream and write a run directory")
    run.add_argument("--config", help="INI file with [stream] and [model] sections")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", default="run", help="run directory (default: ./run)")
    run.add_argument("--router-mode", choices=["learned", "oracle", "none"])
    run.add_argument("--generator-mode", choices=["segment", "mean", "static", "learnable"])
    run.add_argument("--no-nullspace", action="store_true")
    run.add_argument("--no-crossattn", action="store_true")
    run.add_argument("--eps", type=float)
    run.add_argument("--lp", type=int, help="prompt length")
    run.add_argument("--hidden", type=int, help="generator width")
    run.add_argument("--tau", type=float, help="prototype temperature")
    run.set_defaults(func=cmd_run)

    gc = sub.add_parser("gradcheck", help="finite-difference check of all trainable parameters")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--seeds", type=int, default=1)
    gc.add_argument("--lp", type=int, default=2)
    gc.add_argument("--hidden", type=int, default=8)
    gc.add_argument("--dim", type=int, default=16)
    gc.add_argument("--tol", type=float, default=1e-5)
    gc.add_argument("-v", "--verbose", action="store_true")
    gc.set_defaults(func=cmd_gradcheck)

    mt = sub.add_parser("metrics", help="stage metrics of an accuracy-matrix CSV")
    mt.add_argument("--matrix", required=True)
    mt.set_defaults(func=cmd_metrics)

    rp = sub.add_parser("routeprobe", help="routing accuracy and confusion of a checkpoint")
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--out", help="write the confusion CSV here instead of stdout")
    rp.set_defaults(func=cmd_routeprobe)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
