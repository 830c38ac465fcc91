"""Command-line entry points.

Every command writes the resolved configuration into its output directory,
so each artifact is reproducible from that file alone.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

from . import autodiff as ad
from .config import ConfigError, RunConfig, echo_config, load_config, parse_config
from .gradcheck import run_gradcheck_suite
from .inference import (evaluate_study, population_median_predictor, pooled_log_rmse, prediction_csv,
                        study_vpc, synthesize_population)
from .model import AICMET
from .simulate import StudyRecord, generate_study, study_rng
from .studyio import load_studies, observations_csv, save_studies_ndjson
from .training import train

log = logging.getLogger("aicmet")

COMMANDS = ("simulate", "train", "predict", "synthesize", "vpc", "eval", "gradcheck")
SIM_STREAM = 10
EVAL_STREAM = 11


class UsageError(Exception):
    pass


def worker_count() -> int:
    raw = os.environ.get("AICMET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"AICMET_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def parallel_map(fn: Callable, items: Sequence) -> list:
    """Order-preserving map over a bounded thread pool (``AICMET_THREADS``)."""
    n = worker_count()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.io.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    return out


def _studies(cfg: RunConfig) -> list[StudyRecord]:
    if not cfg.io.studies:
        raise UsageError("this command needs --studies GLOB (or io.studies)")
    paths = sorted(glob.glob(cfg.io.studies))
    if not paths:
        raise UsageError(f"--studies {cfg.io.studies!r} matched no files")
    return [s for p in paths for s in load_studies(p)]


def _model(cfg: RunConfig) -> AICMET:
    if not cfg.io.snapshot:
        log.warning("no --snapshot given: using an untrained model (init_seed=%d)", cfg.model.init_seed)
        return AICMET(cfg.model)
    if not Path(cfg.io.snapshot).exists():
        raise UsageError(f"snapshot {cfg.io.snapshot} does not exist")
    model, _ = AICMET.load(cfg.io.snapshot)
    return model


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg: RunConfig) -> int:
    out = _out(cfg)
    seed = cfg.io.seed
    studies = parallel_map(lambda i: generate_study(cfg.simulation, study_rng(seed, i, SIM_STREAM),
                                                    f"sim_{seed}_{i:05d}"),
                           list(range(cfg.io.n_studies)))
    save_studies_ndjson(studies, out / "studies.jsonl", include_latents=cfg.io.include_latents)
    (out / "observations.csv").write_text(observations_csv(studies), encoding="utf-8")
    log.info("wrote %d studies to %s", len(studies), out / "studies.jsonl")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    out = _out(cfg)
    resume = cfg.io.snapshot
    if resume and not Path(resume).exists():
        raise UsageError(f"snapshot {resume} does not exist")

    def progress(row):
        if row["step"] % 50 == 0:
            log.info("step %d loss %.4f grad_norm %.3g", row["step"], row["loss_total"], row["grad_norm"])

    result = train(cfg.trainer, cfg.simulation, cfg.model, out_dir=out, resume_from=resume, progress=progress)
    log.info("snapshot written to %s", result.snapshot)
    return 0


def _evaluations(cfg: RunConfig, model: AICMET, studies):
    seed = cfg.io.seed
    return parallel_map(
        lambda item: evaluate_study(item[1], cfg.eval, model=model, rng=study_rng(seed, item[0], EVAL_STREAM)),
        list(enumerate(studies)))


def cmd_predict(cfg: RunConfig) -> int:
    out = _out(cfg)
    model, studies = _model(cfg), _studies(cfg)
    for s, ev in zip(studies, _evaluations(cfg, model, studies)):
        (out / f"predictions_{_safe(s.study_id)}.csv").write_text(prediction_csv(ev), encoding="utf-8")
        for sk in ev.skipped:
            log.warning("%s individual %d skipped: %s", s.study_id, sk.index, sk.reason)
    return 0


def cmd_synthesize(cfg: RunConfig) -> int:
    out = _out(cfg)
    model, studies = _model(cfg), _studies(cfg)
    virtual = []
    for k, s in enumerate(studies):
        n = cfg.io.n_virtual or len(s)
        reps = synthesize_population(model, s, n, cfg=cfg.eval, rng=study_rng(cfg.io.seed, k, EVAL_STREAM))
        virtual.append(StudyRecord(reps[0], f"{s.study_id}_virtual"))
    save_studies_ndjson(virtual, out / "virtual.jsonl")
    return 0


def cmd_vpc(cfg: RunConfig) -> int:
    out = _out(cfg)
    model, studies = _model(cfg), _studies(cfg)
    for k, s in enumerate(studies):
        table = study_vpc(model, s, cfg.eval, rng=study_rng(cfg.io.seed, k, EVAL_STREAM))
        (out / f"vpc_{_safe(s.study_id)}.csv").write_text(table.to_csv(), encoding="utf-8")
        for t, reason in table.dropped:
            log.warning("%s: VPC bin t=%g dropped (%s)", s.study_id, t, reason)
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    out = _out(cfg)
    model, studies = _model(cfg), _studies(cfg)
    evs = _evaluations(cfg, model, studies)
    base = [evaluate_study(s, cfg.eval, predictor=population_median_predictor(), include_partial=False)
            for s in studies]
    report = {
        "pooled_log_rmse": pooled_log_rmse(evs),
        "pooled_baseline_log_rmse": pooled_log_rmse(base),
        "studies": [
            {
                "study_id": s.study_id,
                "log_rmse": ev.pooled_log_rmse,
                "baseline_log_rmse": b.pooled_log_rmse,
                "coverage": ev.coverage,
                "individuals": [{"index": sc.index, "n_targets": int(sc.times.size), "log_rmse": sc.log_rmse}
                                for sc in ev.scores],
                "skipped": [{"index": sk.index, "reason": sk.reason} for sk in ev.skipped],
            }
            for s, ev, b in zip(studies, evs, base)
        ],
    }
    text = json.dumps(report, indent=2, allow_nan=True) + "\n"
    (out / "eval_report.json").write_text(text, encoding="utf-8")
    print(f"pooled log-RMSE {report['pooled_log_rmse']:.6g} "
          f"(population-median baseline {report['pooled_baseline_log_rmse']:.6g})")
    return 0


def cmd_gradcheck(cfg: RunConfig, entries: int = 3) -> int:
    out = _out(cfg)
    reports = run_gradcheck_suite(cfg.model, seed=cfg.io.seed, max_entries=entries)
    lines = [f"{name}: {rep.summary()}" for name, rep in reports.items()]
    ok = all(rep.passed for rep in reports.values())
    lines.append("OVERALL: " + ("PASS" if ok else "FAIL"))
    text = "\n".join(lines) + "\n"
    (out / "gradcheck.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0 if ok else 1


# ---------------------------------------------------------------- plumbing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aicmet", description="Amortized in-context mixed-effect PK modelling.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", metavar="PATH", help="JSON run configuration")
    p.add_argument("--seed", type=int, metavar="N", help="override io.seed (and the trainer seed)")
    p.add_argument("--out", metavar="DIR", help="override io.out_dir")
    p.add_argument("--snapshot", metavar="PATH", help="model snapshot (train: resume from it)")
    p.add_argument("--studies", metavar="GLOB", help="study files (.json or .jsonl)")
    p.add_argument("--entries", type=int, default=3, metavar="K",
                   help="gradcheck: entries sampled per parameter tensor")
    p.add_argument("--verbose", "-v", action="count", default=0)
    return p


def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else parse_config({})
    io = cfg.io
    if args.seed is not None:
        io = replace(io, seed=args.seed)
        cfg.trainer = replace(cfg.trainer, seed=args.seed)
    if args.out is not None:
        io = replace(io, out_dir=args.out)
    if args.snapshot is not None:
        io = replace(io, snapshot=args.snapshot)
    if args.studies is not None:
        io = replace(io, studies=args.studies)
    cfg.io = io.validate()
    cfg.trainer.validate()
    return cfg


def dispatch(command: str, cfg: RunConfig, entries: int = 3) -> int:
    handlers = {
        "simulate": cmd_simulate, "train": cmd_train, "predict": cmd_predict,
        "synthesize": cmd_synthesize, "vpc": cmd_vpc, "eval": cmd_eval,
    }
    if command == "gradcheck":
        return cmd_gradcheck(cfg, entries)
    if command not in handlers:
        raise UsageError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    return handlers[command](cfg)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return dispatch(args.command, cfg, args.entries)
    except (ConfigError, UsageError, ValueError, OSError, ad.ShapeError) as err:
        print(f"aicmet {args.command}: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
