"""Adam training over studies simulated on the fly.

Study ``i`` of a run is drawn from ``study_rng(seed, i, STUDY_STREAM)`` and the
partition/Monte Carlo randomness of step ``t`` from its own stream, so a run is
a pure function of the configuration and the seed. Resuming from a snapshot
written after step ``t`` continues exactly as the unbroken run would.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .model import AICMET, LOSS_COMPONENTS, ModelConfig, load_snapshot
from .nn import weighted_total_loss
from .objectives import batch_elbo_forecast, batch_elbo_new, loss_components
from .simulate import (ContextLengthLaw, PartitionError, SimulationConfig, StudyRecord,
                       generate_study, partition_study, study_rng)

log = logging.getLogger(__name__)

STUDY_STREAM = 0
STEP_STREAM = 1
EVAL_STREAM = 2

METRIC_COLUMNS = ("step", "loss_total") + LOSS_COMPONENTS + ("grad_norm", "wall_time_s")
# loss-weight values at the step, so the total can be recomputed from the log alone
WEIGHT_COLUMNS = tuple(f"u_{c}" for c in LOSS_COMPONENTS)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, seed: int, message: str):
        self.step, self.seed = step, seed
        super().__init__(f"step {step} (seed {seed}): {message}")


@dataclass
class TrainerConfig:
    learning_rate: float = 1e-4
    batch_size: int = 128
    iterations: int = 5000
    seed: int = 0
    mc_samples: int = 1
    max_context: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    snapshot_every: int = 0
    eval_every: int = 0
    eval_studies: int = 8
    record_wall_time: bool = False
    # learning-rate multiplier for the loss-combiner weights (0 freezes them)
    loss_weight_lr_scale: float = 1.0

    def validate(self) -> "TrainerConfig":
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.mc_samples < 1:
            raise ValueError(f"mc_samples must be >= 1, got {self.mc_samples}")
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam moment decays must lie in [0, 1)")
        if not (self.loss_weight_lr_scale >= 0 and math.isfinite(self.loss_weight_lr_scale)):
            raise ValueError(f"loss_weight_lr_scale must be finite and >= 0, got {self.loss_weight_lr_scale}")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be > 0")
        if self.max_context < 0 or self.snapshot_every < 0 or self.eval_every < 0 or self.eval_studies < 1:
            raise ValueError("max_context, snapshot_every and eval_every must be >= 0, eval_studies >= 1")
        return self

    @property
    def context_law(self) -> ContextLengthLaw:
        return ContextLengthLaw(self.max_context)


@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_store(cls, store: ad.ParameterStore) -> "OptimizerState":
        return cls({k: np.zeros_like(t.value) for k, t in store.items()},
                   {k: np.zeros_like(t.value) for k, t in store.items()})

    def as_dict(self) -> dict:
        return {"step": self.step, "m": self.m, "v": self.v}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        return cls(dict(d["m"]), dict(d["v"]), int(d["step"]))


def adam_update(store: ad.ParameterStore, opt: OptimizerState, cfg: TrainerConfig) -> None:
    opt.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for name, t in store.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.value)
        m = opt.m[name] = b1 * opt.m[name] + (1.0 - b1) * g
        v = opt.v[name] = b2 * opt.v[name] + (1.0 - b2) * g * g
        lr = cfg.learning_rate * (cfg.loss_weight_lr_scale if name.startswith("loss.") else 1.0)
        t.value -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def batch_loss(model: AICMET, studies: Sequence[StudyRecord], cfg: TrainerConfig,
               rng: np.random.Generator, noise: dict | None = None):
    """Both objectives on a batch; returns ``(total, components)``.

    Studies with a single individual only enter the forecast objective.
    """
    law = cfg.context_law
    holdouts, forecasts = [], []
    for s in studies:
        if len(s) >= 2:
            holdouts.append(partition_study(s, "holdout_individual", rng))
        try:
            forecasts.append(partition_study(s, "context_target", rng, law))
        except PartitionError:
            pass
    if not holdouts or not forecasts:
        raise PartitionError("batch has no study usable by both objectives")
    new = batch_elbo_new(model, holdouts, cfg.mc_samples, rng, noise)
    fc = batch_elbo_forecast(model, forecasts, cfg.mc_samples, rng, noise)
    comps = loss_components(new, fc)
    return weighted_total_loss(comps, model.loss_weights), comps


def training_step(studies: Sequence[StudyRecord], model: AICMET, opt: OptimizerState,
                  cfg: TrainerConfig, rng: np.random.Generator, seed: int | None = None) -> dict:
    """One Adam step on a batch; returns the per-component scalars.

    Raises
    ------
    TrainingDivergedError
        If the loss or its gradient is not finite; ``seed`` is reported for replay.
    """
    store = model.store
    store.zero_grad()
    u_before = model.loss_weights.u.value.copy()
    with ad.Tape() as tape:
        total, comps = batch_loss(model, studies, cfg, rng)
        if not np.isfinite(total.value):
            raise TrainingDivergedError(opt.step, seed if seed is not None else -1, "non-finite loss")
        tape.backward(total)
    gnorm = store.grad_norm()
    if not math.isfinite(gnorm):
        raise TrainingDivergedError(opt.step, seed if seed is not None else -1, "non-finite gradient")
    adam_update(store, opt, cfg)
    metrics = {"step": opt.step, "loss_total": float(total.value)}
    metrics.update({k: float(v.value) for k, v in comps.items()})
    metrics["grad_norm"] = gnorm
    metrics.update({c: float(u) for c, u in zip(WEIGHT_COLUMNS, u_before)})
    return metrics


def training_batch(sim: SimulationConfig, seed: int, step: int, batch_size: int) -> list[StudyRecord]:
    """Studies ``step * batch_size ...`` of the run; each depends only on ``(seed, index)``."""
    first = step * batch_size
    return [generate_study(sim, study_rng(seed, i, STUDY_STREAM), f"train_{i:07d}")
            for i in range(first, first + batch_size)]


def eval_batch(sim: SimulationConfig, seed: int, n: int) -> list[StudyRecord]:
    return [generate_study(sim, study_rng(seed, i, EVAL_STREAM), f"heldout_{i:05d}") for i in range(n)]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsLog:
    """Append-only CSV of per-step metrics."""

    columns = METRIC_COLUMNS + WEIGHT_COLUMNS

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        fresh = not (append and self.path.exists())
        self._fh = self.path.open("w" if fresh else "a", encoding="utf-8", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        if fresh:
            self._w.writerow(self.columns)

    def write(self, row: dict) -> None:
        self._w.writerow([_fmt(row.get(c, "")) for c in self.columns])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_metrics(path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        d = {"step": int(r["step"])}
        for k, v in r.items():
            if k != "step":
                d[k] = float(v) if v != "" else None
        out.append(d)
    return out


def truncate_metrics(path, last_step: int) -> None:
    """Drop rows after ``last_step`` (used when resuming from an older snapshot)."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    keep = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= last_step]
    path.write_text("".join(keep), encoding="utf-8")


@dataclass
class TrainResult:
    model: AICMET
    opt: OptimizerState
    metrics: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    snapshot: Path | None = None


def _snapshot(model: AICMET, opt: OptimizerState, cfg: TrainerConfig, path: Path) -> Path:
    extra = {"step": opt.step, "trainer": asdict(cfg)}
    return model.save(path, extra=extra, optimizer=opt.as_dict())


def train(cfg: TrainerConfig, sim: SimulationConfig | None = None, model_cfg: ModelConfig | None = None,
          out_dir=None, resume_from=None, evaluator: Callable | None = None,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Run (or resume) training.

    Parameters
    ----------
    out_dir : path, optional
        Receives ``metrics.csv``, ``snapshot.json`` (final) and, with
        ``snapshot_every``, ``snapshot_<step>.json`` checkpoints.
    resume_from : path, optional
        Snapshot written by this function; training continues at its step.
    evaluator : callable, optional
        ``evaluator(model, studies) -> dict`` run every ``eval_every`` steps on
        a fixed held-out batch; results go to ``eval.csv``.
    """
    cfg.validate()
    sim = (sim or SimulationConfig()).validate()
    if resume_from is not None:
        model, snap = AICMET.load(resume_from)
        if "optimizer" not in snap:
            raise ValueError(f"{resume_from} has no optimizer state to resume from")
        opt = OptimizerState.from_dict(snap["optimizer"])
    else:
        model = AICMET(model_cfg or ModelConfig())
        opt = OptimizerState.for_store(model.store)
    out = Path(out_dir) if out_dir is not None else None
    logger = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        if resume_from is not None and metrics_path.exists():
            truncate_metrics(metrics_path, opt.step)
        logger = MetricsLog(metrics_path, append=resume_from is not None)
    held_out = eval_batch(sim, cfg.seed, cfg.eval_studies) if evaluator and cfg.eval_every else None
    result = TrainResult(model, opt)
    t0 = time.perf_counter()
    try:
        while opt.step < cfg.iterations:
            t = opt.step
            studies = training_batch(sim, cfg.seed, t, cfg.batch_size)
            rng = study_rng(cfg.seed, t, STEP_STREAM)
            row = training_step(studies, model, opt, cfg, rng, seed=cfg.seed)
            row["wall_time_s"] = time.perf_counter() - t0 if cfg.record_wall_time else ""
            result.metrics.append(row)
            if logger:
                logger.write(row)
            if progress:
                progress(row)
            if held_out is not None and opt.step % cfg.eval_every == 0:
                ev = {"step": opt.step, **evaluator(model, held_out)}
                result.evals.append(ev)
                if out is not None:
                    _append_eval(out / "eval.csv", ev)
            if out is not None and cfg.snapshot_every and opt.step % cfg.snapshot_every == 0:
                _snapshot(model, opt, cfg, out / f"snapshot_{opt.step:07d}.json")
    finally:
        if logger:
            logger.close()
    if out is not None:
        result.snapshot = _snapshot(model, opt, cfg, out / "snapshot.json")
    return result


def _append_eval(path: Path, row: dict) -> None:
    fresh = not path.exists()
    with path.open("a", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fresh:
            w.writerow(list(row))
        w.writerow([_fmt(v) for v in row.values()])


def snapshot_step(path) -> int:
    snap = load_snapshot(path)
    return int(snap.get("optimizer", {}).get("step", snap.get("extra", {}).get("step", 0)))
