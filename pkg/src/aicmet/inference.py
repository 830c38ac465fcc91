"""Deployment-time use of a trained model: Monte Carlo posterior prediction,
virtual-population synthesis, log-RMSE scoring and visual predictive checks."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .model import AICMET, StudyScaler
from .pk import DoseEvent
from .simulate import IndividualRecord, StudyRecord, canonical_times

log = logging.getLogger(__name__)

# predictor(index, context_study, partial_record, target_times) -> predicted concentrations
IndividualPredictor = Callable[[int, StudyRecord, IndividualRecord, np.ndarray], np.ndarray]


@dataclass
class EvalProtocolConfig:
    context_observations: int = 4
    mc_samples: int = 256
    vpc_percentiles: tuple[float, ...] = (5.0, 50.0, 95.0)
    vpc_replicates: int = 500
    time_bins: tuple[float, ...] | None = None

    def validate(self) -> "EvalProtocolConfig":
        if self.context_observations < 0:
            raise ValueError("context_observations must be >= 0")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        p = np.asarray(self.vpc_percentiles, dtype=float)
        if p.size == 0 or np.any(p <= 0) or np.any(p >= 100) or np.any(np.diff(p) <= 0):
            raise ValueError("vpc_percentiles must be strictly increasing inside (0, 100)")
        if self.vpc_replicates < 2:
            raise ValueError("vpc_replicates must be >= 2")
        if self.time_bins is not None and (len(self.time_bins) == 0 or np.any(np.diff(self.time_bins) <= 0)):
            raise ValueError("time_bins must be non-empty and strictly increasing")
        return self


@dataclass
class PredictionReport:
    """Predictive summaries at target times (concentration scale).

    ``draw_mean`` and ``draw_log_var`` keep the per-draw decoder Gaussians
    (log scale), shape ``(mc_samples, T)``.
    """

    times: np.ndarray
    mean: np.ndarray
    quantiles: dict[float, np.ndarray]
    draw_mean: np.ndarray
    draw_log_var: np.ndarray
    observed: np.ndarray | None = None

    @property
    def squared_log_error(self) -> np.ndarray | None:
        if self.observed is None:
            return None
        return (np.log(self.mean) - np.log(self.observed)) ** 2

    def log_likelihood(self, observed: np.ndarray | None = None) -> float:
        """Log predictive density of the log-observations, joint over targets."""
        y = self.observed if observed is None else np.asarray(observed, dtype=float)
        ly = np.log(y)
        per_draw = -0.5 * np.sum((ly - self.draw_mean) ** 2 * np.exp(-self.draw_log_var)
                                 + self.draw_log_var + math.log(2 * math.pi), axis=-1)
        return float(logsumexp(per_draw) - math.log(per_draw.size))


def _context_records(s_context: StudyRecord | None, d_partial: IndividualRecord | None):
    records = list(s_context.individuals) if s_context is not None else []
    if d_partial is not None:
        records.append(d_partial)
    if not records:
        raise ValueError("prediction needs a context study or a partial record")
    return records


def posterior_predictive(model: AICMET, s_context: StudyRecord | None, d_partial: IndividualRecord,
                         targets, cfg: EvalProtocolConfig | None = None,
                         rng: np.random.Generator | None = None,
                         observed=None) -> PredictionReport:
    """Monte Carlo predictive distribution for one individual.

    ``z_s`` is drawn from the study posterior of ``s_context`` plus the partial
    record, ``z_n`` from the posterior of the partial record alone (the null
    path when it is empty). Observation-level draws give the quantiles; the
    mean is the average of the per-draw lognormal means.
    """
    cfg = cfg or EvalProtocolConfig()
    rng = rng or np.random.default_rng(0)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    if targets.size == 0:
        raise ValueError("posterior_predictive needs at least one target time")
    records = _context_records(s_context, d_partial)
    scaler = StudyScaler.from_records(records)
    enc = model.encode_records(records, [scaler] * len(records))
    q_s = model.pool(enc.summary, [list(range(len(records)))])
    mu_n, lv_n = enc.posterior.mean.value[-1], enc.posterior.log_var.value[-1]
    mu_s, lv_s = q_s.mean.value[0], q_s.log_var.value[0]
    M, Z = cfg.mc_samples, model.cfg.Z_d
    z_s = mu_s + np.exp(0.5 * lv_s) * rng.standard_normal((M, Z))
    z_n = mu_n + np.exp(0.5 * lv_n) * rng.standard_normal((M, Z))
    mu, lv, _ = model.decode_batch([targets] * M, z_n, z_s, [d_partial.dose] * M, [scaler] * M)
    mu, lv = mu.value, lv.value
    if model.cfg.log_scale_targets:
        mean = np.mean(np.exp(mu + 0.5 * np.exp(lv)), axis=0)
        draws = np.exp(mu + np.exp(0.5 * lv) * rng.standard_normal(mu.shape))
    else:
        mean = np.mean(mu, axis=0) * math.exp(scaler.y_shift)
        draws = (mu + np.exp(0.5 * lv) * rng.standard_normal(mu.shape)) * math.exp(scaler.y_shift)
    qs = np.percentile(draws, cfg.vpc_percentiles, axis=0)
    obs = None if observed is None else np.asarray(observed, dtype=float)
    return PredictionReport(targets, mean, dict(zip(cfg.vpc_percentiles, qs)), mu, lv, obs)


def synthesize_population(model: AICMET, s_context: StudyRecord, n_virtual: int,
                          dose_law: Callable[[np.random.Generator], DoseEvent] | None = None,
                          cfg: EvalProtocolConfig | None = None,
                          rng: np.random.Generator | None = None,
                          times=None, replicates: int = 1) -> list[list[IndividualRecord]]:
    """Virtual individuals under the study posterior.

    Each replicate draws one ``z_s`` shared by its ``n_virtual`` individuals;
    every individual gets ``z_n ~ N(0, I)`` and observation noise from the
    decoder head. By default doses are drawn from those of the context study
    and trajectories are decoded at its canonical design times.
    """
    if n_virtual < 1:
        raise ValueError("n_virtual must be >= 1")
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    rng = rng or np.random.default_rng(0)
    times = canonical_times(s_context) if times is None else np.asarray(times, dtype=float)
    scaler = StudyScaler.from_study(s_context)
    q_s = model.encode_study(s_context, scaler)
    mu_s, lv_s = q_s.numpy()
    Z = model.cfg.Z_d
    if dose_law is None:
        doses_ctx = [d.dose for d in s_context.individuals]
        dose_law = lambda g: doses_ctx[int(g.integers(len(doses_ctx)))]  # noqa: E731
    R, N = replicates, n_virtual
    z_s = mu_s + np.exp(0.5 * lv_s) * rng.standard_normal((R, 1, Z))
    z_s = np.broadcast_to(z_s, (R, N, Z)).reshape(R * N, Z)
    z_n = rng.standard_normal((R * N, Z))
    doses = [dose_law(rng) for _ in range(R * N)]
    mu, lv, _ = model.decode_batch([times] * (R * N), z_n, z_s, doses, [scaler] * (R * N))
    eps = rng.standard_normal(mu.shape)
    if model.cfg.log_scale_targets:
        y = np.exp(mu.value + np.exp(0.5 * lv.value) * eps)
    else:
        y = np.maximum((mu.value + np.exp(0.5 * lv.value) * eps) * math.exp(scaler.y_shift), 1e-300)
    out = []
    for r in range(R):
        out.append([IndividualRecord(doses[r * N + i], times.copy(), y[r * N + i].copy())
                    for i in range(N)])
    return out


def log_rmse(predictions, observations) -> float:
    """Root mean squared error of log-concentrations."""
    p = np.asarray(predictions, dtype=float).reshape(-1)
    y = np.asarray(observations, dtype=float).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions, {y.size} observations")
    if p.size == 0:
        raise ValueError("log_rmse of an empty set")
    if np.any(~(y > 0)):
        raise ValueError("observations must be positive")
    if np.any(~(p > 0)):
        raise ValueError("predictions must be positive")
    return float(np.sqrt(np.mean((np.log(p) - np.log(y)) ** 2)))


def noise_floor(sigma_obs: float, floor: float = 0.01, n_nodes: int = 200) -> float:
    """Log-scale RMSE of a perfect predictor under the clamped proportional error.

    ``sqrt(E[log(max(1 + sigma * eps, floor))**2])`` with ``eps ~ N(0, 1)``,
    by Gauss-Hermite quadrature.
    """
    x, w = np.polynomial.hermite_e.hermegauss(n_nodes)
    f = np.log(np.maximum(1.0 + sigma_obs * x, floor)) ** 2
    return float(math.sqrt(np.sum(w * f) / math.sqrt(2 * math.pi)))


# ---------------------------------------------------------------- evaluation


@dataclass
class IndividualScore:
    index: int
    times: np.ndarray
    observed: np.ndarray
    predicted: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    @property
    def log_rmse(self) -> float:
        return log_rmse(self.predicted, self.observed)


@dataclass
class SkipRecord:
    index: int
    reason: str


@dataclass
class StudyEvaluation:
    study_id: str
    scores: list[IndividualScore] = field(default_factory=list)
    skipped: list[SkipRecord] = field(default_factory=list)

    @property
    def pooled_log_rmse(self) -> float:
        if not self.scores:
            return math.nan
        return log_rmse(np.concatenate([s.predicted for s in self.scores]),
                        np.concatenate([s.observed for s in self.scores]))

    @property
    def squared_errors(self) -> np.ndarray:
        if not self.scores:
            return np.empty(0)
        return np.concatenate([(np.log(s.predicted) - np.log(s.observed)) ** 2 for s in self.scores])

    @property
    def coverage(self) -> float:
        """Fraction of targets inside the outer predictive percentiles."""
        hits = [((s.observed >= s.lower) & (s.observed <= s.upper)) for s in self.scores if s.lower is not None]
        return float(np.mean(np.concatenate(hits))) if hits else math.nan

    def prediction_rows(self) -> list[tuple]:
        rows = []
        for s in self.scores:
            lo = s.lower if s.lower is not None else np.full(s.times.size, math.nan)
            hi = s.upper if s.upper is not None else np.full(s.times.size, math.nan)
            for j in range(s.times.size):
                rows.append((s.index, s.times[j], s.observed[j], s.predicted[j], lo[j], hi[j]))
        return rows


def pooled_log_rmse(evaluations: Sequence[StudyEvaluation]) -> float:
    sq = np.concatenate([e.squared_errors for e in evaluations]) if evaluations else np.empty(0)
    return float(np.sqrt(np.mean(sq))) if sq.size else math.nan


def model_predictor(model: AICMET, cfg: EvalProtocolConfig, rng: np.random.Generator):
    """Wrap a model as an :data:`IndividualPredictor` that also reports quantiles."""

    def predict(index, context, partial, targets):
        rep = posterior_predictive(model, context, partial, targets, cfg, rng)
        return rep.mean, rep.quantiles[cfg.vpc_percentiles[0]], rep.quantiles[cfg.vpc_percentiles[-1]]

    return predict


def oracle_predictor(s: StudyRecord) -> IndividualPredictor:
    """Noise-free simulated concentrations of ``s`` (requires its latents)."""
    if s.latents is None:
        raise ValueError("the oracle predictor needs a simulated study with latents")
    return lambda index, context, partial, targets: s.latents.concentration(index, targets)


def population_median_predictor() -> IndividualPredictor:
    """Median over the other individuals of their log-linearly interpolated curves."""

    def predict(index, context, partial, targets):
        curves = []
        for d in context.individuals:
            t, y = d.valid()
            if t.size:
                curves.append(np.interp(targets, t, np.log(y)))
        if not curves:
            raise ValueError("population-median baseline needs other individuals")
        return np.exp(np.median(np.stack(curves), axis=0))

    return predict


def evaluate_study(s: StudyRecord, cfg: EvalProtocolConfig | None = None,
                   model: AICMET | None = None, rng: np.random.Generator | None = None,
                   predictor: IndividualPredictor | None = None,
                   include_partial: bool = True) -> StudyEvaluation:
    """Leave-one-in evaluation of every individual of ``s``.

    The context of individual ``i`` is every other individual plus its own
    first ``J0`` observations; the remaining observations are the targets.
    ``predictor`` replaces the model (it may return the mean alone or a
    ``(mean, lower, upper)`` triple). With ``include_partial=False`` the
    predictor sees the other individuals only.
    """
    cfg = (cfg or EvalProtocolConfig()).validate()
    if predictor is None:
        if model is None:
            raise ValueError("evaluate_study needs a model or a predictor")
        predictor = model_predictor(model, cfg, rng or np.random.default_rng(0))
    J0 = cfg.context_observations
    result = StudyEvaluation(s.study_id)
    for i, d in enumerate(s.individuals):
        if d.n_valid <= J0:
            result.skipped.append(SkipRecord(i, f"{d.n_valid} observations, need more than {J0}"))
            continue
        others = s.without(i) if len(s) > 1 else None
        if others is None and not include_partial:
            result.skipped.append(SkipRecord(i, "no other individuals in the study"))
            continue
        partial, target = d.first(J0), d.after(J0)
        t, y = target.valid()
        if others is None:
            out = predictor(i, StudyRecord([partial], s.study_id), partial, t)
        else:
            out = predictor(i, others, partial if include_partial else None, t)
        lo = hi = None
        if isinstance(out, tuple):
            out, lo, hi = out
        result.scores.append(IndividualScore(i, t, y, np.asarray(out, dtype=float), lo, hi))
    return result


def prediction_csv(ev: StudyEvaluation) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["individual", "time", "y_obs", "y_pred_mean", "y_pred_p5", "y_pred_p95"])
    for row in ev.prediction_rows():
        w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    return buf.getvalue()


# ---------------------------------------------------------------- VPC


def nearest_rank_percentile(values, p: float) -> float:
    """Nearest-rank percentile: the ``ceil(p/100 * n)``-th smallest value."""
    x = np.sort(np.asarray(values, dtype=float).reshape(-1))
    if x.size == 0:
        raise ValueError("percentile of an empty set")
    k = min(max(int(math.ceil(p / 100.0 * x.size)), 1), x.size)
    return float(x[k - 1])


def _percentiles(values: np.ndarray, ps) -> list[float]:
    x = np.sort(values)
    n = x.size
    ks = [min(max(int(math.ceil(p / 100.0 * n)), 1), n) for p in ps]
    return [float(x[k - 1]) for k in ks]


def assign_bins(times, bins) -> np.ndarray:
    """Index of the nearest bin time for each time (ties go to the earlier bin)."""
    times = np.asarray(times, dtype=float).reshape(-1)
    bins = np.asarray(bins, dtype=float)
    return np.argmin(np.abs(times[:, None] - bins[None, :]), axis=1)


@dataclass
class VpcRow:
    bin_time: float
    sim: list[float]
    obs: list[float]
    n_obs: int


@dataclass
class VpcTable:
    percentiles: tuple[float, ...]
    rows: list[VpcRow] = field(default_factory=list)
    dropped: list[tuple[float, str]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        tags = [f"p{p:g}" for p in self.percentiles]
        w.writerow(["bin_time"] + [f"sim_{t}" for t in tags] + [f"obs_{t}" for t in tags] + ["n_obs"])
        for r in self.rows:
            w.writerow([repr(r.bin_time)] + [repr(v) for v in r.sim] + [repr(v) for v in r.obs] + [r.n_obs])
        return buf.getvalue()


def _pool(records: Sequence[IndividualRecord]):
    ts, ys = [], []
    for d in records:
        t, y = d.valid()
        ts.append(t)
        ys.append(y)
    if not ts:
        return np.empty(0), np.empty(0)
    return np.concatenate(ts), np.concatenate(ys)


def vpc_percentiles(simulated: Sequence[Sequence[IndividualRecord]], observed: StudyRecord,
                    cfg: EvalProtocolConfig | None = None) -> VpcTable:
    """Per-bin percentiles of pooled simulated replicates and of the observed data.

    Bins are ``cfg.time_bins`` or the canonical design times of ``observed``;
    every concentration goes to its nearest bin. Bins without observed or
    without simulated values are dropped and recorded in ``dropped``.
    """
    cfg = (cfg or EvalProtocolConfig()).validate()
    if len(simulated) < 2:
        raise ValueError("a VPC needs at least two simulated replicates")
    bins = np.asarray(cfg.time_bins if cfg.time_bins is not None else canonical_times(observed), dtype=float)
    st, sy = _pool([d for rep in simulated for d in rep])
    ot, oy = _pool(observed.individuals)
    sb, ob = assign_bins(st, bins), assign_bins(ot, bins)
    ps = tuple(float(p) for p in cfg.vpc_percentiles)
    table = VpcTable(ps)
    for b, bt in enumerate(bins):
        sim_vals, obs_vals = sy[sb == b], oy[ob == b]
        if obs_vals.size == 0 or sim_vals.size == 0:
            reason = "no observed values" if obs_vals.size == 0 else "no simulated values"
            table.dropped.append((float(bt), reason))
            log.warning("VPC bin at t=%g dropped: %s", bt, reason)
            continue
        table.rows.append(VpcRow(float(bt), _percentiles(sim_vals, ps), _percentiles(obs_vals, ps),
                                 int(obs_vals.size)))
    return table


def study_vpc(model: AICMET, s: StudyRecord, cfg: EvalProtocolConfig | None = None,
              rng: np.random.Generator | None = None) -> VpcTable:
    """Simulate ``vpc_replicates`` virtual copies of ``s`` and tabulate the VPC."""
    cfg = (cfg or EvalProtocolConfig()).validate()
    rng = rng or np.random.default_rng(0)
    reps = synthesize_population(model, s, len(s), cfg=cfg, rng=rng, replicates=cfg.vpc_replicates)
    return vpc_percentiles(reps, s, cfg)
