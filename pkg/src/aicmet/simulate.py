"""Synthetic pharmacokinetic studies: sampling schedules, observation noise,
the full generative pipeline and study partitioning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ou import (
    ParameterPath,
    PriorConfig,
    StudyHyperParams,
    sample_individual_means,
    sample_parameter_path,
    sample_study_hyperparams,
)
from .pk import DoseEvent, NumericBlowupError, apply_dose, integrate_path

PRE_PEAK_SAMPLES = 4
POST_PEAK_HALF_LIVES = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
NOISE_FACTOR_FLOOR = 0.01


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class Timescales:
    t_peak: float
    t_half: float

    def __post_init__(self):
        for name in ("t_peak", "t_half"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")


@dataclass
class Schedule:
    times: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.times.shape != self.mask.shape:
            raise ValueError("times and mask must have equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("schedule times must be strictly increasing")

    @property
    def tau_max(self) -> float:
        return float(self.times[-1])

    @property
    def kept_times(self) -> np.ndarray:
        return self.times[self.mask]


@dataclass(frozen=True)
class SizeLaw:
    """Discrete law over the number of kept observations."""

    values: tuple[int, ...] = tuple(range(4, 11))
    probs: tuple[float, ...] | None = None

    def sample(self, rng: np.random.Generator) -> int:
        p = None if self.probs is None else np.asarray(self.probs, dtype=float)
        return int(rng.choice(np.asarray(self.values, dtype=int), p=p))

    @classmethod
    def uniform(cls, lo: int, hi: int) -> "SizeLaw":
        return cls(tuple(range(lo, hi + 1)))

    @classmethod
    def fixed(cls, n: int) -> "SizeLaw":
        return cls((n,))


@dataclass
class SimulationConfig:
    prior: PriorConfig = field(default_factory=PriorConfig)
    grid_steps: int = 512
    size_law: SizeLaw = field(default_factory=SizeLaw)
    # cap on rate * step for the fastest plausible rate of a study; None keeps grid_steps fixed
    max_rate_step: float | None = 1.5

    def validate(self) -> "SimulationConfig":
        self.prior.validate()
        if self.grid_steps < 1:
            raise ValueError("grid_steps must be >= 1")
        if self.max_rate_step is not None and not (0 < self.max_rate_step <= 2.5):
            raise ValueError("max_rate_step must lie in (0, 2.5] (RK4 is unstable beyond ~2.78)")
        if not self.size_law.values or min(self.size_law.values) < 1 or max(self.size_law.values) > 10:
            raise ValueError("size_law must be supported on {1, ..., 10}")
        return self


@dataclass
class IndividualRecord:
    dose: DoseEvent
    times: np.ndarray
    obs: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.obs = np.asarray(self.obs, dtype=float).reshape(-1)
        self.mask = (np.ones(self.times.shape, dtype=bool) if self.mask is None
                     else np.asarray(self.mask, dtype=bool).reshape(-1))
        if not (self.times.shape == self.obs.shape == self.mask.shape):
            raise ValueError("times, obs and mask must have equal length")
        if not np.all(np.isfinite(self.times)):
            raise ValueError("times must be finite")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        valid = self.obs[self.mask]
        if not np.all(np.isfinite(valid)) or np.any(valid < 0):
            raise ValueError("valid observations must be finite and non-negative")

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def valid(self) -> tuple[np.ndarray, np.ndarray]:
        """Times and observations of the unmasked entries."""
        return self.times[self.mask], self.obs[self.mask]

    def compact(self) -> "IndividualRecord":
        t, y = self.valid()
        return IndividualRecord(self.dose, t, y)

    def first(self, n: int) -> "IndividualRecord":
        """The first ``n`` valid observations, chronologically."""
        t, y = self.valid()
        return IndividualRecord(self.dose, t[:n], y[:n])

    def after(self, n: int) -> "IndividualRecord":
        """All valid observations except the first ``n``."""
        t, y = self.valid()
        return IndividualRecord(self.dose, t[n:], y[n:])


@dataclass
class StudyLatents:
    grid: np.ndarray
    mu: np.ndarray      # (I, K)
    theta: np.ndarray   # (I, nodes, K)
    states: np.ndarray  # (I, nodes, 2 + P)

    def concentration(self, i: int, times) -> np.ndarray:
        """Noise-free plasma concentration of individual ``i``."""
        c = np.interp(times, self.grid, self.states[i, :, 1])
        v = np.interp(times, self.grid, np.exp(self.theta[i, :, 2]))
        return c / v


@dataclass
class StudyRecord:
    individuals: list[IndividualRecord]
    study_id: str = "study"
    hyper: StudyHyperParams | None = None
    latents: StudyLatents | None = None

    def __post_init__(self):
        if len(self.individuals) < 1:
            raise ValueError("a study needs at least one individual")

    def __len__(self) -> int:
        return len(self.individuals)

    def observable(self) -> "StudyRecord":
        return StudyRecord(list(self.individuals), self.study_id)

    def without(self, index: int) -> "StudyRecord":
        rest = [d for j, d in enumerate(self.individuals) if j != index]
        return StudyRecord(rest, self.study_id)


def characteristic_timescales(eta: StudyHyperParams) -> Timescales:
    """Peak time and half-life of a one-compartment oral model at typical rates."""
    k_a, k_e = math.exp(eta.coords[0].m), math.exp(eta.coords[1].m)
    if abs(k_a - k_e) < 1e-9:
        t_peak = 1.0 / k_e
    else:
        t_peak = (math.log(k_a) - math.log(k_e)) / (k_a - k_e)
    return Timescales(t_peak, math.log(2.0) / k_e)


def build_schedule(ts: Timescales) -> Schedule:
    pre = [j * ts.t_peak / PRE_PEAK_SAMPLES for j in range(1, PRE_PEAK_SAMPLES + 1)]
    post = [ts.t_peak + c * ts.t_half for c in POST_PEAK_HALF_LIVES]
    times = np.array(pre + post)
    return Schedule(times, np.ones(times.size, dtype=bool))


def subsample_schedule(s: Schedule, size_law: SizeLaw, rng: np.random.Generator) -> Schedule:
    """Keep a uniformly random subset of the schedule whose size follows ``size_law``."""
    n = min(size_law.sample(rng), s.times.size)
    keep = np.sort(rng.choice(s.times.size, size=n, replace=False))
    mask = np.zeros(s.times.size, dtype=bool)
    mask[keep] = True
    return Schedule(s.times.copy(), mask)


def observe(central_path, volume_path, grid, schedule: Schedule, sigma_obs: float,
            rng: np.random.Generator) -> np.ndarray:
    """Proportional-error concentrations at the kept schedule times.

    Amounts and volumes are interpolated linearly between grid nodes; the
    multiplicative noise factor is clamped below at ``NOISE_FACTOR_FLOOR``.
    """
    if sigma_obs < 0:
        raise ValueError("sigma_obs must be non-negative")
    tau = schedule.kept_times
    conc = np.interp(tau, grid, central_path) / np.interp(tau, grid, volume_path)
    factor = 1.0 + sigma_obs * rng.standard_normal(tau.size)
    return conc * np.maximum(factor, NOISE_FACTOR_FLOOR)


def stable_grid_steps(eta: StudyHyperParams, mu: np.ndarray, tau_max: float, base_steps: int,
                      max_rate_step: float | None = 1.5, n_sd: float = 4.0) -> int:
    """Smallest uniform step count >= ``base_steps`` keeping RK4 stable.

    The fastest decay rate of the linear system is at most
    ``max(k_a, k_e + sum k+ + sum k-)``; rates are bounded by evaluating each
    individual's mean log-parameter ``n_sd`` stationary deviations high.
    """
    if max_rate_step is None:
        return base_steps
    hi = np.exp(np.asarray(mu) + n_sd * np.sqrt(eta.sigma ** 2 / (2.0 * eta.lam)))
    rate = np.maximum(hi[..., 0], hi[..., 1] + hi[..., 3:].sum(axis=-1))
    return max(base_steps, int(math.ceil(float(rate.max()) * tau_max / max_rate_step)))


def generate_study(config: SimulationConfig, rng: np.random.Generator,
                   study_id: str = "study", hyper: StudyHyperParams | None = None) -> StudyRecord:
    """Run the full hierarchical simulation for one study.

    ``hyper`` pins the study-level draw (used by tests and by callers that
    sweep a single population); otherwise it is sampled from ``config.prior``.
    """
    eta = sample_study_hyperparams(config.prior, rng) if hyper is None else hyper
    base = build_schedule(characteristic_timescales(eta))
    mu = sample_individual_means(eta, rng, size=eta.I)
    steps = stable_grid_steps(eta, mu.mu, base.tau_max, config.grid_steps, config.max_rate_step)
    grid = np.linspace(0.0, base.tau_max, steps + 1)
    path: ParameterPath = sample_parameter_path(eta, mu, grid, rng)
    x0 = apply_dose(eta.dose, eta.P)
    try:
        states = integrate_path(x0, path.theta, grid)
    except NumericBlowupError as err:
        raise NumericBlowupError(err.time, f"{err} (study {study_id})") from err
    volume = np.exp(path.theta[..., 2])
    individuals = []
    for i in range(eta.I):
        sched = subsample_schedule(base, config.size_law, rng)
        y = observe(states[i, :, 1], volume[i], grid, sched, eta.sigma_obs, rng)
        individuals.append(IndividualRecord(eta.dose, sched.kept_times, y))
    latents = StudyLatents(grid, mu.mu, path.theta, states)
    return StudyRecord(individuals, study_id, hyper=eta, latents=latents)


@dataclass(frozen=True)
class ContextLengthLaw:
    """Number of leading observations used as context for a trajectory of length T.

    By default uniform over ``{0, ..., min(max_context, T - 1)}``; ``fixed``
    pins the count (capped at ``T - 1`` so a target always remains).
    """

    max_context: int = 4
    fixed: int | None = None

    def sample(self, n_obs: int, rng: np.random.Generator) -> int:
        upper = min(self.max_context if self.fixed is None else self.fixed, n_obs - 1)
        if self.fixed is not None:
            return upper
        return int(rng.integers(0, upper + 1))


@dataclass
class HoldoutSplit:
    context: StudyRecord
    held_out: IndividualRecord
    index: int


@dataclass
class ForecastSplit:
    """Chronological context/target split of every eligible individual.

    ``full`` is the observed study S; ``context[k]``/``target[k]`` belong to
    ``full.individuals[indices[k]]``.
    """

    full: StudyRecord
    indices: list[int]
    context: list[IndividualRecord]
    target: list[IndividualRecord]


def partition_study(s: StudyRecord, mode: str, rng: np.random.Generator,
                    context_law: ContextLengthLaw | None = None):
    if mode == "holdout_individual":
        if len(s) < 2:
            raise PartitionError("holdout partition needs at least two individuals")
        n = int(rng.integers(len(s)))
        return HoldoutSplit(s.without(n), s.individuals[n], n)
    if mode == "context_target":
        law = context_law or ContextLengthLaw()
        indices, ctx, tgt = [], [], []
        for i, d in enumerate(s.individuals):
            if d.n_valid < 2:
                continue
            J = law.sample(d.n_valid, rng)
            indices.append(i)
            ctx.append(d.first(J))
            tgt.append(d.after(J))
        if not indices:
            raise PartitionError("no individual has the two observations a context/target split needs")
        return ForecastSplit(s, indices, ctx, tgt)
    raise PartitionError(f"unknown partition mode {mode!r}")


def split_at(d: IndividualRecord, J: int) -> tuple[IndividualRecord, IndividualRecord]:
    """Chronological split: first ``J`` valid observations, then the rest."""
    if J < 0:
        raise PartitionError("context length must be non-negative")
    return d.first(J), d.after(J)


def study_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for the ``index``-th item of a seeded run."""
    return np.random.default_rng([int(seed), int(stream), int(index)])


def generate_studies(config: SimulationConfig, seed: int, n: int, start: int = 0,
                     prefix: str = "study") -> list[StudyRecord]:
    return [generate_study(config, study_rng(seed, i), f"{prefix}_{i:05d}")
            for i in range(start, start + n)]


def canonical_times(s: StudyRecord) -> np.ndarray:
    """Design times of a study: the shared schedule when simulated, else all observed times."""
    if s.hyper is not None:
        return build_schedule(characteristic_timescales(s.hyper)).times
    return np.unique(np.concatenate([d.valid()[0] for d in s.individuals]))
