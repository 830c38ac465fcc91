"""Random study hyperparameters and Ornstein-Uhlenbeck log-parameter paths."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .pk import DoseEvent, Route


class ConfigurationError(ValueError):
    """Invalid simulation configuration."""


def _check_range(name: str, lo_hi, positive: bool = False) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in lo_hi)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{name}: expected a (lower, upper) pair, got {lo_hi!r}") from None
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ConfigurationError(f"{name}: bounds must be finite")
    if lo > hi:
        raise ConfigurationError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
    if positive and lo <= 0:
        raise ConfigurationError(f"{name}: range must be strictly positive, got lower bound {lo}")
    return lo, hi


@dataclass
class PriorConfig:
    """Ranges of the uniform hyperpriors plus the laws of the study design draws.

    ``m_*`` ranges are on the log scale (time in hours, volume in litres).
    ``lambda2`` is the range of the squared mean-reversion rate and
    ``stationary_var`` the range of ``sigma**2 / (2 * lambda)``.
    """

    m_log_ka: tuple[float, float] = (math.log(0.3), math.log(3.0))
    m_log_ke: tuple[float, float] = (math.log(0.02), math.log(0.7))
    m_log_v: tuple[float, float] = (math.log(5.0), math.log(100.0))
    m_log_kper: tuple[float, float] = (math.log(0.05), math.log(1.0))
    s: tuple[float, float] = (0.05, 0.5)
    lambda2: tuple[float, float] = (0.01, 1.0)
    stationary_var: tuple[float, float] = (0.0, 0.05)
    n_peripheral: tuple[int, ...] = (0, 1, 2)
    n_individuals: tuple[int, int] = (5, 20)
    dose_amount: tuple[float, float] = (1.0, 1000.0)
    p_oral: float = 0.5
    sigma_obs: tuple[float, float] = (0.05, 0.25)

    def validate(self) -> "PriorConfig":
        for name in ("m_log_ka", "m_log_ke", "m_log_v", "m_log_kper", "sigma_obs"):
            _check_range(name, getattr(self, name))
        s_lo, _ = _check_range("s", self.s)
        if s_lo < 0:
            raise ConfigurationError("s: spreads must be non-negative")
        _check_range("lambda2", self.lambda2, positive=True)
        v_lo, _ = _check_range("stationary_var", self.stationary_var)
        if v_lo < 0:
            raise ConfigurationError("stationary_var: must be non-negative")
        i_lo, _ = _check_range("n_individuals", self.n_individuals)
        if i_lo < 1 or any(int(v) != v for v in self.n_individuals):
            raise ConfigurationError("n_individuals: integer bounds >= 1 required")
        _check_range("dose_amount", self.dose_amount, positive=True)
        if not self.n_peripheral or any(int(p) != p or p < 0 for p in self.n_peripheral):
            raise ConfigurationError("n_peripheral: non-empty list of non-negative integers required")
        if not 0.0 <= self.p_oral <= 1.0:
            raise ConfigurationError("p_oral: must lie in [0, 1]")
        if _check_range("sigma_obs", self.sigma_obs)[0] < 0:
            raise ConfigurationError("sigma_obs: must be non-negative")
        return self

    def m_range(self, k: int) -> tuple[float, float]:
        if k == 0:
            return self.m_log_ka
        if k == 1:
            return self.m_log_ke
        if k == 2:
            return self.m_log_v
        return self.m_log_kper


@dataclass(frozen=True)
class CoordinateHyperParams:
    m: float
    s: float
    lam: float
    sigma: float

    @property
    def stationary_var(self) -> float:
        return self.sigma ** 2 / (2.0 * self.lam)


@dataclass
class StudyHyperParams:
    coords: list[CoordinateHyperParams]
    P: int
    I: int
    dose: DoseEvent
    sigma_obs: float

    def __post_init__(self):
        if len(self.coords) != 3 + 2 * self.P:
            raise ConfigurationError(f"expected {3 + 2 * self.P} coordinates, got {len(self.coords)}")
        if self.I < 1:
            raise ConfigurationError("a study needs at least one individual")
        if self.sigma_obs < 0:
            raise ConfigurationError("sigma_obs must be non-negative")

    @property
    def m(self) -> np.ndarray:
        return np.array([c.m for c in self.coords])

    @property
    def s(self) -> np.ndarray:
        return np.array([c.s for c in self.coords])

    @property
    def lam(self) -> np.ndarray:
        return np.array([c.lam for c in self.coords])

    @property
    def sigma(self) -> np.ndarray:
        return np.array([c.sigma for c in self.coords])

    def to_dict(self) -> dict:
        return {
            "P": self.P, "I": self.I, "sigma_obs": self.sigma_obs,
            "dose": {"amount": self.dose.amount, "route": self.dose.route.value},
            "coords": [{"m": c.m, "s": c.s, "lambda": c.lam, "sigma": c.sigma} for c in self.coords],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StudyHyperParams":
        return cls(
            coords=[CoordinateHyperParams(c["m"], c["s"], c["lambda"], c["sigma"]) for c in d["coords"]],
            P=int(d["P"]), I=int(d["I"]), sigma_obs=float(d["sigma_obs"]),
            dose=DoseEvent(float(d["dose"]["amount"]), d["dose"]["route"]),
        )


@dataclass
class IndividualMeans:
    mu: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        if not np.all(np.isfinite(self.mu)):
            raise ValueError("individual means must be finite")


@dataclass
class ParameterPath:
    grid: np.ndarray
    theta: np.ndarray
    mu: IndividualMeans = field(repr=False)


def sample_study_hyperparams(config: PriorConfig, rng: np.random.Generator) -> StudyHyperParams:
    """Draw the population-level quantities of one study."""
    config.validate()
    P = int(rng.choice(np.asarray(config.n_peripheral, dtype=int)))
    I = int(rng.integers(int(config.n_individuals[0]), int(config.n_individuals[1]) + 1))
    coords = []
    for k in range(3 + 2 * P):
        m = rng.uniform(*config.m_range(k))
        s = rng.uniform(*config.s)
        lam = math.sqrt(rng.uniform(*config.lambda2))
        stat_var = rng.uniform(*config.stationary_var)
        coords.append(CoordinateHyperParams(m, s, lam, math.sqrt(2.0 * lam * stat_var)))
    lo, hi = config.dose_amount
    amount = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    route = Route.ORAL if rng.random() < config.p_oral else Route.IV
    sigma_obs = rng.uniform(*config.sigma_obs)
    return StudyHyperParams(coords, P, I, DoseEvent(amount, route), sigma_obs)


def sample_individual_means(eta: StudyHyperParams, rng: np.random.Generator, size: int | None = None) -> IndividualMeans:
    """Draw ``mu_k ~ N(m_k, s_k^2)``; ``size`` adds a leading axis of individuals."""
    shape = (len(eta.coords),) if size is None else (size, len(eta.coords))
    return IndividualMeans(eta.m + eta.s * rng.standard_normal(shape))


def ou_step(theta_t, mu, lam, sigma, dt, rng: np.random.Generator):
    """Exact OU transition over ``dt``; broadcasts over all array arguments."""
    theta_t, mu, lam, sigma, dt = (np.asarray(v, dtype=float) for v in (theta_t, mu, lam, sigma, dt))
    if np.any(dt <= 0) or np.any(lam <= 0):
        raise ValueError("ou_step requires dt > 0 and lambda > 0")
    decay = np.exp(-lam * dt)
    sd = sigma * np.sqrt(-np.expm1(-2.0 * lam * dt) / (2.0 * lam))
    shape = np.broadcast_shapes(theta_t.shape, mu.shape, lam.shape, sigma.shape, dt.shape)
    out = mu + (theta_t - mu) * decay + sd * rng.standard_normal(shape)
    return out if out.ndim else float(out)


def sample_parameter_path(eta: StudyHyperParams, mu: IndividualMeans, grid, rng: np.random.Generator) -> ParameterPath:
    """Sample a stationary OU path on ``grid`` for every coordinate.

    ``mu.mu`` may carry a leading individual axis; the returned ``theta`` then has
    shape ``(n_individuals, n_nodes, 3 + 2P)``.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    m = mu.mu
    lam, sigma = eta.lam, eta.sigma
    stat_sd = sigma / np.sqrt(2.0 * lam)
    theta = np.empty(m.shape[:-1] + (grid.size, m.shape[-1]))
    current = m + stat_sd * rng.standard_normal(m.shape)
    theta[..., 0, :] = current
    dts = np.diff(grid)
    decays = np.exp(-np.outer(dts, lam))
    sds = sigma * np.sqrt(-np.expm1(-2.0 * np.outer(dts, lam)) / (2.0 * lam))
    for j in range(dts.size):
        current = m + (current - m) * decays[j] + sds[j] * rng.standard_normal(m.shape)
        theta[..., j + 1, :] = current
    return ParameterPath(grid, theta, mu)
