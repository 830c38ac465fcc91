"""Linear compartment dynamics with time-varying kinetic parameters.

States are stored as plain arrays laid out as ``(gut, central, per_1, ..., per_P)``
and log-parameters as ``(log k_a, log k_e, log V, log k1+, log k1-, ..., log kP+, log kP-)``.
Every function broadcasts over leading batch axes, so a whole study of
individuals is integrated in one call.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class StructuralError(ValueError):
    """Dimension mismatch between states, parameters or grids."""


class NumericBlowupError(FloatingPointError):
    """Raised when integration produces a non-finite state."""

    def __init__(self, time: float, message: str | None = None):
        self.time = float(time)
        super().__init__(message or f"non-finite compartment state at t={self.time:g}")


class Route(str, enum.Enum):
    ORAL = "oral"
    IV = "iv"

    @classmethod
    def parse(cls, value: "Route | str") -> "Route":
        if isinstance(value, Route):
            return value
        value = str(value).lower()
        if value in ("iv", "intravenous"):
            return cls.IV
        if value in ("oral", "po"):
            return cls.ORAL
        raise ValueError(f"unknown dosing route {value!r}")


@dataclass(frozen=True)
class DoseEvent:
    amount: float
    route: Route = Route.ORAL

    def __post_init__(self):
        object.__setattr__(self, "route", Route.parse(self.route))
        if not np.isfinite(self.amount) or self.amount <= 0:
            raise ValueError(f"dose amount must be positive, got {self.amount}")


@dataclass(frozen=True)
class CompartmentState:
    gut: float
    central: float
    peripheral: tuple[float, ...] = ()

    @property
    def n_peripheral(self) -> int:
        return len(self.peripheral)

    def as_array(self) -> np.ndarray:
        return np.array([self.gut, self.central, *self.peripheral], dtype=float)

    @classmethod
    def from_array(cls, x: Sequence[float]) -> "CompartmentState":
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.size < 2:
            raise StructuralError(f"state must be a vector of length >= 2, got shape {x.shape}")
        return cls(float(x[0]), float(x[1]), tuple(float(v) for v in x[2:]))


@dataclass(frozen=True)
class KineticParams:
    """Rate constants of the compartment model (all strictly positive)."""

    k_a: float
    k_e: float
    V: float
    k_plus: tuple[float, ...] = field(default=())
    k_minus: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if len(self.k_plus) != len(self.k_minus):
            raise StructuralError("k_plus and k_minus must have equal length")
        values = [self.k_a, self.k_e, self.V, *self.k_plus, *self.k_minus]
        if not all(np.isfinite(v) and v > 0 for v in values):
            raise ValueError("kinetic parameters must be finite and strictly positive")

    @property
    def n_peripheral(self) -> int:
        return len(self.k_plus)

    def log_vector(self) -> np.ndarray:
        """Return the log-parameter vector in the interleaved (k+, k-) layout."""
        per = [v for pair in zip(self.k_plus, self.k_minus) for v in pair]
        return np.log(np.array([self.k_a, self.k_e, self.V, *per], dtype=float))

    @classmethod
    def from_log(cls, theta: Sequence[float]) -> "KineticParams":
        theta = np.asarray(theta, dtype=float)
        if theta.ndim != 1 or theta.size < 3 or (theta.size - 3) % 2:
            raise StructuralError(f"log-parameter vector must have length 3 + 2P, got {theta.size}")
        k = np.exp(theta)
        return cls(float(k[0]), float(k[1]), float(k[2]),
                   tuple(float(v) for v in k[3::2]), tuple(float(v) for v in k[4::2]))


def n_peripheral_from_params(n_params: int) -> int:
    if n_params < 3 or (n_params - 3) % 2:
        raise StructuralError(f"expected 3 + 2P log-parameters, got {n_params}")
    return (n_params - 3) // 2


def rate_matrix(theta: np.ndarray) -> np.ndarray:
    """Build the linear vector field ``A`` with ``dX/dt = A X`` from log-parameters.

    ``theta`` has shape ``(..., 3 + 2P)``; the result has shape ``(..., 2 + P, 2 + P)``.
    The volume coordinate does not enter the dynamics.
    """
    theta = np.asarray(theta, dtype=float)
    P = n_peripheral_from_params(theta.shape[-1])
    k = np.exp(theta)
    k_a, k_e = k[..., 0], k[..., 1]
    k_plus, k_minus = k[..., 3::2], k[..., 4::2]
    n = 2 + P
    A = np.zeros(theta.shape[:-1] + (n, n))
    A[..., 0, 0] = -k_a
    A[..., 1, 0] = k_a
    A[..., 1, 1] = -(k_e + k_plus.sum(axis=-1))
    for j in range(P):
        A[..., 1, 2 + j] = k_minus[..., j]
        A[..., 2 + j, 1] = k_plus[..., j]
        A[..., 2 + j, 2 + j] = -k_minus[..., j]
    return A


def derivative(state, params: KineticParams) -> np.ndarray:
    """Time derivative of the compartment amounts for fixed rate constants."""
    x = state.as_array() if isinstance(state, CompartmentState) else np.asarray(state, dtype=float)
    P = params.n_peripheral
    if x.shape[-1] != 2 + P:
        raise StructuralError(f"state has {x.shape[-1]} compartments but params describe {2 + P}")
    gut, central, per = x[..., 0], x[..., 1], x[..., 2:]
    k_plus = np.asarray(params.k_plus, dtype=float)
    k_minus = np.asarray(params.k_minus, dtype=float)
    out = np.empty_like(x)
    out[..., 0] = -params.k_a * gut
    out[..., 1] = (params.k_a * gut - (params.k_e + k_plus.sum()) * central
                   + (per * k_minus).sum(axis=-1))
    out[..., 2:] = k_plus * central[..., None] - k_minus * per
    return out


def apply_dose(dose: DoseEvent, P: int) -> np.ndarray:
    """Initial compartment amounts right after a single dose."""
    if P < 0:
        raise StructuralError("P must be non-negative")
    x = np.zeros(2 + P)
    x[0 if dose.route is Route.ORAL else 1] = dose.amount
    return x


def integrate_path(initial, param_path, grid) -> np.ndarray:
    """Integrate the compartment ODE with classical RK4 on ``grid``.

    Parameters
    ----------
    initial
        Initial amounts, shape ``(..., 2 + P)`` (or a :class:`CompartmentState`).
    param_path
        Log-parameters at every grid node, shape ``(..., n_nodes, 3 + 2P)``, or any
        object with a ``theta`` attribute of that shape.
    grid
        Strictly increasing node times starting at 0.

    Returns
    -------
    np.ndarray
        States at every node, shape ``(..., n_nodes, 2 + P)``. Rates are frozen at
        the left node of each step; components pushed below zero by the
        discretisation are clamped to zero.
    """
    x0 = initial.as_array() if isinstance(initial, CompartmentState) else np.asarray(initial, dtype=float)
    theta = np.asarray(getattr(param_path, "theta", param_path), dtype=float)
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 1 or grid[0] != 0.0:
        raise StructuralError("grid must be a 1-D array starting at 0")
    h = np.diff(grid)
    if np.any(h <= 0):
        raise StructuralError("grid must be strictly increasing")
    if theta.shape[-2] != grid.size:
        raise StructuralError(f"parameter path has {theta.shape[-2]} nodes, grid has {grid.size}")
    n = x0.shape[-1]
    if n != 2 + n_peripheral_from_params(theta.shape[-1]):
        raise StructuralError("state and parameter dimensions disagree")

    A = rate_matrix(theta[..., :-1, :])  # (..., steps, n, n)
    batch = np.broadcast_shapes(x0.shape[:-1], A.shape[:-3])
    x = np.broadcast_to(x0, batch + (n,)).copy()
    out = np.empty(batch + (grid.size, n))
    out[..., 0, :] = x

    def f(Ak, v):
        return np.matmul(Ak, v[..., None])[..., 0]

    for k, hk in enumerate(h):
        Ak = A[..., k, :, :]
        k1 = f(Ak, x)
        k2 = f(Ak, x + 0.5 * hk * k1)
        k3 = f(Ak, x + 0.5 * hk * k2)
        k4 = f(Ak, x + hk * k3)
        x = x + (hk / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        np.maximum(x, 0.0, out=x)
        out[..., k + 1, :] = x

    finite = np.isfinite(out).reshape(-1, grid.size, n).all(axis=(0, 2))
    if not finite.all():
        raise NumericBlowupError(grid[np.argmin(finite)])
    return out


def bateman(t, dose: float, k_a: float, k_e: float) -> np.ndarray:
    """Closed-form central amount for a one-compartment oral model."""
    t = np.asarray(t, dtype=float)
    if np.isclose(k_a, k_e):
        return dose * k_a * t * np.exp(-k_e * t)
    return dose * k_a / (k_a - k_e) * (np.exp(-k_e * t) - np.exp(-k_a * t))
