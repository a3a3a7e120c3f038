"""Augmented (x, p, theta) linear model, Kalman filter and Riccati propagation.

The conditioned dynamics of the monitored particle are equivalent to Kalman
filtering of the classical stochastic system

    d(x, p, theta) = A(t) (x, p, theta) dt + B sqrt(2k) dV1
    dxi            = C (x, p, theta) dt + dV2 / sqrt(2k)

with A(t) zero except A12 = 1/m, A21 = -m w^2, A23 = f(t), process-noise
vector B = (0, hbar/2, 0) and observation row C = (1, 0, 0).  The estimator
covariance P obeys the matrix Riccati equation

    Pdot = A P + P A^T - 2k P C^T C P + 2k B B^T

and is independent of the measurement record.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .errors import (
    DegenerateCovarianceError,
    GridError,
    InvalidSensitivityError,
    NumericalError,
    ValidationError,
)
from .gaussian import PhysicalParams

__all__ = [
    "ForceBasis",
    "AugmentedModel",
    "SensitivitySchedule",
    "UnitScaling",
    "build_model",
    "nondimensionalize",
    "riccati_step",
    "kalman_step",
    "run_schedule",
    "projective_reduction",
    "steady_covariance",
    "filter_record",
    "SchedulePropagation",
]

# default Riccati resolution: tau / 20000, refined by run_schedule on demand
DEFAULT_RICCATI_STEPS = 20000
# PSD tolerance: min eigenvalue >= -1e-10 * trace along trajectories
PSD_TOL = 1e-10
# smallest admissible dimensionless sensitivity (k = 0 degenerates the model)
MIN_K_DIMENSIONLESS = 1e-12


class ForceBasis:
    """Known time shape f(t) of the force; the unknown weight multiplies it.

    Built-ins: constant, delta-kick (rectangle approximation), sinusoid and
    user-sampled table.  ``f`` is evaluated on [0, tau] and must be bounded.
    """

    def __init__(self, fn, name: str, description: str = ""):
        self._fn = fn
        self.name = name
        self.description = description or name

    def __call__(self, t):
        return self._fn(t)

    def __repr__(self):
        return f"ForceBasis({self.description})"

    @staticmethod
    def constant() -> "ForceBasis":
        return ForceBasis(lambda t: np.ones_like(np.asarray(t, dtype=float)), "constant")

    @staticmethod
    def zero() -> "ForceBasis":
        return ForceBasis(lambda t: np.zeros_like(np.asarray(t, dtype=float)), "zero")

    @staticmethod
    def kick(t1: float, tau: float, width: float | None = None) -> "ForceBasis":
        """Delta kick at t1, realized as a rectangle of area tau.

        Default width tau/1000, height tau/width; an approximation of
        f(t) = delta(t - t1) * tau.
        """
        w = tau / 1000.0 if width is None else width
        if w <= 0:
            raise ValidationError("kick width must be positive")
        height = tau / w

        def fn(t):
            t = np.asarray(t, dtype=float)
            return np.where((t >= t1) & (t < t1 + w), height, 0.0)

        return ForceBasis(fn, "kick", f"kick(t1={t1}, width={w})")

    @staticmethod
    def step(t1: float) -> "ForceBasis":
        """Constant force switching on at t1 (non-stationary detection shape)."""

        def fn(t):
            t = np.asarray(t, dtype=float)
            return np.where(t >= t1, 1.0, 0.0)

        return ForceBasis(fn, "step", f"step(t1={t1})")

    @staticmethod
    def sinusoid(omega_f: float, phase: float = 0.0) -> "ForceBasis":
        def fn(t):
            return np.sin(omega_f * np.asarray(t, dtype=float) + phase)

        return ForceBasis(fn, "sinusoid", f"sinusoid(omega_f={omega_f}, phase={phase})")

    @staticmethod
    def table(ts, values) -> "ForceBasis":
        ts = np.asarray(ts, dtype=float)
        values = np.asarray(values, dtype=float)
        if ts.ndim != 1 or ts.shape != values.shape or ts.size < 2:
            raise ValidationError("table basis needs matching 1-d ts/values, size >= 2")
        if np.any(np.diff(ts) <= 0):
            raise ValidationError("table ts must be strictly increasing")

        def fn(t):
            return np.interp(np.asarray(t, dtype=float), ts, values)

        return ForceBasis(fn, "table", f"table({ts.size} samples)")


@dataclass(frozen=True)
class AugmentedModel:
    """State-space matrices of the augmented (x, p, theta) system."""

    params: PhysicalParams
    basis: ForceBasis

    @property
    def B(self) -> np.ndarray:
        return np.array([0.0, 0.5 * self.params.hbar, 0.0])

    @property
    def C(self) -> np.ndarray:
        return np.array([1.0, 0.0, 0.0])

    def A(self, t: float) -> np.ndarray:
        p = self.params
        return np.array(
            [
                [0.0, 1.0 / p.m, 0.0],
                [-p.m * p.omega**2, 0.0, float(self.basis(t))],
                [0.0, 0.0, 0.0],
            ]
        )


def build_model(params: PhysicalParams, basis: ForceBasis) -> AugmentedModel:
    """Assemble the augmented model; A depends on t only through f(t)."""
    return AugmentedModel(params=params, basis=basis)


@dataclass(frozen=True)
class UnitScaling:
    """Scaling T = diag(sqrt(hbar tau/2m), sqrt(hbar m/2tau), sqrt(hbar m/2tau^3)).

    ``P_tilde = T^-1 P T^-1`` is dimensionless; sensitivities map as
    k_tilde = k * hbar tau^2 / (2m) and forces as
    theta_tilde = theta / sqrt(hbar m / 2 tau^3).
    """

    params: PhysicalParams

    @property
    def T(self) -> np.ndarray:
        p = self.params
        return np.diag(
            [
                math.sqrt(p.hbar * p.tau / (2.0 * p.m)),
                math.sqrt(p.hbar * p.m / (2.0 * p.tau)),
                math.sqrt(p.hbar * p.m / (2.0 * p.tau**3)),
            ]
        )

    def covariance_to_dimensionless(self, P: np.ndarray) -> np.ndarray:
        d = 1.0 / np.diag(self.T)
        return P * np.outer(d, d)

    def covariance_to_physical(self, P_tilde: np.ndarray) -> np.ndarray:
        d = np.diag(self.T)
        return P_tilde * np.outer(d, d)

    def sensitivity_to_dimensionless(self, k: float) -> float:
        p = self.params
        return k * p.hbar * p.tau**2 / (2.0 * p.m)

    def sensitivity_to_physical(self, k_tilde: float) -> float:
        p = self.params
        return k_tilde * 2.0 * p.m / (p.hbar * p.tau**2)

    def force_to_dimensionless(self, theta: float) -> float:
        p = self.params
        return theta / math.sqrt(p.hbar * p.m / (2.0 * p.tau**3))

    def force_to_physical(self, theta_tilde: float) -> float:
        p = self.params
        return theta_tilde * math.sqrt(p.hbar * p.m / (2.0 * p.tau**3))

    def time_to_dimensionless(self, t: float) -> float:
        return t / self.params.tau

    def time_to_physical(self, t_tilde: float) -> float:
        return t_tilde * self.params.tau


def nondimensionalize(params: PhysicalParams) -> UnitScaling:
    return UnitScaling(params=params)


@dataclass(frozen=True)
class SensitivitySchedule:
    """Piecewise-constant sensitivity k(t) >= 0 on [0, tau].

    ``breakpoints`` has n+1 entries tiling [0, tau]; ``values`` the n
    per-interval sensitivities.  ``terminal_projective`` requests an
    idealized projective position measurement at tau (exact conditioning).
    """

    breakpoints: np.ndarray
    values: np.ndarray
    terminal_projective: bool = False

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)
        if bp.ndim != 1 or bp.size < 2 or vals.ndim != 1 or vals.size != bp.size - 1:
            raise ValidationError("schedule needs n+1 breakpoints and n values")
        if bp[0] != 0.0:
            raise ValidationError("schedule must start at t = 0")
        if np.any(np.diff(bp) <= 0):
            raise ValidationError("breakpoints must be strictly increasing")
        if np.any(vals <= 0):
            raise InvalidSensitivityError("schedule sensitivities must be positive")

    @property
    def tau(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def n_intervals(self) -> int:
        return int(self.values.size)

    @staticmethod
    def constant(
        k: float, tau: float, n_intervals: int = 1, terminal_projective: bool = False
    ) -> "SensitivitySchedule":
        if n_intervals < 1:
            raise ValidationError("n_intervals must be >= 1")
        return SensitivitySchedule(
            breakpoints=np.linspace(0.0, tau, n_intervals + 1),
            values=np.full(n_intervals, float(k)),
            terminal_projective=terminal_projective,
        )

    @staticmethod
    def uniform(
        values, tau: float, terminal_projective: bool = False
    ) -> "SensitivitySchedule":
        values = np.asarray(values, dtype=float)
        return SensitivitySchedule(
            breakpoints=np.linspace(0.0, tau, values.size + 1),
            values=values,
            terminal_projective=terminal_projective,
        )

    def k_at(self, t: float) -> float:
        idx = int(np.searchsorted(self.breakpoints, t, side="right") - 1)
        idx = min(max(idx, 0), self.values.size - 1)
        return float(self.values[idx])

    def with_terminal_projective(self, flag: bool) -> "SensitivitySchedule":
        return replace(self, terminal_projective=flag)


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def _check_psd(P: np.ndarray, context: str = "") -> None:
    tr = float(np.trace(P))
    lam_min = float(np.linalg.eigvalsh(P)[0])
    if lam_min < -PSD_TOL * max(tr, 1.0):
        raise NumericalError(
            f"covariance lost positive semidefiniteness ({context}); "
            f"min eigenvalue {lam_min:.3e} for trace {tr:.3e}; use a smaller dt"
        )


def _riccati_rhs(P: np.ndarray, A: np.ndarray, k: float, BBt2k: np.ndarray) -> np.ndarray:
    return A @ P + P @ A.T - 2.0 * k * np.outer(P[:, 0], P[0, :]) + BBt2k


def riccati_step(
    P: np.ndarray, model: AugmentedModel, k: float, f_t: float, dt: float
) -> np.ndarray:
    """Advance the Riccati equation one RK4 step with f frozen at ``f_t``."""
    if not dt > 0:
        raise ValidationError("dt must be positive")
    if not k > 0:
        raise InvalidSensitivityError(f"sensitivity k must be positive, got {k}")
    p = model.params
    A = np.array([[0.0, 1.0 / p.m, 0.0], [-p.m * p.omega**2, 0.0, f_t], [0.0, 0.0, 0.0]])
    BBt2k = 2.0 * k * np.outer(model.B, model.B)
    k1 = _riccati_rhs(P, A, k, BBt2k)
    k2 = _riccati_rhs(P + 0.5 * dt * k1, A, k, BBt2k)
    k3 = _riccati_rhs(P + 0.5 * dt * k2, A, k, BBt2k)
    k4 = _riccati_rhs(P + dt * k3, A, k, BBt2k)
    out = _symmetrize(P + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
    _check_psd(out, "riccati_step")
    return out


def kalman_step(
    mean: np.ndarray,
    P: np.ndarray,
    model: AugmentedModel,
    k: float,
    f_t: float,
    dxi: float,
    dt: float,
) -> tuple[np.ndarray, np.ndarray]:
    """One Kalman step: Euler mean update driven by the record, RK4 for P.

    The covariance update is record-independent (same path as
    :func:`riccati_step`); the gain uses P at the start of the step.
    """
    p = model.params
    A = np.array([[0.0, 1.0 / p.m, 0.0], [-p.m * p.omega**2, 0.0, f_t], [0.0, 0.0, 0.0]])
    innovation = dxi - mean[0] * dt
    mean_new = mean + A @ mean * dt + 2.0 * k * P[:, 0] * innovation
    P_new = riccati_step(P, model, k, f_t, dt)
    return mean_new, P_new


def projective_reduction(P: np.ndarray) -> np.ndarray:
    """Condition the covariance on exact knowledge of x.

    ``P' = P - P e1 e1^T P / P11``; row/column 1 of the result vanish and
    ``P'33 = P33 - P31^2 / P11``.  Idempotent.
    """
    P = np.asarray(P, dtype=float)
    if not P[0, 0] > 0:
        raise DegenerateCovarianceError(f"projective reduction needs P11 > 0, got {P[0, 0]}")
    out = P - np.outer(P[:, 0], P[0, :]) / P[0, 0]
    return _symmetrize(out)


def steady_covariance(params: PhysicalParams, k: float) -> np.ndarray:
    """Steady-state (x, p) second moments of the monitored pure state, as a 2x2 block."""
    from .gaussian import steady_state_sigma

    s = steady_state_sigma(params, k)
    sr, si = s.real, s.imag
    hbar = params.hbar
    return np.array(
        [
            [abs(s) ** 2 / (2 * sr), hbar * si / (2 * sr)],
            [hbar * si / (2 * sr), hbar**2 / (2 * sr)],
        ]
    )


@dataclass
class SchedulePropagation:
    """Covariance (and optionally mean) trajectory over a schedule."""

    times: np.ndarray
    covariances: np.ndarray  # (n_times, 3, 3)
    means: np.ndarray | None = None  # (n_times, 3) when a record was filtered
    projective_applied: bool = False

    @property
    def final_covariance(self) -> np.ndarray:
        return self.covariances[-1]

    @property
    def final_mean(self) -> np.ndarray | None:
        return None if self.means is None else self.means[-1]


def _substeps_for_interval(t0: float, t1: float, dt_base: float) -> int:
    return max(1, math.ceil((t1 - t0) / dt_base - 1e-12))


def run_schedule(
    P0: np.ndarray,
    mean0: np.ndarray | None,
    schedule: SensitivitySchedule,
    model: AugmentedModel,
    record=None,
    n_steps: int = DEFAULT_RICCATI_STEPS,
    store_every: int | None = None,
) -> SchedulePropagation:
    """Propagate covariance (and mean, if a record is supplied) over [0, tau].

    Piecewise integration with k constant per interval.  Without a record the
    integration uses RK4 substeps of size <= tau/n_steps, with an additional
    per-step stability guard against the stiff measurement term (large P11).
    With a record, steps follow the record grid, which must tile every
    schedule interval exactly.

    If ``schedule.terminal_projective`` the exact conditioning
    :func:`projective_reduction` is applied at tau.
    """
    tau = schedule.tau
    dt_base = tau / n_steps
    P = _symmetrize(np.asarray(P0, dtype=float).copy())
    mean = None if mean0 is None else np.asarray(mean0, dtype=float).copy()
    p = model.params
    BBt2k_unit = np.outer(model.B, model.B)

    def A_of(t, f_val=None):
        f_t = float(model.basis(t)) if f_val is None else f_val
        return np.array(
            [[0.0, 1.0 / p.m, 0.0], [-p.m * p.omega**2, 0.0, f_t], [0.0, 0.0, 0.0]]
        )

    times = [0.0]
    covs = [P.copy()]
    means = None if mean is None else [mean.copy()]

    if record is not None:
        rec_dt = record.dt
        edges = np.round(schedule.breakpoints / rec_dt)
        if not np.allclose(edges * rec_dt, schedule.breakpoints, rtol=0, atol=1e-9 * tau):
            raise GridError("record grid does not tile the schedule intervals")
        if int(edges[-1]) != record.n_steps:
            raise GridError(
                f"record covers {record.n_steps} steps but schedule needs {int(edges[-1])}"
            )
        if mean is None:
            raise ValidationError("filtering a record requires an initial mean")
        stride = store_every or 1
        j = 0
        for i_int in range(schedule.n_intervals):
            k = float(schedule.values[i_int])
            j_end = int(edges[i_int + 1])
            while j < j_end:
                t = j * rec_dt
                mean, P = kalman_step(
                    mean, P, model, k, float(model.basis(t)), float(record.dxi[j]), rec_dt
                )
                j += 1
                if j % stride == 0 or j == record.n_steps:
                    times.append(j * rec_dt)
                    covs.append(P.copy())
                    means.append(mean.copy())
    else:
        stride = store_every or max(1, n_steps // 2000)
        count = 0
        for i_int in range(schedule.n_intervals):
            t0, t1 = schedule.breakpoints[i_int], schedule.breakpoints[i_int + 1]
            k = float(schedule.values[i_int])
            t = t0
            while t < t1 - 1e-15 * tau:
                # stability guard: RK4 needs dt << 1/(2 k P11) through stiff transients
                lam = 2.0 * k * abs(P[0, 0]) + 2.0 * (
                    1.0 / p.m + p.m * p.omega**2 + abs(float(model.basis(t))) + 1.0
                )
                dt = min(dt_base, 0.5 / lam, t1 - t)
                A = A_of(t + 0.5 * dt)
                BBt2k = 2.0 * k * BBt2k_unit
                k1 = _riccati_rhs(P, A, k, BBt2k)
                k2 = _riccati_rhs(P + 0.5 * dt * k1, A, k, BBt2k)
                k3 = _riccati_rhs(P + 0.5 * dt * k2, A, k, BBt2k)
                k4 = _riccati_rhs(P + dt * k3, A, k, BBt2k)
                P = _symmetrize(P + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))
                t += dt
                count += 1
                if count % stride == 0:
                    times.append(t)
                    covs.append(P.copy())
            if times[-1] != t:
                times.append(t)
                covs.append(P.copy())
        _check_psd(P, "run_schedule")

    projective_applied = False
    if schedule.terminal_projective:
        P = projective_reduction(P)
        times.append(tau)
        covs.append(P.copy())
        if means is not None:
            means.append(means[-1].copy())
        projective_applied = True

    return SchedulePropagation(
        times=np.asarray(times),
        covariances=np.asarray(covs),
        means=None if means is None else np.asarray(means),
        projective_applied=projective_applied,
    )


# ---------------------------------------------------------------------------
# exact interval propagation of the Riccati flow (constant A and k)
#
# With P = Lam Gam^-1 the Riccati flow linearizes:
#   d/dt [Lam; Gam] = [[A, 2k B B^T], [2k C^T C, -A^T]] [Lam; Gam]
# so a constant-coefficient interval advances by a single 6x6 matrix
# exponential.  Used by the schedule optimizer; cross-checked against the
# RK4 path in the test suite.
# ---------------------------------------------------------------------------


def interval_propagator(
    model: AugmentedModel, k: float, f_t: float, dt: float
) -> np.ndarray:
    p = model.params
    A = np.array([[0.0, 1.0 / p.m, 0.0], [-p.m * p.omega**2, 0.0, f_t], [0.0, 0.0, 0.0]])
    H = np.zeros((6, 6))
    H[:3, :3] = A
    H[3:, 3:] = -A.T
    H[:3, 3:] = 2.0 * k * np.outer(model.B, model.B)
    H[3:, :3] = 2.0 * k * np.outer(model.C, model.C)
    return scipy.linalg.expm(H * dt)


def propagate_plane(Z: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Advance a Lagrangian-plane representation and renormalize its columns."""
    Z = E @ Z
    return Z / np.linalg.norm(Z, axis=0, keepdims=True)


def plane_from_covariance(P0: np.ndarray) -> np.ndarray:
    return np.vstack([np.asarray(P0, dtype=float), np.eye(3)])


def covariance_from_plane(Z: np.ndarray) -> np.ndarray:
    Lam, Gam = Z[:3], Z[3:]
    return _symmetrize(Lam @ np.linalg.inv(Gam))


def run_schedule_exact(
    P0: np.ndarray,
    schedule: SensitivitySchedule,
    model: AugmentedModel,
    f_values=None,
) -> np.ndarray:
    """Final covariance over a schedule via exact per-interval propagators.

    Valid when f(t) is constant within each schedule interval; ``f_values``
    overrides the basis sampled at interval midpoints.
    """
    if f_values is None:
        mids = 0.5 * (schedule.breakpoints[:-1] + schedule.breakpoints[1:])
        f_values = np.asarray(model.basis(mids), dtype=float)
    Z = plane_from_covariance(P0)
    for i in range(schedule.n_intervals):
        dt = float(schedule.breakpoints[i + 1] - schedule.breakpoints[i])
        E = interval_propagator(model, float(schedule.values[i]), float(f_values[i]), dt)
        Z = propagate_plane(Z, E)
    P = covariance_from_plane(Z)
    if schedule.terminal_projective:
        P = projective_reduction(P)
    return P


def filter_record(
    record,
    model: AugmentedModel,
    schedule: SensitivitySchedule,
    mean0: np.ndarray,
    P0: np.ndarray,
    store_every: int | None = None,
) -> SchedulePropagation:
    """Run the augmented Kalman filter over a stored record."""
    return run_schedule(
        P0, mean0, schedule, model, record=record, store_every=store_every
    )
