"""Numerical optimization of a piecewise-constant sensitivity schedule.

Minimizes the terminal cost with the projective-end conditioning folded in,

    K = P33(tau) - P31(tau)^2 / P11(tau),

over the log-sensitivities of an n-interval schedule by projected gradient
descent with central finite-difference gradients.  Reported costs use the
same hbar*m/tau^3 units as :mod:`forcemeter.analytics`, so the converged
free-particle optimum is 3.0 (3/4 of the von Neumann SQL) and a
single-interval problem reduces to the scalar minimization of
``sigma_free_constant_projective_end``.

The cost is affine in each interval's k, so the landscape has nearly flat
(singular-arc) directions near the optimum.  By default the projection step
also projects onto non-decreasing schedules (isotonic regression in log k),
which regularizes those directions and matches the known monotone structure
of the optimum; set ``monotone=False`` for the unconstrained descent.

Covariance propagation uses the exact per-interval linearized (Hamiltonian)
flow when the force shape is constant within intervals, and falls back to
the RK4 path of :mod:`forcemeter.statespace` otherwise; both paths agree to
integrator tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .gaussian import PhysicalParams, dimensionless_params
from .statespace import (
    AugmentedModel,
    ForceBasis,
    SensitivitySchedule,
    build_model,
    covariance_from_plane,
    interval_propagator,
    plane_from_covariance,
    projective_reduction,
    propagate_plane,
    run_schedule,
    steady_covariance,
)

__all__ = ["ScheduleOptProblem", "OptimizationResult", "cost", "gradient_fd", "optimize"]


@dataclass(frozen=True)
class ScheduleOptProblem:
    """Configuration of the schedule optimization.

    ``initial_policy`` selects P(0): "optimal-init" is the
    well-defined-momentum state (var_p = eps, var_x = 1/eps in scaled units),
    "steady-state" the stationary packet of the interval's k.  The flat theta
    prior is a large finite variance ``theta_prior_var``.
    """

    n_intervals: int = 50
    params: PhysicalParams = field(default_factory=dimensionless_params)
    basis: ForceBasis = field(default_factory=ForceBasis.constant)
    initial_policy: str = "optimal-init"
    eps: float = 1e-6
    theta_prior_var: float = 1e6
    log_k_bounds: tuple[float, float] = (-6.0, 12.0)
    max_iters: int = 2000
    tol: float = 1e-6
    patience: int = 5
    fd_step: float = 1e-5
    monotone: bool = True
    terminal_projective: bool = True

    def __post_init__(self):
        if self.n_intervals < 1:
            raise ValidationError("n_intervals must be >= 1")
        if not self.log_k_bounds[0] < self.log_k_bounds[1]:
            raise ValidationError("log_k bounds must be increasing")
        if self.initial_policy not in ("optimal-init", "steady-state"):
            raise ValidationError(f"unknown initial policy {self.initial_policy!r}")
        if not (math.isfinite(self.log_k_bounds[0]) and math.isfinite(self.log_k_bounds[1])):
            raise ValidationError("log_k bounds must be finite")

    def initial_covariance(self, k0: float) -> np.ndarray:
        p = self.params
        P0 = np.zeros((3, 3))
        if self.initial_policy == "optimal-init":
            P0[0, 0] = (1.0 / self.eps) * (p.hbar * p.tau / (2.0 * p.m))
            P0[1, 1] = self.eps * (p.hbar * p.m / (2.0 * p.tau))
        else:
            P0[:2, :2] = steady_covariance(p, k0)
        # flat prior in the theta scaling of the dimensionless map
        P0[2, 2] = self.theta_prior_var * (p.hbar * p.m / (2.0 * p.tau**3))
        return P0

    def schedule(self, ks: np.ndarray) -> SensitivitySchedule:
        return SensitivitySchedule.uniform(
            ks, tau=self.params.tau, terminal_projective=self.terminal_projective
        )

    def model(self) -> AugmentedModel:
        return build_model(self.params, self.basis)

    def sigma_scale(self) -> float:
        """Divisor turning P33-like values into hbar*m/tau^3 units."""
        p = self.params
        return p.hbar * p.m / p.tau**3

    def basis_interval_values(self) -> np.ndarray | None:
        """Per-interval f values when f is constant within intervals, else None."""
        edges = np.linspace(0.0, self.params.tau, self.n_intervals + 1)
        probes = np.linspace(0.05, 0.95, 7)
        vals = np.empty(self.n_intervals)
        for i in range(self.n_intervals):
            samples = np.asarray(
                self.basis(edges[i] + probes * (edges[i + 1] - edges[i])), dtype=float
            )
            if np.ptp(samples) > 1e-12 * (1.0 + np.abs(samples).max()):
                return None
            vals[i] = samples[0]
        return vals


class _CostEvaluator:
    """Shared-propagator cost evaluation for one problem instance."""

    def __init__(self, problem: ScheduleOptProblem):
        self.problem = problem
        self.model = problem.model()
        self.f_vals = problem.basis_interval_values()
        self.dt = problem.params.tau / problem.n_intervals
        self._cache: dict[tuple[int, float], np.ndarray] = {}

    def _propagator(self, i: int, k: float) -> np.ndarray:
        f_i = float(self.f_vals[i])
        key = (f_i, float(k))
        E = self._cache.get(key)
        if E is None:
            if len(self._cache) > 4096:
                self._cache.clear()
            E = interval_propagator(self.model, k, f_i, self.dt)
            self._cache[key] = E
        return E

    def cost(self, ks: np.ndarray) -> float:
        ks = np.asarray(ks, dtype=float)
        if ks.shape != (self.problem.n_intervals,):
            raise ValidationError("schedule length does not match the problem")
        P0 = self.problem.initial_covariance(float(ks[0]))
        if self.f_vals is None:
            # time-varying f within intervals: RK4 path (reduction applied by run_schedule)
            prop = run_schedule(
                P0, None, self.problem.schedule(ks), self.model, n_steps=20000
            )
            K = prop.final_covariance[2, 2]
        else:
            Z = plane_from_covariance(P0)
            for i, k in enumerate(ks):
                Z = propagate_plane(Z, self._propagator(i, float(k)))
            P = covariance_from_plane(Z)
            if self.problem.terminal_projective:
                P = projective_reduction(P)
            K = P[2, 2]
        if not math.isfinite(K):
            raise NumericalError("non-finite cost")
        return float(K) / self.problem.sigma_scale()


def cost(schedule, problem: ScheduleOptProblem) -> float:
    """Terminal cost K of a schedule, in hbar*m/tau^3 units.

    ``schedule`` is a SensitivitySchedule on a uniform n-interval grid or a
    plain array of per-interval sensitivities.
    """
    ks = schedule.values if isinstance(schedule, SensitivitySchedule) else np.asarray(schedule)
    return _CostEvaluator(problem).cost(ks)


def gradient_fd(ks, problem: ScheduleOptProblem, step: float | None = None) -> np.ndarray:
    """Central finite-difference gradient of the cost in log-k coordinates."""
    evaluator = _CostEvaluator(problem)
    return _gradient(evaluator, np.log(np.asarray(ks, dtype=float)), step or problem.fd_step)


def _gradient(evaluator: _CostEvaluator, log_k: np.ndarray, step: float) -> np.ndarray:
    if not step > 0:
        raise ValidationError("finite-difference step must be positive")
    g = np.empty_like(log_k)
    for j in range(log_k.size):
        lp = log_k.copy()
        lp[j] += step
        lm = log_k.copy()
        lm[j] -= step
        g[j] = (evaluator.cost(np.exp(lp)) - evaluator.cost(np.exp(lm))) / (2.0 * step)
    return g


def _isotonic_increasing(y: np.ndarray) -> np.ndarray:
    """Pool-adjacent-violators projection onto non-decreasing sequences."""
    blocks: list[list[float]] = []  # [value, weight]
    for v in y:
        blocks.append([float(v), 1.0])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            v2, w2 = blocks.pop()
            v1, w1 = blocks.pop()
            blocks.append([(v1 * w1 + v2 * w2) / (w1 + w2), w1 + w2])
    out = np.empty_like(y)
    i = 0
    for v, w in blocks:
        n = int(round(w))
        out[i : i + n] = v
        i += n
    return out


@dataclass
class OptimizationResult:
    schedule: SensitivitySchedule
    cost: float
    history: np.ndarray
    n_iterations: int
    converged: bool

    @property
    def sensitivities(self) -> np.ndarray:
        return self.schedule.values


def optimize(
    problem: ScheduleOptProblem, init: SensitivitySchedule | np.ndarray | None = None
) -> OptimizationResult:
    """Projected gradient descent on log k_j with backtracking line search.

    Deterministic given the initial schedule.  The default initialization is
    the constant schedule at the projective-end scalar optimum.  Stops when
    the relative cost decrease stays below ``tol`` for ``patience`` accepted
    iterations, or after ``max_iters``.
    """
    from .analytics import minimize_scalar, sigma_free_constant_projective_end

    evaluator = _CostEvaluator(problem)
    lo, hi = problem.log_k_bounds

    def project(log_k: np.ndarray) -> np.ndarray:
        out = _isotonic_increasing(log_k) if problem.monotone else log_k
        return np.clip(out, lo, hi)

    if init is None:
        k0, _ = minimize_scalar(sigma_free_constant_projective_end, (0.2, 12.0))
        ks0 = np.full(problem.n_intervals, k0)
    else:
        ks0 = init.values if isinstance(init, SensitivitySchedule) else np.asarray(init, float)
        if ks0.shape != (problem.n_intervals,):
            raise ValidationError("init schedule length does not match the problem")
        if np.any(np.log(ks0) < lo - 1e-12) or np.any(np.log(ks0) > hi + 1e-12):
            raise ValidationError("init schedule violates the log-k bounds")

    log_k = project(np.log(ks0))
    f_curr = evaluator.cost(np.exp(log_k))
    history = [f_curr]
    step = 0.5
    stall = 0
    converged = False

    for _ in range(problem.max_iters):
        g = _gradient(evaluator, log_k, problem.fd_step)
        g_norm = float(np.max(np.abs(g)))
        if g_norm == 0.0:
            converged = True
            break
        direction = -g / g_norm
        s = step
        accepted = False
        while s > 1e-14:
            trial = project(log_k + s * direction)
            try:
                f_trial = evaluator.cost(np.exp(trial))
            except NumericalError:
                s *= 0.5
                continue
            if f_trial < f_curr:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            converged = True
            break
        rel_drop = (f_curr - f_trial) / abs(f_curr)
        log_k, f_curr = trial, f_trial
        history.append(f_curr)
        step = min(2.0 * s, 1.0)
        stall = stall + 1 if rel_drop < problem.tol else 0
        if stall >= problem.patience:
            converged = True
            break

    return OptimizationResult(
        schedule=problem.schedule(np.exp(log_k)),
        cost=f_curr,
        history=np.asarray(history),
        n_iterations=len(history) - 1,
        converged=converged,
    )
