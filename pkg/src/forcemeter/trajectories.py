"""Stochastic measurement records and Monte Carlo validation of the filter.

Ground truth is simulated with the theta-conditioned Gaussian dynamics
(exact for this linear model), drawing Wiener increments dW ~ N(0, dt) and
emitting record increments dxi = x_bar dt + dW / sqrt(2k).

Reproducibility: trajectory j of a run seeded with s draws from the
independent substream ``default_rng([s, j])``, so ensembles are
order-independent and bit-reproducible.  Ensemble reductions are stored per
chunk and combined in fixed index order.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import GridError, ValidationError
from .gaussian import (
    GaussianState,
    PhysicalParams,
    derived_moments,
    sde_step,
    sigma_solution,
    steady_state_sigma,
)
from .statespace import (
    AugmentedModel,
    ForceBasis,
    SensitivitySchedule,
    build_model,
    steady_covariance,
)

__all__ = [
    "Signal",
    "MeasurementRecord",
    "WhitenessStats",
    "EnsembleStats",
    "generate_record",
    "generate_ensemble",
    "initial_covariance",
    "innovation_whiteness",
    "monte_carlo_estimator_variance",
]

WHITENESS_LAGS = 10


@dataclass(frozen=True)
class Signal:
    """Force signal theta(t) = weight * f(t) with known shape f."""

    basis: ForceBasis
    weight: float

    def __call__(self, t):
        return self.weight * np.asarray(self.basis(t), dtype=float)


@dataclass
class MeasurementRecord:
    """Record increments dxi on a uniform grid covering [0, tau]."""

    dt: float
    dxi: np.ndarray
    schedule: SensitivitySchedule
    seed: int | None = None
    traj_index: int = 0

    def __post_init__(self):
        self.dxi = np.asarray(self.dxi, dtype=float)
        if self.dxi.ndim != 1 or self.dxi.size == 0:
            raise ValidationError("record increments must be a non-empty 1-d array")
        if not np.all(np.isfinite(self.dxi)):
            raise ValidationError("record increments must be finite")
        if not math.isclose(self.n_steps * self.dt, self.schedule.tau, rel_tol=1e-9):
            raise GridError("record grid does not cover [0, tau]")

    @property
    def n_steps(self) -> int:
        return int(self.dxi.size)

    @property
    def times(self) -> np.ndarray:
        """Left edges of the increment intervals."""
        return np.arange(self.n_steps) * self.dt

    # -- serialization ------------------------------------------------------

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "dxi"])
            for j in range(self.n_steps):
                writer.writerow([repr(j * self.dt), repr(float(self.dxi[j]))])

    @staticmethod
    def from_csv(path, schedule: SensitivitySchedule, dt: float | None = None):
        ts, vals = [], []
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
        if not rows or [c.strip() for c in rows[0][:2]] != ["t", "dxi"]:
            raise ValidationError("record CSV must have header 't,dxi'")
        for row in rows[1:]:
            ts.append(float(row[0]))
            vals.append(float(row[1]))
        ts = np.asarray(ts)
        if ts.size < 2:
            raise ValidationError("record CSV needs at least two rows")
        step = float(ts[1] - ts[0])
        if not np.allclose(np.diff(ts), step, rtol=0, atol=1e-9 * max(step, 1.0)):
            raise GridError("record CSV grid is not uniform")
        if dt is not None and not math.isclose(step, dt, rel_tol=1e-9):
            raise GridError(f"record CSV dt {step} does not match requested {dt}")
        return MeasurementRecord(dt=step, dxi=np.asarray(vals), schedule=schedule)

    def to_json_dict(self, params: PhysicalParams | None = None) -> dict:
        out = {
            "dt": self.dt,
            "seed": self.seed,
            "traj_index": self.traj_index,
            "schedule": {
                "breakpoints": self.schedule.breakpoints.tolist(),
                "values": self.schedule.values.tolist(),
                "terminal_projective": self.schedule.terminal_projective,
            },
            "dxi": self.dxi.tolist(),
        }
        if params is not None:
            out["params"] = {
                "m": params.m,
                "omega": params.omega,
                "hbar": params.hbar,
                "tau": params.tau,
            }
        return out

    def to_json(self, path, params: PhysicalParams | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(params), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def from_json(path):
        with open(path) as fh:
            doc = json.load(fh)
        schedule = SensitivitySchedule(
            breakpoints=np.asarray(doc["schedule"]["breakpoints"]),
            values=np.asarray(doc["schedule"]["values"]),
            terminal_projective=bool(doc["schedule"].get("terminal_projective", False)),
        )
        rec = MeasurementRecord(
            dt=float(doc["dt"]),
            dxi=np.asarray(doc["dxi"]),
            schedule=schedule,
            seed=doc.get("seed"),
            traj_index=int(doc.get("traj_index", 0)),
        )
        params = None
        if "params" in doc:
            params = PhysicalParams(**doc["params"])
        return rec, params


def _validate_grid(schedule: SensitivitySchedule, dt: float) -> int:
    n_steps = round(schedule.tau / dt)
    if not math.isclose(n_steps * dt, schedule.tau, rel_tol=1e-9):
        raise GridError(f"dt {dt} does not divide the horizon {schedule.tau}")
    edges = schedule.breakpoints / dt
    if not np.allclose(edges, np.round(edges), rtol=0, atol=1e-6):
        raise GridError("dt does not divide every schedule interval")
    return n_steps


def default_initial_state(params: PhysicalParams, schedule: SensitivitySchedule) -> GaussianState:
    """Steady-state packet for the schedule's initial sensitivity, centered at 0."""
    return GaussianState(x_tilde=0.0, sigma_tilde=steady_state_sigma(params, float(schedule.values[0])))


def generate_record(
    params: PhysicalParams,
    theta_true: Signal,
    schedule: SensitivitySchedule,
    dt: float,
    seed: int,
    traj_index: int = 0,
    initial_state: GaussianState | None = None,
) -> MeasurementRecord:
    """Simulate one measurement record with known force signal.

    Deterministic given (seed, traj_index).  The conditional state is stepped
    with :func:`forcemeter.gaussian.sde_step`.
    """
    n_steps = _validate_grid(schedule, dt)
    state = initial_state or default_initial_state(params, schedule)
    rng = np.random.default_rng([seed, traj_index])
    dW = rng.normal(0.0, math.sqrt(dt), size=n_steps)
    theta_vals = theta_true(np.arange(n_steps) * dt)
    dxi = np.empty(n_steps)
    for j in range(n_steps):
        k = schedule.k_at((j + 0.5) * dt)
        state, dxi[j] = sde_step(state, params, k, float(theta_vals[j]), dt, float(dW[j]))
    return MeasurementRecord(
        dt=dt, dxi=dxi, schedule=schedule, seed=seed, traj_index=traj_index
    )


def _per_step_tables(params, schedule, dt, n_steps, initial_state):
    """Common per-step quantities shared by every ensemble member."""
    t_left = np.arange(n_steps) * dt
    k_steps = np.array([schedule.k_at(t + 0.5 * dt) for t in t_left])
    sigma = complex(initial_state.sigma_tilde)
    v_x = np.empty(n_steps)
    v_p = np.empty(n_steps)
    hbar = params.hbar
    for j in range(n_steps):
        k = k_steps[j]
        amp = math.sqrt(0.5 * k)
        sr, si = sigma.real, sigma.imag
        v_x[j] = amp * (sr * sr + si * si) / sr
        v_p[j] = amp * hbar * si / sr
        sigma = sigma_solution(params, k, sigma, dt)
    return t_left, k_steps, v_x, v_p


def generate_ensemble(
    params: PhysicalParams,
    theta_true: Signal,
    schedule: SensitivitySchedule,
    dt: float,
    seed: int,
    n_traj: int,
    initial_state: GaussianState | None = None,
) -> np.ndarray:
    """Vectorized simulation of ``n_traj`` records; returns dxi of shape (n_traj, n_steps).

    Row j is bit-identical to ``generate_record(..., traj_index=j)``.
    """
    n_steps = _validate_grid(schedule, dt)
    state0 = initial_state or default_initial_state(params, schedule)
    t_left, k_steps, v_x, v_p = _per_step_tables(params, schedule, dt, n_steps, state0)
    theta_vals = theta_true(t_left)
    mom0 = derived_moments(state0, params)

    dW = np.empty((n_traj, n_steps))
    for j in range(n_traj):
        dW[j] = np.random.default_rng([seed, j]).normal(0.0, math.sqrt(dt), size=n_steps)

    m, w2 = params.m, params.omega**2 * params.m
    xbar = np.full(n_traj, mom0.x_bar)
    pbar = np.full(n_traj, mom0.p_bar)
    dxi = np.empty((n_traj, n_steps))
    inv_sqrt2k = 1.0 / np.sqrt(2.0 * k_steps)
    for j in range(n_steps):
        dxi[:, j] = xbar * dt + dW[:, j] * inv_sqrt2k[j]
        x_old = xbar
        xbar = xbar + (pbar / m) * dt + v_x[j] * dW[:, j]
        pbar = pbar + (theta_vals[j] - w2 * x_old) * dt + v_p[j] * dW[:, j]
    return dxi


def initial_covariance(
    params: PhysicalParams,
    schedule: SensitivitySchedule,
    prior_variance: float,
    initial_state: GaussianState | None = None,
) -> np.ndarray:
    """Filter prior: (x, p) block from the initial packet, theta block from the prior."""
    P0 = np.zeros((3, 3))
    if initial_state is None:
        P0[:2, :2] = steady_covariance(params, float(schedule.values[0]))
    else:
        mom = derived_moments(initial_state, params)
        P0[:2, :2] = [[mom.var_x, mom.cov], [mom.cov, mom.var_p]]
    P0[2, 2] = prior_variance
    return P0


@dataclass
class WhitenessStats:
    """Sample moments of standardized innovations z = nu / sqrt(dt/2k)."""

    n_samples: int
    mean: float
    mean_se: float
    variance: float
    variance_se: float
    lag_autocorr: np.ndarray
    lag_se: float

    def is_white(self, n_sigma: float = 3.0) -> bool:
        return (
            abs(self.mean) < n_sigma * self.mean_se
            and bool(np.all(np.abs(self.lag_autocorr) < n_sigma * self.lag_se))
        )


def _whiteness_from_z(z: np.ndarray) -> WhitenessStats:
    z = np.asarray(z, dtype=float).ravel()
    n = z.size
    mean = float(z.mean())
    var = float(z.var(ddof=1))
    lags = np.empty(WHITENESS_LAGS)
    zc = z - mean
    for lag in range(1, WHITENESS_LAGS + 1):
        lags[lag - 1] = float(np.dot(zc[lag:], zc[:-lag]) / ((n - lag) * var))
    return WhitenessStats(
        n_samples=n,
        mean=mean,
        mean_se=math.sqrt(var / n),
        variance=var,
        variance_se=math.sqrt(2.0 / (n - 1)) * var,
        lag_autocorr=lags,
        lag_se=1.0 / math.sqrt(n),
    )


def innovation_whiteness(
    record: MeasurementRecord, predicted_x: np.ndarray
) -> WhitenessStats:
    """Whiteness statistics of nu_j = dxi_j - x_hat_j dt for a filtered record.

    ``predicted_x`` holds the filter's predicted mean position at the start
    of each step (length n_steps).  Innovations are standardized by their
    model standard deviation sqrt(dt / 2 k_j) before testing.
    """
    predicted_x = np.asarray(predicted_x, dtype=float)
    if predicted_x.shape != (record.n_steps,):
        raise ValidationError("predicted_x must match the record grid")
    dt = record.dt
    k_steps = np.array([record.schedule.k_at(t + 0.5 * dt) for t in record.times])
    nu = record.dxi - predicted_x * dt
    z = nu / np.sqrt(dt / (2.0 * k_steps))
    return _whiteness_from_z(z)


@dataclass
class EnsembleStats:
    """Monte Carlo summary of estimator errors and innovation whiteness."""

    n_traj: int
    seed: int
    times: np.ndarray
    error_mean: np.ndarray
    error_var: np.ndarray
    p33: np.ndarray
    theta_err_mean: float
    theta_err_var: float
    p33_final: float
    variance_ratio: float
    whiteness: WhitenessStats

    def __post_init__(self):
        if self.n_traj < 2:
            raise ValidationError("ensemble statistics need n_traj >= 2")


def _covariance_and_gains(model, schedule, dt, n_steps, P0):
    """Riccati pass on the record grid; returns per-step gains and stored P33."""
    from .statespace import riccati_step

    P = np.asarray(P0, dtype=float).copy()
    gains = np.empty((n_steps, 3))
    p33 = np.empty(n_steps + 1)
    p33[0] = P[2, 2]
    for j in range(n_steps):
        t = (j + 0.5) * dt
        k = schedule.k_at(t)
        gains[j] = 2.0 * k * P[:, 0]
        P = riccati_step(P, model, k, float(model.basis(t)), dt)
        p33[j + 1] = P[2, 2]
    return gains, p33, P


def monte_carlo_estimator_variance(
    params: PhysicalParams,
    theta_true: Signal,
    schedule: SensitivitySchedule,
    prior_variance: float,
    n_traj: int,
    dt: float,
    seed: int,
    prior_mean: float = 0.0,
    initial_state: GaussianState | None = None,
    store_stride: int | None = None,
    chunk: int = 100,
    n_workers: int = 1,
) -> EnsembleStats:
    """Simulate an ensemble, filter each record, compare Var(theta_hat - theta*) to P33.

    The covariance/gain pass is shared by all trajectories (the filter
    covariance is record-independent).  Whiteness is computed on the pooled
    standardized innovations of the augmented filter.
    """
    if n_traj < 2:
        raise ValidationError("n_traj must be >= 2")
    n_steps = _validate_grid(schedule, dt)
    state0 = initial_state or default_initial_state(params, schedule)
    model = build_model(params, theta_true.basis)
    P0 = initial_covariance(params, schedule, prior_variance, state0)
    gains, p33, P_final = _covariance_and_gains(model, schedule, dt, n_steps, P0)

    t_left, k_steps, v_x, v_p = _per_step_tables(params, schedule, dt, n_steps, state0)
    theta_vals = theta_true(t_left)
    mom0 = derived_moments(state0, params)
    stride = store_stride or max(1, n_steps // 200)
    stored = list(range(0, n_steps + 1, stride))
    if stored[-1] != n_steps:
        stored.append(n_steps)
    stored = np.asarray(stored)

    m_mass, w2 = params.m, params.omega**2 * params.m
    inv_sqrt2k = 1.0 / np.sqrt(2.0 * k_steps)
    f_vals = np.asarray(model.basis(t_left), dtype=float)
    z_norm = 1.0 / np.sqrt(dt / (2.0 * k_steps))
    theta_star = theta_true.weight

    chunks = [(lo, min(lo + chunk, n_traj)) for lo in range(0, n_traj, chunk)]

    def run_chunk(lo, hi):
        nt = hi - lo
        dW = np.empty((nt, n_steps))
        for j in range(nt):
            dW[j] = np.random.default_rng([seed, lo + j]).normal(0.0, math.sqrt(dt), n_steps)
        xbar = np.full(nt, mom0.x_bar)
        pbar = np.full(nt, mom0.p_bar)
        mean = np.zeros((3, nt))
        mean[0] = mom0.x_bar
        mean[1] = mom0.p_bar
        mean[2] = prior_mean
        err_store = np.empty((stored.size, nt))
        s_idx = 0
        zsum = 0.0
        zsq = 0.0
        zlag = np.zeros(WHITENESS_LAGS)
        z_prev = np.zeros((WHITENESS_LAGS, nt))
        if stored[0] == 0:
            err_store[0] = mean[2] - theta_star
            s_idx = 1
        for j in range(n_steps):
            dxi = xbar * dt + dW[:, j] * inv_sqrt2k[j]
            x_old = xbar
            xbar = xbar + (pbar / m_mass) * dt + v_x[j] * dW[:, j]
            pbar = pbar + (theta_vals[j] - w2 * x_old) * dt + v_p[j] * dW[:, j]
            innov = dxi - mean[0] * dt
            z = innov * z_norm[j]
            zsum += z.sum()
            zsq += (z * z).sum()
            for lag in range(min(j, WHITENESS_LAGS)):
                zlag[lag] += (z * z_prev[lag]).sum()
            z_prev[1:] = z_prev[:-1]
            z_prev[0] = z
            drift = np.empty_like(mean)
            drift[0] = mean[1] / m_mass
            drift[1] = -w2 * mean[0] + f_vals[j] * mean[2]
            drift[2] = 0.0
            mean = mean + drift * dt + gains[j][:, None] * innov[None, :]
            if s_idx < stored.size and j + 1 == stored[s_idx]:
                err_store[s_idx] = mean[2] - theta_star
                s_idx += 1
        return err_store, mean[2].copy(), zsum, zsq, zlag, nt * n_steps

    results = [run_chunk(lo, hi) for lo, hi in chunks] if n_workers <= 1 else None
    if results is None:
        import concurrent.futures

        with concurrent.futures.ThreadPoolExecutor(max_workers=n_workers) as ex:
            futures = [ex.submit(run_chunk, lo, hi) for lo, hi in chunks]
            results = [f.result() for f in futures]

    err_store = np.concatenate([r[0] for r in results], axis=1)
    theta_hat = np.concatenate([r[1] for r in results])
    zsum = sum(r[2] for r in results)
    zsq = sum(r[3] for r in results)
    zlag = sum(r[4] for r in results)
    n_z = sum(r[5] for r in results)

    z_mean = zsum / n_z
    z_var = (zsq - n_z * z_mean**2) / (n_z - 1)
    # per trajectory, lag ell has (n_steps - ell) products
    lag_counts = n_z - np.arange(1, WHITENESS_LAGS + 1) * n_traj
    lag_corr = (zlag / lag_counts) / z_var
    whiteness = WhitenessStats(
        n_samples=n_z,
        mean=z_mean,
        mean_se=math.sqrt(z_var / n_z),
        variance=z_var,
        variance_se=math.sqrt(2.0 / (n_z - 1)) * z_var,
        lag_autocorr=lag_corr,
        lag_se=1.0 / math.sqrt(n_z),
    )

    errs = theta_hat - theta_true.weight
    err_var = float(errs.var(ddof=1))
    return EnsembleStats(
        n_traj=n_traj,
        seed=seed,
        times=stored * dt,
        error_mean=err_store.mean(axis=1),
        error_var=err_store.var(axis=1, ddof=1),
        p33=p33[stored],
        theta_err_mean=float(errs.mean()),
        theta_err_var=err_var,
        p33_final=float(p33[-1]),
        variance_ratio=err_var / float(p33[-1]),
        whiteness=whiteness,
    )
