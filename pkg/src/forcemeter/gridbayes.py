"""Discretized-theta Bayesian filter bank; exact-model oracle for the Kalman filter.

A grid of force hypotheses theta_i carries one conditional Gaussian state
each.  All hypotheses share the same complex variance flow (the variance is
theta-independent in this linear model), so only per-theta means are stored.
Weights follow the exact single-step Bayes rule for the record increment,

    dxi | theta ~ N(x_bar_theta dt, dt / 2k)
    dlogw_i = -k (dxi - x_bar_theta_i dt)^2 / dt

kept in log space with max-subtraction, which is the Kushner-Stratonovich
update of the posterior to O(dt).  The linear (Zakai-style) variant drops
the theta-independent term and skips normalization, so relative likelihoods
of any two hypotheses evolve independently of the rest of the grid.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError
from .gaussian import GaussianState, PhysicalParams, derived_moments, sigma_solution

__all__ = [
    "ThetaGridPosterior",
    "init_grid",
    "grid_update",
    "grid_update_linear",
    "posterior_moments",
    "run_grid_filter",
]


@dataclass
class ThetaGridPosterior:
    """Grid of force hypotheses with log-weights and per-theta conditional means."""

    thetas: np.ndarray
    log_weights: np.ndarray
    x_bars: np.ndarray
    p_bars: np.ndarray
    sigma_tilde: complex
    normalized: bool = True

    def __post_init__(self):
        self.thetas = np.asarray(self.thetas, dtype=float)
        self.log_weights = np.asarray(self.log_weights, dtype=float)
        self.x_bars = np.asarray(self.x_bars, dtype=float)
        self.p_bars = np.asarray(self.p_bars, dtype=float)
        n = self.thetas.size
        if self.thetas.ndim != 1 or n < 1:
            raise ValidationError("theta grid must be a non-empty 1-d array")
        if n > 1 and np.any(np.diff(self.thetas) <= 0):
            raise ValidationError("theta grid must be strictly increasing")
        for arr, name in [
            (self.log_weights, "log_weights"),
            (self.x_bars, "x_bars"),
            (self.p_bars, "p_bars"),
        ]:
            if arr.shape != self.thetas.shape:
                raise ValidationError(f"{name} must match the theta grid shape")

    @property
    def n(self) -> int:
        return int(self.thetas.size)

    def weights(self) -> np.ndarray:
        """Normalized density values on the grid (trapezoidal measure)."""
        w = np.exp(self.log_weights - self.log_weights.max())
        if self.n == 1:
            return np.array([1.0])
        z = np.trapezoid(w, self.thetas)
        return w / z

    def mean_position(self) -> float:
        """Posterior-averaged position x_bar = sum_i w_i x_bar_i dtheta."""
        if self.n == 1:
            return float(self.x_bars[0])
        w = self.weights()
        return float(np.trapezoid(w * self.x_bars, self.thetas))

    def to_csv(self, path) -> None:
        w = self.weights()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["theta", "weight"])
            for th, wi in zip(self.thetas, w):
                writer.writerow([repr(float(th)), repr(float(wi))])


def init_grid(
    theta_min: float,
    theta_max: float,
    n: int,
    prior: str | tuple = "flat",
    initial_state: GaussianState | None = None,
    params: PhysicalParams | None = None,
) -> ThetaGridPosterior:
    """Uniform grid with weights from the prior; all conditional states equal.

    ``prior`` is ``"flat"`` or ``("gaussian", mu, variance)``.  The common
    initial conditional state defaults to x_bar = p_bar = 0 with unit real
    variance; pass ``initial_state`` (+ ``params`` for its moments) otherwise.
    """
    if n < 3:
        raise ValidationError("grid needs n >= 3 points")
    if not theta_min < theta_max:
        raise ValidationError("degenerate theta range")
    thetas = np.linspace(theta_min, theta_max, n)
    if prior == "flat":
        logw = np.zeros(n)
    elif isinstance(prior, tuple) and prior[0] == "gaussian":
        _, mu, var = prior
        if var <= 0:
            raise ValidationError("prior variance must be positive")
        logw = -0.5 * (thetas - mu) ** 2 / var
    else:
        raise ValidationError(f"unknown prior spec: {prior!r}")
    if initial_state is None:
        x0, p0, sigma0 = 0.0, 0.0, 1.0 + 0.0j
    else:
        if params is None:
            raise ValidationError("params required to take moments of initial_state")
        mom = derived_moments(initial_state, params)
        x0, p0, sigma0 = mom.x_bar, mom.p_bar, complex(initial_state.sigma_tilde)
    return ThetaGridPosterior(
        thetas=thetas,
        log_weights=logw,
        x_bars=np.full(n, x0),
        p_bars=np.full(n, p0),
        sigma_tilde=sigma0,
        normalized=True,
    )


def _advance_means(posterior, dxi, k, dt, params):
    """Per-theta Kalman mean update with gains from the shared variance flow."""
    sigma = complex(posterior.sigma_tilde)
    sr, si = sigma.real, sigma.imag
    hbar, m, w2m = params.hbar, params.m, params.m * params.omega**2
    gain_x = k * (sr * sr + si * si) / sr  # sqrt(2k) v_x
    gain_p = k * hbar * si / sr            # sqrt(2k) v_p
    innov = dxi - posterior.x_bars * dt
    x_new = posterior.x_bars + (posterior.p_bars / m) * dt + gain_x * innov
    p_new = (
        posterior.p_bars
        + (posterior.thetas - w2m * posterior.x_bars) * dt
        + gain_p * innov
    )
    sigma_new = sigma_solution(params, k, sigma, dt)
    return x_new, p_new, sigma_new


def grid_update(
    posterior: ThetaGridPosterior,
    dxi: float,
    k: float,
    dt: float,
    params: PhysicalParams,
) -> ThetaGridPosterior:
    """One record increment: advance all conditional states, reweight, renormalize."""
    x_new, p_new, sigma_new = _advance_means(posterior, dxi, k, dt, params)
    logw = posterior.log_weights - k * (dxi - posterior.x_bars * dt) ** 2 / dt
    logw = logw - logw.max()  # renormalize in log space; never hard-fail on underflow
    return replace(
        posterior,
        log_weights=logw,
        x_bars=x_new,
        p_bars=p_new,
        sigma_tilde=sigma_new,
        normalized=True,
    )


def grid_update_linear(
    posterior: ThetaGridPosterior,
    dxi: float,
    k: float,
    dt: float,
    params: PhysicalParams,
) -> ThetaGridPosterior:
    """Unnormalized (Zakai-style) variant: dlog w_i = 2k x_bar_i dxi - k x_bar_i^2 dt.

    Drops only theta-independent terms, so the normalized posterior agrees
    with :func:`grid_update`; raw log-weights track relative likelihoods that
    can be evaluated per hypothesis in isolation.
    """
    x_new, p_new, sigma_new = _advance_means(posterior, dxi, k, dt, params)
    logw = posterior.log_weights + 2.0 * k * posterior.x_bars * dxi - k * posterior.x_bars**2 * dt
    return replace(
        posterior,
        log_weights=logw,
        x_bars=x_new,
        p_bars=p_new,
        sigma_tilde=sigma_new,
        normalized=False,
    )


def posterior_moments(posterior: ThetaGridPosterior) -> tuple[float, float]:
    """Posterior mean and variance by trapezoidal quadrature over the grid."""
    if posterior.n == 1:
        return float(posterior.thetas[0]), 0.0
    w = posterior.weights()
    mean = float(np.trapezoid(w * posterior.thetas, posterior.thetas))
    var = float(np.trapezoid(w * (posterior.thetas - mean) ** 2, posterior.thetas))
    return mean, var


def run_grid_filter(
    record,
    posterior: ThetaGridPosterior,
    params: PhysicalParams,
    linear: bool = False,
    store_stride: int | None = None,
):
    """Run the grid filter over a record; returns (posterior, times, means, variances)."""
    update = grid_update_linear if linear else grid_update
    dt = record.dt
    stride = store_stride or max(1, record.n_steps // 200)
    times = [0.0]
    m0, v0 = posterior_moments(posterior)
    means = [m0]
    variances = [v0]
    for j in range(record.n_steps):
        k = record.schedule.k_at((j + 0.5) * dt)
        posterior = update(posterior, float(record.dxi[j]), k, dt, params)
        if (j + 1) % stride == 0 or j + 1 == record.n_steps:
            m, v = posterior_moments(posterior)
            times.append((j + 1) * dt)
            means.append(m)
            variances.append(v)
    return posterior, np.asarray(times), np.asarray(means), np.asarray(variances)
