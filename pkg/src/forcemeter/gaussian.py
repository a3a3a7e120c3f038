"""Conditional dynamics of a continuously monitored Gaussian wavepacket.

The pure Gaussian state of the monitored particle is parameterized by a
complex mean ``x_tilde`` and a complex variance ``sigma_tilde``::

    psi(x) ~ exp(-(x - x_tilde)**2 / (2 * sigma_tilde))

All physical moments (mean position/momentum, second moments) derive from
this pair, and the parameterization is automatically pure:
``var_x * var_p - cov**2 == (hbar/2)**2`` holds identically.

Sign convention: ``theta`` is the applied force throughout the package,
``d<p>/dt = theta - m w^2 <x>``.  A positive force accelerates the particle
toward positive x.

The module is deterministic: noise increments ``dW`` are supplied by the
caller (see :mod:`forcemeter.trajectories` for record generation).
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

from .errors import (
    InvalidMeasurementError,
    InvalidSensitivityError,
    InvalidStateError,
    ValidationError,
)

__all__ = [
    "PhysicalParams",
    "GaussianState",
    "Moments",
    "dimensionless_params",
    "derived_moments",
    "state_from_moments",
    "evolve_unmeasured",
    "weak_measurement_update",
    "sde_step",
    "steady_state_sigma",
    "sigma_solution",
]

# fixed-step RK4 resolution for the omega > 0 Schroedinger flow, as a
# fraction of the horizon tau
_RK4_STEP_FRACTION = 1e-4


@dataclass(frozen=True)
class PhysicalParams:
    """Mass, trap frequency, hbar and measurement horizon.

    ``omega = 0`` means a free particle.  ``hbar`` is explicit so that both
    SI-style and dimensionless runs share one code path.
    """

    m: float
    omega: float = 0.0
    hbar: float = 1.0
    tau: float = 1.0

    def __post_init__(self):
        if self.m <= 0:
            raise ValidationError(f"mass must be positive, got {self.m}")
        if self.omega < 0:
            raise ValidationError(f"omega must be >= 0, got {self.omega}")
        if self.hbar <= 0:
            raise ValidationError(f"hbar must be positive, got {self.hbar}")
        if self.tau <= 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")


def dimensionless_params(omega_tau: float = 0.0) -> PhysicalParams:
    """Params whose scaling matrix is the identity (hbar=2, m=1, tau=1).

    In these units the state-space model reduces to the dimensionless one
    (unit process-noise vector), the sensitivity map is the identity, and
    estimator variances come out in units of hbar*m/tau^3 / 2.
    """
    return PhysicalParams(m=1.0, omega=omega_tau, hbar=2.0, tau=1.0)


@dataclass(frozen=True)
class GaussianState:
    """Pure Gaussian wavefunction, complex mean + complex variance."""

    x_tilde: complex
    sigma_tilde: complex

    def __post_init__(self):
        sr = complex(self.sigma_tilde).real
        if not sr > 0:
            raise InvalidStateError(
                f"Re(sigma_tilde) must be positive for a normalizable state, got {sr}"
            )


@dataclass(frozen=True)
class Moments:
    """Physical moments of a Gaussian state.

    ``cov`` is the symmetric cross moment ``<Dx Dp + Dp Dx>/2``.
    """

    x_bar: float
    p_bar: float
    var_x: float
    var_p: float
    cov: float

    def purity_defect(self, hbar: float) -> float:
        """Relative deviation of var_x*var_p - cov^2 from (hbar/2)^2."""
        target = 0.25 * hbar * hbar
        return (self.var_x * self.var_p - self.cov**2 - target) / target


def derived_moments(state: GaussianState, params: PhysicalParams) -> Moments:
    """Physical moments of the complex-parameterized state."""
    s = complex(state.sigma_tilde)
    x = complex(state.x_tilde)
    sr, si = s.real, s.imag
    if not sr > 0:
        raise InvalidStateError("Re(sigma_tilde) must be positive")
    hbar = params.hbar
    return Moments(
        x_bar=x.real + (si / sr) * x.imag,
        p_bar=hbar * x.imag / sr,
        var_x=abs(s) ** 2 / (2.0 * sr),
        var_p=hbar**2 / (2.0 * sr),
        cov=hbar * si / (2.0 * sr),
    )


def state_from_moments(
    x_bar: float, p_bar: float, sigma_tilde: complex, hbar: float
) -> GaussianState:
    """Inverse of :func:`derived_moments` for a given complex variance."""
    s = complex(sigma_tilde)
    xi = p_bar * s.real / hbar
    xr = x_bar - s.imag * p_bar / hbar
    return GaussianState(x_tilde=complex(xr, xi), sigma_tilde=s)


def _schroedinger_rhs(sigma, x, params: PhysicalParams, theta: float):
    hbar, m, w = params.hbar, params.m, params.omega
    dsigma = (1j * hbar / m) * (1.0 - (m * w / hbar) ** 2 * sigma * sigma)
    dx = (sigma / (1j * hbar)) * (m * w * w * x - theta)
    return dsigma, dx


def evolve_unmeasured(
    state: GaussianState, params: PhysicalParams, theta: float, dt: float
) -> GaussianState:
    """Schroedinger evolution over ``dt`` with no measurement.

    For the free particle the flow is integrated in closed form,
    ``sigma(t+dt) = sigma + i hbar dt / m``.  For ``omega > 0`` a fixed-step
    RK4 integration of the complex flow is used (step <= 1e-4 tau).
    """
    if dt < 0:
        raise ValidationError("dt must be >= 0")
    if dt == 0:
        return state
    sigma = complex(state.sigma_tilde)
    x = complex(state.x_tilde)
    hbar, m = params.hbar, params.m
    if params.omega == 0.0:
        x = x - theta * (sigma * dt / (1j * hbar) + dt * dt / (2.0 * m))
        sigma = sigma + 1j * hbar * dt / m
        return GaussianState(x_tilde=x, sigma_tilde=sigma)
    nsub = max(1, math.ceil(dt / (_RK4_STEP_FRACTION * params.tau)))
    h = dt / nsub
    for _ in range(nsub):
        ds1, dx1 = _schroedinger_rhs(sigma, x, params, theta)
        ds2, dx2 = _schroedinger_rhs(sigma + 0.5 * h * ds1, x + 0.5 * h * dx1, params, theta)
        ds3, dx3 = _schroedinger_rhs(sigma + 0.5 * h * ds2, x + 0.5 * h * dx2, params, theta)
        ds4, dx4 = _schroedinger_rhs(sigma + h * ds3, x + h * dx3, params, theta)
        sigma = sigma + (h / 6.0) * (ds1 + 2 * ds2 + 2 * ds3 + ds4)
        x = x + (h / 6.0) * (dx1 + 2 * dx2 + 2 * dx3 + dx4)
    return GaussianState(x_tilde=x, sigma_tilde=sigma)


def weak_measurement_update(
    state: GaussianState, xi: float, D: float
) -> GaussianState:
    """Condition the state on a weak position measurement with result ``xi``.

    The measurement POVM is Gaussian with variance ``D``; the update is

        1/sigma' = 1/sigma + 1/D,   x' = (sigma xi + D x) / (sigma + D)

    so ``Re(1/sigma)`` strictly increases (the packet contracts).
    """
    if not D > 0:
        raise InvalidMeasurementError(f"measurement variance D must be positive, got {D}")
    sigma = complex(state.sigma_tilde)
    x = complex(state.x_tilde)
    denom = sigma + D
    return GaussianState(
        x_tilde=(sigma * xi + D * x) / denom,
        sigma_tilde=sigma * D / denom,
    )


def sde_step(
    state: GaussianState,
    params: PhysicalParams,
    k: float,
    theta: float,
    dt: float,
    dW: float,
) -> tuple[GaussianState, float]:
    """One Euler-Maruyama step of the conditioned flow; returns the record increment.

    Emits ``dxi = x_bar dt + dW / sqrt(2k)`` and updates the means with

        dx_bar = (p_bar/m) dt + v_x dW
        dp_bar = (theta - m w^2 x_bar) dt + v_p dW
        v_x = sqrt(k/2) |sigma|^2 / sigma_r,   v_p = sqrt(k/2) hbar sigma_i / sigma_r

    The complex variance advances deterministically by the exact constant-k
    solution over ``dt``, so purity is preserved exactly.
    """
    if not k > 0:
        raise InvalidSensitivityError(f"sensitivity k must be positive, got {k}")
    if not dt > 0:
        raise ValidationError("dt must be positive")
    mom = derived_moments(state, params)
    sigma = complex(state.sigma_tilde)
    sr, si = sigma.real, sigma.imag
    hbar, m, w = params.hbar, params.m, params.omega
    amp = math.sqrt(0.5 * k)
    v_x = amp * (sr * sr + si * si) / sr
    v_p = amp * hbar * si / sr
    dxi = mom.x_bar * dt + dW / math.sqrt(2.0 * k)
    x_bar = mom.x_bar + (mom.p_bar / m) * dt + v_x * dW
    p_bar = mom.p_bar + (theta - m * w * w * mom.x_bar) * dt + v_p * dW
    sigma_new = sigma_solution(params, k, sigma, dt)
    return state_from_moments(x_bar, p_bar, sigma_new, hbar), dxi


def steady_state_sigma(params: PhysicalParams, k: float) -> complex:
    """Steady state of the variance flow under constant sensitivity.

    ``sigma_inf = (hbar/m) / Omega`` with ``Omega = sqrt(w^2 - i hbar k / m)``,
    branch chosen so Re(sigma_inf) > 0.
    """
    if not k > 0:
        raise InvalidSensitivityError(f"sensitivity k must be positive, got {k}")
    omega_c = cmath.sqrt(params.omega**2 - 1j * params.hbar * k / params.m)
    sigma = (params.hbar / params.m) / omega_c
    if sigma.real < 0:  # principal branch already satisfies this; keep the guard
        sigma = -sigma
    return sigma


def sigma_solution(
    params: PhysicalParams, k: float, sigma0: complex, t: float
) -> complex:
    """Exact solution of the variance flow at constant sensitivity.

    Written in the overflow-safe form (|e^{-2i Omega t}| < 1 decays)::

        sigma(t) = sigma_inf * (A - B w) / (A + B w),   w = exp(-2i Omega t)
        A = sigma_inf + sigma0,  B = sigma_inf - sigma0

    The removable singularity at ``sigma0 == sigma_inf`` returns
    ``sigma_inf`` directly.
    """
    if not k > 0:
        raise InvalidSensitivityError(f"sensitivity k must be positive, got {k}")
    if t < 0:
        raise ValidationError("t must be >= 0")
    s0 = complex(sigma0)
    sinf = steady_state_sigma(params, k)
    if s0 == sinf or t == 0:
        return sinf if s0 == sinf else s0
    omega_c = cmath.sqrt(params.omega**2 - 1j * params.hbar * k / params.m)
    w = cmath.exp(-2j * omega_c * t)
    a = sinf + s0
    b = sinf - s0
    return sinf * (a - b * w) / (a + b * w)
