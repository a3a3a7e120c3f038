"""Closed-form and quadrature estimation variances; standard quantum limits.

Unit convention: every estimator variance returned by this module is
expressed in units of ``hbar * m / tau**3``, so the free-particle von
Neumann standard quantum limit is exactly 4.  Multiply by
``hbar * m / tau**3`` (see :func:`SqlResult.sigma_physical_for`) to recover
physical force-squared units.  Sensitivities are dimensionless,
``k = k_phys * hbar * tau**2 / (2 m)``.

Free-particle constant-force closed forms (all variances diverge at k -> 0
and grow like k/2 at large k; minima in the docstrings):

- steady-state preparation:     min 12.38649 at k = 3.03292
- well-defined-momentum prep:   min  7.99184 at k = 2.83335
- + terminal projective meas.:  min  3.03534 at k = 1.23716

The scheduled optimum (time-varying k) reaches 3.0; see
:mod:`forcemeter.scheduling`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .gaussian import PhysicalParams

__all__ = [
    "SqlResult",
    "minimize_scalar",
    "autocorrelation_coeffs",
    "autocorrelation_g",
    "variance_integral",
    "chi",
    "sql_von_neumann",
    "sigma_free_constant_steady",
    "sigma_free_constant_optimal_init",
    "sigma_free_constant_projective_end",
    "sql_free_particle",
    "sql_oscillator",
    "sql_table",
]

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class SqlResult:
    """A standard-quantum-limit value with its regime and optimal sensitivity.

    ``sigma`` is in units of hbar*m/tau^3; ``optimal_k`` is the dimensionless
    sensitivity (None when the regime only prescribes a range).
    """

    regime: str
    sigma: float
    optimal_k: float | None = None
    validity_flags: tuple[str, ...] = ()
    notes: str = ""

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive")

    def sigma_physical_for(self, params: PhysicalParams) -> float:
        return self.sigma * params.hbar * params.m / params.tau**3


def minimize_scalar(fn, bracket, tol: float = 1e-8, max_iter: int = 200):
    """Golden-section minimum of a unimodal function on [a, b].

    Returns (argmin, min).  ``tol`` is relative on the argument.  Points where
    ``fn`` is non-finite are treated as +inf (excluded from the bracket).
    """
    a, b = float(bracket[0]), float(bracket[1])
    if not a < b:
        raise ValidationError("bracket must satisfy a < b")

    def safe(x):
        v = fn(x)
        return v if math.isfinite(v) else math.inf

    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = safe(c), safe(d)
    for _ in range(max_iter):
        if abs(b - a) <= tol * (abs(a) + abs(b)) / 2.0 + 1e-300:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = safe(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = safe(d)
    x = 0.5 * (a + b)
    fx = safe(x)
    if not math.isfinite(fx):
        raise NumericalError("golden-section search failed to find a finite minimum")
    return x, fx


def autocorrelation_coeffs(omega_tau: float, k: float) -> tuple[float, float]:
    """Damping a and oscillation b of the steady-state response kernel.

    Free particle: a = b = sqrt(k).  General:
    a, b = omega_tau * sqrt((-+1 + sqrt(1 + (2k)^2/(omega_tau)^4)) / 2)
    (minus sign for a, plus for b).
    """
    if not k > 0:
        raise ValidationError("k must be positive")
    if omega_tau < 0:
        raise ValidationError("omega_tau must be >= 0")
    if omega_tau == 0.0:
        r = math.sqrt(k)
        return r, r
    root = math.sqrt(1.0 + (2.0 * k) ** 2 / omega_tau**4)
    a = omega_tau * math.sqrt(0.5 * (-1.0 + root))
    b = omega_tau * math.sqrt(0.5 * (1.0 + root))
    return a, b


def autocorrelation_g(omega_tau: float, k: float, s) -> np.ndarray | float:
    """Steady-state response g(s) = exp(-a s) sin(b s) / b of the filtered mean.

    g(0) = 0 and g'(0) = 1; this is the impulse response (unit momentum kick
    to position) of the steady-state estimator error dynamics.
    """
    a, b = autocorrelation_coeffs(omega_tau, k)
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < 0):
        raise ValidationError("time lag s must be >= 0")
    out = np.exp(-a * s_arr) * np.sin(b * s_arr) / b
    return float(out) if np.isscalar(s) or out.ndim == 0 else out


def variance_integral(
    k: float,
    f,
    n: int = 2000,
    omega_tau: float = 0.0,
    richardson_check: bool = False,
) -> float:
    """Estimator variance for shape f under constant k via the double quadrature

        1/sigma = 2k * int_0^1 dt ( int_0^t g(t - t') f(t') dt' )^2

    in steady-state conditions, evaluated with nested trapezoids on an
    (n+1)-point grid (inner convolution via FFT).  Returns sigma in units of
    hbar*m/tau^3 (half the raw dimensionless double integral's reciprocal).

    ``f`` may be a ForceBasis, a callable on [0, 1], or an array of n+1
    samples.  With ``richardson_check`` the grid is halved and a warning-level
    NumericalError is raised if the two estimates differ by more than 1%.
    """
    if n < 16:
        raise ValidationError("quadrature grid too coarse (n >= 16)")

    def evaluate(n_pts: int) -> float:
        t = np.linspace(0.0, 1.0, n_pts + 1)
        dt = 1.0 / n_pts
        f_vals = np.asarray(f(t), dtype=float) if callable(f) else np.asarray(f, dtype=float)
        if f_vals.shape != t.shape:
            if callable(f):
                raise ValidationError("force shape must produce one sample per grid point")
            # array input is tied to the caller's grid; no resampling
            raise ValidationError(f"expected {n_pts + 1} samples, got {f_vals.size}")
        g = autocorrelation_g(omega_tau, k, t)
        m = 1
        while m < 2 * (n_pts + 1):
            m *= 2
        conv = np.fft.irfft(np.fft.rfft(g, m) * np.fft.rfft(f_vals, m), m)[: n_pts + 1]
        # trapezoid endpoint weights; g(0) = 0 so only the t'=0 edge matters
        h = dt * (conv - 0.5 * g * f_vals[0])
        h2 = h * h
        inner = dt * (h2.sum() - 0.5 * h2[0] - 0.5 * h2[-1])
        inv_sigma = 2.0 * k * inner
        if inv_sigma <= 0:
            return math.inf
        return 0.5 / inv_sigma  # hbar*m/tau^3 units

    sigma = evaluate(n)
    if richardson_check and callable(f):
        sigma2 = evaluate(2 * n)
        if math.isfinite(sigma) and abs(sigma2 - sigma) > 0.01 * abs(sigma):
            raise NumericalError(
                f"quadrature not converged: {sigma:.6g} vs {sigma2:.6g} at doubled grid"
            )
        sigma = sigma2
    return sigma


def chi(x: float) -> float:
    """Spectral overlap factor chi(x) = (1-x^2)^(1/4) sqrt((1+sqrt(1+x^2))/(2(1+x^2))).

    Decreases from chi(0) = 1 to 0 as x -> 1; the argument is
    (2k/w^2) / sqrt(1 + (2k/w^2)^2) with w = omega*tau.
    """
    if not 0.0 <= x < 1.0:
        raise ValidationError(f"chi requires 0 <= x < 1, got {x}")
    return (1.0 - x * x) ** 0.25 * math.sqrt(
        (1.0 + math.sqrt(1.0 + x * x)) / (2.0 * (1.0 + x * x))
    )


def sql_von_neumann(params: PhysicalParams) -> SqlResult:
    """Prepare-and-project limit for a free particle: sigma = 4 hbar m / tau^3.

    The optimal preparation has sigma_tilde(0) = hbar * tau / m (recorded in
    the notes); any other Gaussian initial condition does worse.
    """
    if params.omega != 0.0:
        raise ValidationError("the von Neumann SQL here is the free-particle limit")
    return SqlResult(
        regime="von-neumann",
        sigma=4.0,
        optimal_k=None,
        notes=f"optimal preparation sigma_tilde(0) = {params.hbar * params.tau / params.m}",
    )


def _sql_pieces(k: float):
    s = math.sqrt(k)
    return (
        s,
        math.sinh(2 * s) + math.sin(2 * s),
        math.cosh(2 * s) + math.cos(2 * s),
        math.cosh(2 * s) - math.cos(2 * s),
    )


def sigma_free_constant_steady(k: float) -> float:
    """Constant force on a free particle, steady-state preparation.

    sigma(k) = 4 k^{3/2} / (4 sqrt(k) - 5 + 8 e^{-sqrt k} cos sqrt k
               - e^{-2 sqrt k} (2 + cos 2 sqrt k + sin 2 sqrt k))

    in hbar*m/tau^3 units.  Minimum 12.38649 (3.097x the von Neumann SQL) at
    k = 3.03292.  Returns inf where the denominator underflows to <= 0
    (infinite-variance signal at very small k).
    """
    if not k > 0:
        raise ValidationError("k must be positive")
    x = math.sqrt(k)
    den = (
        4.0 * x
        - 5.0
        + 8.0 * math.exp(-x) * math.cos(x)
        - math.exp(-2.0 * x) * (2.0 + math.cos(2.0 * x) + math.sin(2.0 * x))
    )
    if den <= 0:
        return math.inf
    return 4.0 * k**1.5 / den


def sigma_free_constant_optimal_init(k: float) -> float:
    """Constant force, free particle, well-defined-momentum initial state.

    sigma(k) = k^{3/2} S / (sqrt(k) S - c),  S = sinh 2 sqrt k + sin 2 sqrt k,
    c = cosh 2 sqrt k - cos 2 sqrt k, in hbar*m/tau^3 units.  Exact solution
    of the Riccati flow in the limit var_p(0) -> 0, var_x(0) -> inf.
    Minimum 7.99184 (very nearly 2x the von Neumann SQL) at k = 2.83335.
    """
    if not k > 0:
        raise ValidationError("k must be positive")
    s, S, _, c = _sql_pieces(k)
    den = s * S - c
    if den <= 0:
        return math.inf
    return k**1.5 * S / den


def sigma_free_constant_projective_end(k: float) -> float:
    """As optimal_init plus an ideal projective position measurement at tau.

    sigma(k) = 2 k^{3/2} C / (2 sqrt(k) C - S),  C = cosh 2 sqrt k + cos 2 sqrt k,
    in hbar*m/tau^3 units; equals P33(1) - P31(1)^2/P11(1) of the Riccati flow.
    Minimum 3.03534 (0.7588x the von Neumann SQL) at k = 1.23716.
    """
    if not k > 0:
        raise ValidationError("k must be positive")
    s, S, C, _ = _sql_pieces(k)
    den = 2.0 * s * C - S
    if den <= 0:
        return math.inf
    return 2.0 * k**1.5 * C / den


_FREE_PARTICLE_FORMS = {
    "steady-state": (sigma_free_constant_steady, (0.5, 20.0)),
    "optimal-init": (sigma_free_constant_optimal_init, (0.5, 20.0)),
    "projective-end": (sigma_free_constant_projective_end, (0.2, 12.0)),
}


def sql_free_particle(regime: str) -> SqlResult:
    """Minimized constant-force limit for a free particle in the given regime."""
    if regime == "von-neumann":
        return SqlResult(regime=regime, sigma=4.0)
    if regime not in _FREE_PARTICLE_FORMS:
        raise ValidationError(f"unknown free-particle regime {regime!r}")
    fn, bracket = _FREE_PARTICLE_FORMS[regime]
    k_opt, sigma = minimize_scalar(fn, bracket)
    return SqlResult(regime=regime, sigma=sigma, optimal_k=k_opt)


def _oscillator_flags(omega_tau: float, k: float) -> tuple[str, ...]:
    flags = []
    if not omega_tau > 10.0:
        flags.append("omega_tau<=10")
    if not k / omega_tau > 10.0:
        flags.append("k/(omega_tau)<=10")
    return tuple(flags)


def sql_oscillator(
    omega_tau: float,
    regime: str,
    k: float | None = None,
    signal_spectrum_sq: float = 1.0,
) -> SqlResult:
    """Oscillator limits in the paper's asymptotic regimes (omega*tau >> 1).

    ``constant-force``: sigma(k) = w^2 (1 + q^2) / (2 q) with w = omega*tau
    and q = 2k/w^2, minimized to sigma = w^2 at 2k = w^2 (physical
    m hbar omega^2 / tau).

    ``resonant-flat-spectrum``: sigma = 2 w / (|F(b)|^2 chi), optimal for
    sensitivities w << k << w^2 where chi -> 1 (physical
    2 hbar m omega / (|F(b)|^2 tau^2)).  ``signal_spectrum_sq`` is |F(b)|^2
    in the documented windowed-transform convention
    F(nu) = int_0^1 f(t) exp(-i nu t) dt.

    Validity flags mirror the asymptotic conditions; they are reported, not
    enforced.
    """
    if omega_tau <= 0:
        raise ValidationError("oscillator regimes need omega_tau > 0")
    w = omega_tau
    if regime == "constant-force":
        k_opt = 0.5 * w * w
        k_eval = k_opt if k is None else k
        q = 2.0 * k_eval / (w * w)
        sigma = w * w * (1.0 + q * q) / (2.0 * q)
        return SqlResult(
            regime=regime,
            sigma=sigma,
            optimal_k=k_opt,
            validity_flags=_oscillator_flags(w, k_eval),
            notes="optimum 2k = (omega*tau)^2; sigma_phys = m hbar omega^2 / tau",
        )
    if regime == "resonant-flat-spectrum":
        # any k with w << k << w^2 approaches the bound; report the geometric mean
        k_opt = w**1.5
        k_eval = k_opt if k is None else k
        q = 2.0 * k_eval / (w * w)
        x = q / math.sqrt(1.0 + q * q)
        sigma = 2.0 * w / (signal_spectrum_sq * chi(x))
        flags = list(_oscillator_flags(w, k_eval))
        if not q < 0.1:
            flags.append("2k/(omega_tau)^2>=0.1")
        return SqlResult(
            regime=regime,
            sigma=sigma,
            optimal_k=k_eval if k is not None else k_opt,
            validity_flags=tuple(flags),
            notes="requires omega_tau << k << (omega_tau)^2; sigma_phys = 2 hbar m omega / (|F|^2 tau^2)",
        )
    raise ValidationError(f"unknown oscillator regime {regime!r}")


def sql_table(
    params: PhysicalParams,
    oscillator_omega_tau=(),
    scheduled: SqlResult | None = None,
) -> list[dict]:
    """Rows for the sql-table output: every regime with dimensionless and physical values."""
    rows = []

    def add(result: SqlResult, omega_tau: float = 0.0):
        rows.append(
            {
                "regime": result.regime,
                "omega_tau": omega_tau,
                "k_opt": "" if result.optimal_k is None else result.optimal_k,
                "sigma_dimensionless": result.sigma,
                "sigma_physical": result.sigma_physical_for(params),
                "validity_flags": ";".join(result.validity_flags),
            }
        )

    add(sql_von_neumann(PhysicalParams(m=params.m, omega=0.0, hbar=params.hbar, tau=params.tau)))
    for regime in ("steady-state", "optimal-init", "projective-end"):
        add(sql_free_particle(regime))
    if scheduled is not None:
        add(scheduled)
    for w in oscillator_omega_tau:
        add(sql_oscillator(w, "resonant-flat-spectrum"), omega_tau=w)
        add(sql_oscillator(w, "constant-force"), omega_tau=w)
    return rows
