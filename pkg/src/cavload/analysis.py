"""Fits behind the derived quantities: trapping time, temperature, TOF.

Uncertainties are absolute: the supplied sigmas are taken as the true
standard deviations and the covariance is not rescaled by the reduced
chi-square.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .constants import KB, RB87_MASS
from .errors import (DegenerateDataError, FitError, InitializationError,
                     NonphysicalDataError)
from .optics import CavityParams, TrapBeam, trap_depth

LM_LAMBDA0 = 1e-3
LM_MAX_ITER = 200
LM_RTOL = 1e-8


@dataclass
class FitResult:
    names: tuple
    values: np.ndarray
    covariance: np.ndarray
    residual_norm: float
    converged: bool
    iterations: int
    extras: dict = field(default_factory=dict)

    def _index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(name) from None

    def value(self, name):
        if name in self.names:
            return float(self.values[self._index(name)])
        return self.extras[name]

    def error(self, name):
        if name in self.names:
            i = self._index(name)
            return float(math.sqrt(max(self.covariance[i, i], 0.0)))
        return self.extras["sigma_" + name]

    @property
    def params(self) -> dict:
        return {n: float(v) for n, v in zip(self.names, self.values)}

    @property
    def uncertainties(self) -> dict:
        return {n: self.error(n) for n in self.names}

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, (np.floating, np.integer, np.bool_)):
                v = v.item()
            if isinstance(v, float) and not math.isfinite(v):
                return str(v)
            return v
        return {
            "parameters": {n: clean(float(v)) for n, v in zip(self.names, self.values)},
            "uncertainties": {n: clean(self.error(n)) for n in self.names},
            "covariance": [[clean(float(c)) for c in row] for row in self.covariance],
            "residual_norm": clean(float(self.residual_norm)),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "extras": {k: clean(v) for k, v in self.extras.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _points(t, n, sigma):
    t = np.asarray(t, float)
    n = np.asarray(n, float)
    sigma = np.ones_like(n) if sigma is None else np.broadcast_to(np.asarray(sigma, float), n.shape)
    if t.shape != n.shape or t.ndim != 1:
        raise ValueError("t and n must be 1-d arrays of equal length")
    if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
        raise ValueError("sigmas must be positive and finite")
    return t, n, np.asarray(sigma, float)


def fit_exponential(t, n, sigma=None, max_iter: int = LM_MAX_ITER) -> FitResult:
    """Weighted Levenberg-Marquardt fit of n(t) = amplitude * exp(-t / tau).

    The iteration runs on the decay rate 1/tau (well defined even for a
    flat curve) and starts from a weighted straight-line fit of log n.
    """
    t, n, s = _points(t, n, sigma)
    if len(t) < 2:
        raise ValueError("need at least two points")
    if np.any(n <= 0):
        raise InitializationError("log-linear initialization needs all n > 0")
    if np.ptp(t) == 0:
        raise DegenerateDataError("all sample times identical")
    w_log = (n / s) ** 2
    line = fit_linear_weighted(t, np.log(n), 1.0 / np.sqrt(w_log))
    p = np.array([math.exp(line.value("intercept")), -line.value("slope")])
    w = 1.0 / s ** 2

    def resid(q):
        return (n - q[0] * np.exp(-q[1] * t)) / s

    def jac(q):
        e = np.exp(-q[1] * t)
        return np.column_stack([e, -q[0] * t * e]) / s[:, None]

    r = resid(p)
    chi2 = float(r @ r)
    lam = LM_LAMBDA0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        J = jac(p)
        H = J.T @ J
        g = J.T @ r
        A = H + lam * np.diag(np.diag(H))
        try:
            step = np.linalg.solve(A, g)
        except np.linalg.LinAlgError:
            raise DegenerateDataError("singular normal equations") from None
        p_new = p + step
        r_new = resid(p_new)
        chi2_new = float(r_new @ r_new)
        rel = float(np.max(np.abs(step) / np.maximum(np.abs(p), 1e-300)))
        if chi2_new <= chi2:
            p, r, chi2 = p_new, r_new, chi2_new
            lam = max(lam / 10.0, 1e-12)
            if rel < LM_RTOL or chi2 == 0.0:
                converged = True
                break
        else:
            lam *= 10.0
            if rel < LM_RTOL or lam > 1e16:
                converged = True
                break
    J = jac(p)
    H = J.T @ J
    if not np.all(np.isfinite(H)) or np.linalg.cond(H) > 1e15:
        raise DegenerateDataError("singular normal equations at the solution")
    cov_k = np.linalg.inv(H)
    amp, k = p
    if k == 0:
        raise DegenerateDataError("decay rate is exactly zero; tau undefined")
    tau = 1.0 / k
    # covariance of (A, tau) from that of (A, k): dtau/dk = -1/k^2
    T = np.diag([1.0, -1.0 / k ** 2])
    cov = T @ cov_k @ T.T
    cov = 0.5 * (cov + cov.T)
    return FitResult(("amplitude", "tau"), np.array([amp, tau]), cov, math.sqrt(chi2),
                     converged, it, {"weights_sum": float(w.sum())})


def fit_linear_weighted(x, y, sigma=None) -> FitResult:
    """Closed-form weighted straight line y = slope * x + intercept.

    Extras: ``x_intercept`` (= -intercept/slope) with first-order error,
    ``x_intercept_unreliable`` when |slope| < sigma_slope, and the weighted
    coefficient of determination ``r_squared``.
    """
    x, y, s = _points(x, y, sigma)
    if len(x) < 2:
        raise ValueError("need at least two points")
    if np.ptp(x) == 0:
        raise DegenerateDataError("all x identical")
    w = 1.0 / s ** 2
    S, Sx, Sy = w.sum(), (w * x).sum(), (w * y).sum()
    # centered sums avoid cancellation
    xm, ym = Sx / S, Sy / S
    dx, dy = x - xm, y - ym
    Sxx = (w * dx * dx).sum()
    Sxy = (w * dx * dy).sum()
    slope = Sxy / Sxx
    intercept = ym - slope * xm
    var_a = 1.0 / Sxx
    var_b = 1.0 / S + xm * xm / Sxx
    cov_ab = -xm / Sxx
    cov = np.array([[var_a, cov_ab], [cov_ab, var_b]])
    res = y - (slope * x + intercept)
    chi2 = float((w * res * res).sum())
    ss_tot = float((w * dy * dy).sum())
    r2 = 1.0 - chi2 / ss_tot if ss_tot > 0 else 1.0
    extras = {"r_squared": r2, "chi2": chi2, "dof": len(x) - 2}
    if slope != 0:
        xi = -intercept / slope
        da, db = intercept / slope ** 2, -1.0 / slope
        var_xi = da * da * var_a + db * db * var_b + 2 * da * db * cov_ab
        extras["x_intercept"] = float(xi)
        extras["sigma_x_intercept"] = math.sqrt(max(var_xi, 0.0))
    else:
        extras["x_intercept"] = math.nan
        extras["sigma_x_intercept"] = math.nan
    extras["x_intercept_unreliable"] = bool(abs(slope) < math.sqrt(var_a))
    return FitResult(("slope", "intercept"), np.array([slope, intercept]), cov,
                     math.sqrt(chi2), True, 0, extras)


@dataclass(frozen=True)
class TemperatureEstimate:
    temperature: float
    sigma: float
    below_resolution: bool = False


def temperature_from_power_intercept(fit: FitResult, cavity: CavityParams,
                                     beam: TrapBeam) -> TemperatureEstimate:
    """Temperature at which the trap depth of the zero-trapping-time power equals k_B T.

    ``beam`` supplies wavelength and incoupling efficiency; its power is
    replaced by the power-axis intercept of ``fit``.
    """
    if not fit.converged or fit.value("slope") <= 0:
        raise FitError("need a converged line fit with positive slope")
    per_watt = trap_depth(TrapBeam(beam.wavelength, 1.0, beam.efficiency,
                                   beam.transition_wavelength, beam.linewidth), cavity) / KB
    xi = fit.value("x_intercept")
    sxi = fit.error("x_intercept")
    if xi < 0:
        return TemperatureEstimate(0.0, sxi * abs(per_watt), True)
    return TemperatureEstimate(xi * per_watt, sxi * abs(per_watt), False)


def tof_temperature(times, positions, mass: float = RB87_MASS):
    """Per-axis temperature from ballistic expansion.

    Fits sigma^2(t) = sigma0^2 + (k_B T / m) t^2 for each axis by ordinary
    least squares in t^2.  Returns (T per axis, sigma0^2 per axis).
    """
    times = np.asarray(times, float)
    if len(times) != len(positions):
        raise ValueError("one position array per time")
    if len(np.unique(times)) < 3:
        raise ValueError("need at least three distinct snapshot times")
    var = np.array([np.var(np.asarray(p, float), axis=0) for p in positions])
    t2 = times ** 2
    X = np.column_stack([np.ones_like(t2), t2])
    coef, *_ = np.linalg.lstsq(X, var, rcond=None)
    s0, slope = coef
    scale = np.maximum(np.abs(var).max(axis=0), 1e-300)
    shrink = slope * t2.max() < -1e-9 * scale
    if np.any(shrink):
        raise NonphysicalDataError("cloud variance shrinks with time on axis "
                                   f"{np.flatnonzero(shrink).tolist()}")
    return np.maximum(slope, 0.0) * mass / KB, s0
