"""Generalized Pareto tail math.

CDF, quantile, log-likelihood and maximum-likelihood fitting for the GPD,
plus the peaks-over-threshold split and the probability bookkeeping used
when sampling from a distribution that has been shifted ``k`` times by a
factor ``c``.

Everything here runs in float64 regardless of the model precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

__all__ = [
    "EvtError",
    "DomainError",
    "InvalidRequestError",
    "TooFewSamplesError",
    "DegenerateInputError",
    "EmptyInputError",
    "GpdParams",
    "TailRequest",
    "gpd_cdf",
    "gpd_quantile",
    "gpd_log_likelihood",
    "fit_gpd",
    "select_threshold",
    "adjust_probability",
    "extremeness_level",
    "XI_BOUNDS",
    "MIN_FIT_SAMPLES",
]

XI_BOUNDS = (-0.5, 2.0)
MIN_FIT_SAMPLES = 30
# below this |xi| the power-law forms lose all precision (sigma/xi overflows);
# the exponential branch is exact to far better than double precision there
_TINY_XI = 1e-250


class EvtError(ValueError):
    """Base class for tail-model errors."""


class DomainError(EvtError):
    """Argument outside the support of the distribution."""


class InvalidRequestError(EvtError):
    """Requested probability does not lie inside the shifted tail."""


class TooFewSamplesError(EvtError):
    pass


class DegenerateInputError(EvtError):
    pass


class EmptyInputError(EvtError):
    pass


@dataclass(frozen=True)
class GpdParams:
    """Fitted GPD scale/shape anchored at ``offset_u``.

    ``xi == 0.0`` selects the exponential branch exactly.
    """

    sigma: float
    xi: float
    offset_u: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise DomainError(f"sigma must be positive and finite, got {self.sigma}")
        if not math.isfinite(self.xi):
            raise DomainError(f"xi must be finite, got {self.xi}")
        if not math.isfinite(self.offset_u):
            raise DomainError(f"offset_u must be finite, got {self.offset_u}")

    @property
    def upper_endpoint(self) -> float:
        """Right end of the excess support (inf unless xi < 0)."""
        return -self.sigma / self.xi if self.xi < 0 else math.inf

    def to_dict(self) -> dict:
        return {"sigma": float(self.sigma), "xi": float(self.xi), "offset_u": float(self.offset_u)}

    @classmethod
    def from_dict(cls, d: dict) -> "GpdParams":
        return cls(sigma=float(d["sigma"]), xi=float(d["xi"]), offset_u=float(d.get("offset_u", 0.0)))

    def with_offset(self, offset_u: float) -> "GpdParams":
        return GpdParams(self.sigma, self.xi, float(offset_u))


@dataclass(frozen=True)
class TailRequest:
    tau: float
    c: float
    k: int

    @property
    def tau_prime(self) -> float:
        return adjust_probability(self.tau, self.c, self.k)


def _as_float_array(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    return arr, arr.ndim == 0


def gpd_cdf(x, params: GpdParams):
    """GPD CDF of the excess ``x`` (``offset_u`` is ignored).

    Raises:
        DomainError: ``x < 0`` or ``x`` at/above the upper endpoint when xi < 0.
    """
    arr, scalar = _as_float_array(x)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0):
        raise DomainError("gpd_cdf requires finite x >= 0")
    sigma, xi = params.sigma, params.xi
    if abs(xi) < _TINY_XI:
        out = -np.expm1(-arr / sigma)
    else:
        if xi < 0 and np.any(arr >= -sigma / xi):
            raise DomainError(f"x outside support [0, {-sigma / xi}) for xi={xi}")
        # 1 - (1 + xi x / sigma)^(-1/xi), written to stay accurate as xi -> 0
        out = -np.expm1(-np.log1p(xi * arr / sigma) / xi)
    return float(out) if scalar else out


def gpd_quantile(p, params: GpdParams):
    """Inverse of :func:`gpd_cdf` on ``[0, 1)``."""
    arr, scalar = _as_float_array(p)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr >= 1):
        raise DomainError("gpd_quantile requires 0 <= p < 1")
    sigma, xi = params.sigma, params.xi
    tail = np.log1p(-arr)
    if abs(xi) < _TINY_XI:
        out = -sigma * tail
    else:
        out = sigma / xi * np.expm1(-xi * tail)
    return float(out) if scalar else out


def gpd_log_likelihood(excesses, params: GpdParams) -> float:
    """Sum of GPD log-densities; ``-inf`` if any excess is outside the support.

    Raises:
        EmptyInputError: no excesses given.
    """
    x = np.asarray(excesses, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptyInputError("log-likelihood of an empty sample")
    if np.any(x < 0) or np.any(~np.isfinite(x)):
        return -math.inf
    sigma, xi = params.sigma, params.xi
    n = x.size
    if abs(xi) < _TINY_XI:
        return float(-n * math.log(sigma) - x.sum() / sigma)
    z = xi * x / sigma
    if np.any(z <= -1):
        return -math.inf
    return float(-n * math.log(sigma) - (1.0 + 1.0 / xi) * np.log1p(z).sum())


# --- maximum likelihood -------------------------------------------------------
#
# Profile likelihood in theta = xi / sigma. For fixed theta the shape has the
# closed form xi(theta) = mean(log1p(theta * x)), sigma = xi / theta, and the
# profile is  -n * (log(xi/theta) + xi + 1).  xi(theta) is increasing in theta,
# so the xi bounds map onto a theta interval.


def _xi_of_theta(theta: float, x: np.ndarray) -> float:
    return float(np.log1p(theta * x).mean())


def _profile(theta: float, x: np.ndarray) -> float:
    n = x.size
    if theta == 0.0:
        m = float(x.mean())
        return -n * (math.log(m) + 1.0)
    xi = _xi_of_theta(theta, x)
    ratio = xi / theta
    if not ratio > 0:
        return -math.inf
    return -n * (math.log(ratio) + xi + 1.0)


def _params_of_theta(theta: float, x: np.ndarray) -> GpdParams:
    if theta == 0.0:
        return GpdParams(float(x.mean()), 0.0)
    xi = _xi_of_theta(theta, x)
    return GpdParams(xi / theta, xi)


def _theta_bounds(x: np.ndarray, xi_lo: float, xi_hi: float) -> tuple[float, float]:
    x_max = float(x.max())
    edge = -1.0 / x_max
    # xi(theta) diverges only logarithmically at the support edge; when it stays
    # above xi_lo the edge itself is the bound.
    near_edge = edge * (1.0 - 1e-12)
    if _xi_of_theta(near_edge, x) >= xi_lo:
        lo = near_edge
    else:
        lo = optimize.brentq(lambda t: _xi_of_theta(t, x) - xi_lo, near_edge, 0.0, xtol=1e-300, rtol=1e-14)
    hi_br = 1.0 / x_max
    while _xi_of_theta(hi_br, x) < xi_hi:
        hi_br *= 4.0
    hi = optimize.brentq(lambda t: _xi_of_theta(t, x) - xi_hi, 0.0, hi_br, xtol=1e-300, rtol=1e-14)
    return lo, hi


def _theta_grid(lo: float, hi: float, n_side: int = 40) -> np.ndarray:
    neg = lo * np.geomspace(1.0, 1e-6, n_side)
    pos = hi * np.geomspace(1e-6, 1.0, n_side)
    return np.concatenate([neg, [0.0], pos])


def fit_gpd(excesses, min_samples: int = MIN_FIT_SAMPLES, xi_bounds: tuple[float, float] = XI_BOUNDS) -> GpdParams:
    """Maximum-likelihood GPD fit to nonnegative excesses.

    A coarse grid over the profile parameter brackets the maximum, which is
    then polished by bounded Brent. If the polish lands on a bracket edge the
    grid point is kept when it scores higher.

    Raises:
        TooFewSamplesError: fewer than ``min_samples`` values.
        DegenerateInputError: all excesses equal.
    """
    x = np.asarray(excesses, dtype=np.float64).ravel()
    if x.size < min_samples:
        raise TooFewSamplesError(f"need at least {min_samples} excesses, got {x.size}")
    if np.any(~np.isfinite(x)) or np.any(x < 0):
        raise DomainError("excesses must be finite and nonnegative")
    if float(x.max()) == float(x.min()):
        raise DegenerateInputError("all excesses are equal; nothing to fit")

    lo, hi = _theta_bounds(x, *xi_bounds)
    grid = _theta_grid(lo, hi)
    scores = np.array([_profile(t, x) for t in grid])
    best = int(np.argmax(scores))
    a = grid[max(best - 1, 0)]
    b = grid[min(best + 1, grid.size - 1)]
    theta, score = grid[best], scores[best]
    if b > a:
        res = optimize.minimize_scalar(
            lambda t: -_profile(t, x), bounds=(a, b), method="bounded",
            options={"xatol": 1e-12 * max(abs(a), abs(b))},
        )
        if np.isfinite(res.fun) and -res.fun >= score:
            theta = float(res.x)
    return _params_of_theta(theta, x)


# --- thresholds and probability bookkeeping ------------------------------------


def select_threshold(values, q: float = 0.95) -> tuple[float, np.ndarray]:
    """Empirical ``q``-quantile threshold and the excesses strictly above it.

    The quantile uses linear interpolation between order statistics
    (Hyndman-Fan type 7, numpy's default). Excesses keep input order.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyInputError("cannot select a threshold from no values")
    if not 0.0 <= q <= 1.0:
        raise DomainError(f"q must be in [0, 1], got {q}")
    u = float(np.quantile(v, q, method="linear"))
    return u, v[v > u] - u


def adjust_probability(tau: float, c: float, k: int) -> float:
    """Exceedance probability inside the ``k``-times shifted distribution."""
    if not 0.0 < tau < 1.0:
        raise InvalidRequestError(f"tau must be in (0, 1), got {tau}")
    if not 0.0 < c < 1.0:
        raise InvalidRequestError(f"c must be in (0, 1), got {c}")
    if int(k) != k or k < 0:
        raise InvalidRequestError(f"k must be a nonnegative integer, got {k}")
    tau_prime = tau / c ** int(k)
    if tau_prime > 1.0:
        raise InvalidRequestError(
            f"tau={tau} is below the shifted tail: tau / c^k = {tau_prime:.6g} > 1"
        )
    return tau_prime


def extremeness_level(params: GpdParams, tau_prime: float) -> float:
    """Extremeness value exceeded with probability ``tau_prime`` under ``params``."""
    if not 0.0 < tau_prime <= 1.0:
        raise DomainError(f"tau_prime must be in (0, 1], got {tau_prime}")
    return params.offset_u + gpd_quantile(1.0 - tau_prime, params)
