"""Covariance functions for fBM, its Markov approximation and the fOU bridge.

All kernels are scalar; multi-dimensional processes built from the same
weights per component factorize into independent copies of these.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import integrate

from .errors import DimensionError, DomainError, UnsupportedRegimeError
from .specfun import reg_lower_gamma, stable_qexp

__all__ = [
    "FbmKind",
    "FbmSpec",
    "FouSpec",
    "BridgeObs",
    "fbm_cov",
    "mafbm_cov",
    "cross_cov",
    "fou_kernel",
    "fou_kernel_lag",
    "bridge_posterior_var",
    "type1_mvn_scale",
]

_QUAD_ABS = 1e-10
_QUAD_REL = 1e-12
_QUAD_LIMIT = 200


class FbmKind(str, Enum):
    TYPE_I = "I"
    TYPE_II = "II"

    @classmethod
    def parse(cls, value) -> "FbmKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().upper().replace("TYPE", "").replace("_", "")
        for member in cls:
            if member.value == key:
                return member
        raise DomainError(f"unknown fBM type {value!r}; expected 'I' or 'II'")


@dataclass(frozen=True)
class FbmSpec:
    """Hurst index and fBM type (I: stationary increments, II: Riemann-Liouville)."""

    hurst: float
    kind: FbmKind = FbmKind.TYPE_II

    def __post_init__(self):
        h = float(self.hurst)
        if not 0.0 < h < 1.0:
            raise DomainError(f"Hurst index must lie in (0, 1), got {self.hurst}")
        object.__setattr__(self, "hurst", h)
        object.__setattr__(self, "kind", FbmKind.parse(self.kind))

    @property
    def alpha(self) -> float:
        return self.hurst + 0.5


@dataclass(frozen=True)
class FouSpec:
    """Fractional OU prior dX = -theta X dt + dB_H."""

    base: FbmSpec
    theta: float = 0.0

    def __post_init__(self):
        th = float(self.theta)
        if not th >= 0.0 or not math.isfinite(th):
            raise DomainError(f"theta must be finite and >= 0, got {self.theta}")
        object.__setattr__(self, "theta", th)


@dataclass(frozen=True)
class BridgeObs:
    """Noise-free X(0) = 0 plus one observation of X(t_end) with std sigma_obs."""

    t_end: float
    sigma_obs: float = 0.1

    def __post_init__(self):
        if not float(self.t_end) > 0.0:
            raise DomainError(f"t_end must be positive, got {self.t_end}")
        if not float(self.sigma_obs) >= 0.0:
            raise DomainError(f"sigma_obs must be >= 0, got {self.sigma_obs}")
        object.__setattr__(self, "t_end", float(self.t_end))
        object.__setattr__(self, "sigma_obs", float(self.sigma_obs))


def _times(*ts):
    out = []
    for t in ts:
        t = float(t)
        if not t >= 0.0:
            raise DomainError(f"times must be non-negative, got {t}")
        out.append(t)
    return out


def _speeds_weights(grid, w):
    g = np.asarray(getattr(grid, "speeds", grid), dtype=float).ravel()
    om = np.asarray(getattr(w, "weights", w), dtype=float).ravel()
    if g.shape != om.shape:
        raise DimensionError(f"{om.size} weights for {g.size} speeds")
    return g, om


def _one_minus_exp_over(a, s):
    """(1 - exp(-a s)) / a elementwise, equal to s where a == 0."""
    a = np.asarray(a, dtype=float)
    safe = np.where(a > 0, a, 1.0)
    return np.where(a > 0, -np.expm1(-safe * s) / safe, s)


# ----------------------------------------------------------------- exact fBM


def fbm_cov(spec: FbmSpec, t, s) -> float:
    """Covariance E[B_H(t) B_H(s)] of exact fBM.

    Type II has no elementary closed form off the diagonal and is evaluated
    by adaptive quadrature with an algebraic endpoint weight.
    """
    t, s = _times(t, s)
    h = spec.hurst
    if spec.kind is FbmKind.TYPE_I:
        return 0.5 * (t ** (2 * h) + s ** (2 * h) - abs(t - s) ** (2 * h))
    lo, hi = min(t, s), max(t, s)
    if lo == 0.0:
        return 0.0
    g2 = math.gamma(h + 0.5) ** 2
    if lo == hi:
        return lo ** (2 * h) / (2 * h * g2)
    e = h - 0.5
    # (lo - u)^e via the weight, smooth (hi - u)^e as the integrand
    val, _ = integrate.quad(lambda u: (hi - u) ** e, 0.0, lo, weight="alg",
                            wvar=(0.0, e), epsabs=_QUAD_ABS, epsrel=_QUAD_REL,
                            limit=_QUAD_LIMIT)
    return val / g2


def type1_mvn_scale(hurst: float) -> float:
    """Var of the moving-average Type I integral with 1/Gamma(H+1/2) over t^{2H}.

    The OU-bank approximation targets this moving-average process, whose
    variance is ``t^{2H} / (Gamma(2H+1) sin(pi H))`` rather than ``t^{2H}``.
    """
    return 1.0 / (math.gamma(2.0 * hurst + 1.0) * math.sin(math.pi * hurst))


# --------------------------------------------------------------- MA-fBM


def mafbm_cov(spec: FbmSpec, grid, w, t, s) -> float:
    """Covariance E[B^(t) B^(s)] of the OU-bank approximation."""
    t, s = _times(t, s)
    g, om = _speeds_weights(grid, w)
    if t < s:
        t, s = s, t
    gi = g[:, None]
    gj = g[None, :]
    tot = gi + gj
    if spec.kind is FbmKind.TYPE_I:
        # (1 - e^{-g_j s} + e^{-g_i (t-s)} (1 - e^{-g_i s})) / (g_i + g_j)
        safe = np.where(tot > 0, tot, 1.0)
        num = -np.expm1(-gj * s) - np.exp(-gi * (t - s)) * np.expm1(-gi * s)
        m = np.where(tot > 0, num / safe, s)
    else:
        m = np.exp(-gi * (t - s)) * _one_minus_exp_over(tot, s)
    return float(om @ m @ om)


def _cross_type1_term(alpha, g, t):
    # (2 - e^{-x} - Q(alpha,x) e^{x}) / g^alpha with x = g t
    x = g * t
    if x == 0.0:
        return 0.0
    if x < 1.0:
        # Q e^x = e^x - x^alpha sum_n x^n / Gamma(alpha+n+1) removes the cancellation
        acc, term, n = 0.0, 1.0 / math.gamma(alpha + 1.0), 0
        while abs(term) > 1e-18 * abs(acc) or n == 0:
            acc += term
            n += 1
            term *= x / (alpha + n)
        cosh_m1 = 2.0 * math.sinh(0.5 * x) ** 2
        return t ** alpha * acc - 2.0 * cosh_m1 / g ** alpha
    return (2.0 - math.exp(-x) - stable_qexp(alpha, x)) / g ** alpha


def cross_cov(spec: FbmSpec, grid, w, t) -> float:
    """Equal-time cross-covariance E[B^(t) B_H(t)] between approximation and exact fBM."""
    (t,) = _times(t)
    g, om = _speeds_weights(grid, w)
    a = spec.alpha
    if t == 0.0:
        return 0.0
    total = 0.0
    for gk, wk in zip(g, om):
        if gk == 0.0:
            term = t ** a / math.gamma(a + 1.0)
        elif spec.kind is FbmKind.TYPE_I:
            term = _cross_type1_term(a, gk, t)
        else:
            term = reg_lower_gamma(a, gk * t) / gk ** a
        total += wk * term
    return float(total)


# ------------------------------------------------------------------ fOU


def _fou_check(spec: FouSpec):
    h = spec.base.hurst
    if h <= 0.5:
        raise UnsupportedRegimeError(
            f"stationary fOU kernel needs H > 1/2 when theta > 0 (got H={h}, theta={spec.theta})")


def _exp_conv_power(theta, s, p):
    """int_0^s exp(-theta (s-u)) u^p du for p > -1, written in v = s - u."""
    if s == 0.0:
        return 0.0
    f = lambda v: math.exp(-theta * v)  # noqa: E731
    cut = min(0.5 * s, 40.0 / theta)
    # smooth part near v = 0, then the u^p endpoint singularity at v = s
    smooth, _ = integrate.quad(lambda v: f(v) * (s - v) ** p, 0.0, cut,
                               epsabs=0.0, epsrel=_QUAD_REL, limit=_QUAD_LIMIT)
    sing, _ = integrate.quad(f, cut, s, weight="alg", wvar=(0.0, p),
                             epsabs=0.0, epsrel=_QUAD_REL, limit=_QUAD_LIMIT)
    return smooth + sing


def fou_kernel_lag(spec: FouSpec, lag):
    """Stationary fOU covariance as a function of the lag |t - tau| (theta > 0, H > 1/2).

    Accepts a scalar or an array of lags.
    """
    if spec.theta == 0.0:
        raise UnsupportedRegimeError("theta = 0 is not stationary; use fou_kernel")
    _fou_check(spec)
    lags = np.asarray(lag, dtype=float)
    if np.any(~(lags >= 0)):
        raise DomainError("lags must be non-negative")
    h, th = spec.base.hurst, spec.theta
    z = 2.0 * h - 1.0
    gz = math.gamma(z)
    pref = h * z / (2.0 * th)

    def one(s):
        s = float(s)
        left = math.exp(-th * s) * gz / th ** z
        right = gz * stable_qexp(z, th * s) / th ** z
        return pref * (left + _exp_conv_power(th, s, z - 1.0) + right)

    if lags.ndim == 0:
        return one(lags)
    return np.vectorize(one, otypes=[float])(lags)


def fou_kernel(spec: FouSpec, t, tau) -> float:
    """Prior covariance K(t, tau) of the fOU process.

    For theta = 0 this is the fBM covariance of ``spec.base``; for theta > 0
    it is the stationary fOU covariance, defined only for H > 1/2.
    """
    t, tau = _times(t, tau)
    if spec.theta == 0.0:
        return fbm_cov(spec.base, t, tau)
    return float(fou_kernel_lag(spec, abs(t - tau)))


def bridge_posterior_var(spec: FouSpec, obs: BridgeObs, t) -> float:
    """Posterior variance at t given X(0) = 0 exactly and a noisy X(t_end)."""
    (t,) = _times(t)
    T = obs.t_end
    if t > T * (1 + 1e-12):
        raise DomainError(f"t={t} lies outside [0, {T}]")
    if t == 0.0:
        return 0.0
    k = lambda a, b: fou_kernel(spec, a, b)  # noqa: E731
    obs_t = [0.0, T]
    noise = [0.0, obs.sigma_obs ** 2]
    if k(0.0, 0.0) == 0.0:
        # prior already pins X(0) = 0; the row would make the Gram singular
        obs_t, noise = [T], [obs.sigma_obs ** 2]
    gram = np.array([[k(a, b) for b in obs_t] for a in obs_t]) + np.diag(noise)
    kv = np.array([k(t, a) for a in obs_t])
    prior = k(t, t)
    sol = np.linalg.solve(gram, kv)
    return float(max(prior - kv @ sol, 0.0))
