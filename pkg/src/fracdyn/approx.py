"""Mean-reversion grids and quadrature weights for the OU-bank approximation.

The optimal weights minimise the time-integrated squared error between the
weighted OU bank and exact fBM,

    E(w) = w^T A w - 2 b^T w + c,

so they solve ``A w = b``.  Matrix entries are evaluated in forms that stay
accurate when ``gamma * T`` is small (series) or large (continued fraction
through :func:`stable_qexp`).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import linalg

from .errors import DimensionError, DomainError, SingularSystemError
from .kernels import FbmKind, FbmSpec, type1_mvn_scale
from .specfun import reg_lower_gamma, stable_qexp

__all__ = [
    "GammaGrid",
    "OmegaMethod",
    "OmegaWeights",
    "CriterionReport",
    "build_gamma_grid",
    "bm_degenerate",
    "assemble_system",
    "solve_optimal_omega",
    "baseline_omega",
    "criterion",
    "hurst_sensitivity",
    "default_horizon",
    "weights_to_dict",
    "weights_from_dict",
]

COND_LIMIT = 1e14
K_WARN = 11
K_MAX = 16
RESIDUAL_LIMIT = 1e-8


@dataclass(frozen=True)
class GammaGrid:
    """Geometric mean-reversion speeds ``gamma_k = r^(k-n)``, ``n = (K+1)/2``."""

    speeds: np.ndarray
    ratio: float
    count: int
    degenerate: bool = False

    def __post_init__(self):
        sp = np.array(self.speeds, dtype=float).ravel()
        sp.setflags(write=False)
        object.__setattr__(self, "speeds", sp)
        if sp.size != self.count:
            raise DimensionError(f"{sp.size} speeds for count {self.count}")
        if self.degenerate:
            if self.count != 1 or sp[0] != 0.0:
                raise DomainError("the degenerate grid is the single speed 0")
        elif np.any(sp <= 0) or np.any(np.diff(sp) <= 0):
            raise DomainError("speeds must be positive and strictly increasing")

    @property
    def gamma_max(self) -> float:
        return float(self.speeds[-1])

    def __len__(self):
        return self.count


def build_gamma_grid(count: int, gamma_max: float | None = None, *, ratio: float | None = None,
                     bm_degenerate: bool = False) -> GammaGrid:
    """Build the symmetric geometric grid.

    Give either ``gamma_max`` (then ``r = gamma_max^(2/(K-1))``) or the
    ratio ``r`` directly; the latter keeps the spacing fixed while K grows.
    ``bm_degenerate=True`` returns the single speed 0 (plain Brownian motion).
    """
    count = int(count)
    if count < 1:
        raise DomainError(f"need at least one speed, got K={count}")
    if bm_degenerate:
        if count != 1:
            raise DomainError("the Brownian degenerate grid has exactly one speed")
        return GammaGrid(np.zeros(1), 1.0, 1, degenerate=True)
    if (gamma_max is None) == (ratio is None):
        raise DomainError("give exactly one of gamma_max and ratio")
    if ratio is not None:
        r = float(ratio)
        if not r > 1.0:
            raise DomainError(f"ratio must exceed 1, got {ratio}")
    elif count == 1:
        g = float(gamma_max)
        if not g > 0:
            raise DomainError(f"gamma_max must be positive, got {gamma_max}")
        return GammaGrid(np.array([g]), 1.0, 1)
    else:
        g = float(gamma_max)
        if not g > 1.0:
            raise DomainError(f"gamma_max must exceed 1 for K >= 2, got {gamma_max}")
        r = g ** (2.0 / (count - 1))
    n = (count + 1) / 2.0
    k = np.arange(1, count + 1)
    speeds = r ** (k - n)
    if gamma_max is not None:
        # pin the end points exactly
        speeds[-1] = float(gamma_max)
        speeds[0] = 1.0 / float(gamma_max)
    return GammaGrid(speeds, r, count)


class OmegaMethod(str, Enum):
    OPTIMAL = "optimal"
    BASELINE = "baseline"
    DEGENERATE = "degenerate"


@dataclass(frozen=True)
class OmegaWeights:
    weights: np.ndarray
    spec: FbmSpec
    horizon: float
    method: OmegaMethod
    grid: GammaGrid
    condition: float | None = field(default=None, compare=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).ravel()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if w.size != self.grid.count:
            raise DimensionError(f"{w.size} weights for {self.grid.count} speeds")
        if not np.all(np.isfinite(w)):
            raise DomainError("weights must be finite")
        object.__setattr__(self, "method", OmegaMethod(self.method))

    @property
    def total(self) -> float:
        """Sum of the weights (the diffusion factor of the augmented system)."""
        return float(self.weights.sum())


@dataclass(frozen=True)
class CriterionReport:
    quadratic: float
    linear: float
    constant: float
    total: float

    def as_dict(self):
        return {"quadratic": self.quadratic, "linear": self.linear,
                "constant": self.constant, "total": self.total}


def bm_degenerate(spec: FbmSpec, horizon: float = 1.0) -> OmegaWeights:
    """K=1, gamma=0, omega=1: the OU bank collapses to the Wiener process itself."""
    return OmegaWeights(np.ones(1), spec, float(horizon), OmegaMethod.DEGENERATE,
                        build_gamma_grid(1, bm_degenerate=True))


def default_horizon(kind, seq_len: float, multiplier: float = 3.0) -> float:
    """Weight horizon for a sequence of length ``seq_len``; Type I looks further back."""
    if FbmKind.parse(kind) is FbmKind.TYPE_I:
        return float(multiplier) * float(seq_len)
    return float(seq_len)


# ------------------------------------------------------------------ system


def _series(x, coef_fn, nterms=30):
    acc = np.zeros_like(x)
    for n in range(nterms - 1, -1, -1):
        acc = acc * x + coef_fn(n)
    return acc


def _phi(x):
    """(x - 1 + e^{-x}) / x^2, equal to 1/2 at 0."""
    x = np.asarray(x, dtype=float)
    small = x < 1.0
    xs = np.where(small, x, 0.0)
    ser = _series(-xs, lambda n: 1.0 / math.factorial(n + 2))
    xl = np.where(small, 1.0, x)
    direct = (xl + np.expm1(-xl)) / (xl * xl)
    return np.where(small, ser, direct)


def _f1(x):
    """1 - (1 - e^{-x}) / x, which behaves like x/2 near 0."""
    x = np.asarray(x, dtype=float)
    small = x < 1.0
    xs = np.where(small, x, 0.0)
    # sum_{n>=1} (-1)^{n+1} x^n / (n+1)!  = x * sum_m (-x)^m / (m+2)!
    ser = xs * _series(-xs, lambda m: 1.0 / math.factorial(m + 2))
    xl = np.where(small, 1.0, x)
    direct = 1.0 + np.expm1(-xl) / xl
    return np.where(small, ser, direct)


def _b_type1(alpha, g, T):
    if g == 0.0:
        return T ** (alpha + 1.0) / math.gamma(alpha + 2.0)
    x = g * T
    if x < 1.0:
        acc, n = 0.0, 0
        term = 1.0 / math.gamma(alpha + 1.0)
        while True:
            piece = term / (alpha + n + 1.0)
            acc += piece
            if abs(piece) <= 1e-18 * abs(acc):
                break
            n += 1
            term *= x / (alpha + n)
        sinhc_m1 = (math.sinh(x) - x) / x if x > 1e-4 else x * x / 6.0 * (1 + x * x / 20.0)
        return T ** (alpha + 1.0) * acc - 2.0 * T * sinhc_m1 / g ** alpha
    return (2.0 * T / g ** alpha - T ** alpha / (g * math.gamma(alpha + 1.0))
            + (math.exp(-x) - stable_qexp(alpha, x)) / g ** (alpha + 1.0))


def _b_type2(alpha, g, T):
    if g == 0.0:
        return T ** (alpha + 1.0) / math.gamma(alpha + 2.0)
    x = g * T
    return T * reg_lower_gamma(alpha, x) / g ** alpha - alpha * reg_lower_gamma(alpha + 1.0, x) / g ** (alpha + 1.0)


def _constant(spec: FbmSpec, T: float) -> float:
    h = spec.hurst
    base = T ** (2 * h + 1) / (2 * h + 1)
    if spec.kind is FbmKind.TYPE_I:
        # integrated variance of the moving-average representation the bank approximates
        return base * type1_mvn_scale(h)
    return base / (2 * h * math.gamma(h + 0.5) ** 2)


def assemble_system(spec: FbmSpec, grid, horizon: float):
    """Return ``(A, b, c)`` of the quadratic error criterion on ``[0, horizon]``."""
    T = float(horizon)
    if not T > 0:
        raise DomainError(f"horizon must be positive, got {horizon}")
    g = np.asarray(getattr(grid, "speeds", grid), dtype=float)
    a = spec.alpha
    gi, gj = g[:, None], g[None, :]
    s = gi + gj
    if spec.kind is FbmKind.TYPE_I:
        safe = np.where(s > 0, s, 1.0)
        A = np.where(s > 0, T * (_f1(gi * T) + _f1(gj * T)) / safe, 0.5 * T * T)
        b = np.array([_b_type1(a, gk, T) for gk in g])
    else:
        A = T * T * _phi(s * T)
        b = np.array([_b_type2(a, gk, T) for gk in g])
    return A, b, _constant(spec, T)


def _solve_spd(A, b):
    d = np.sqrt(np.diag(A))
    As = A / d[:, None] / d[None, :]
    bs = b / d
    try:
        cf = linalg.cho_factor(As, lower=True, check_finite=True)
        ys = linalg.cho_solve(cf, bs)
    except linalg.LinAlgError:
        # symmetric-indefinite (Bunch-Kaufman) fallback
        ys = linalg.solve(As, bs, assume_a="sym")
    return ys / d


def solve_optimal_omega(spec: FbmSpec, grid: GammaGrid, horizon: float) -> OmegaWeights:
    """Weights minimising the integrated squared error on ``[0, horizon]``."""
    if grid.degenerate:
        return bm_degenerate(spec, horizon)
    K = grid.count
    if K > K_MAX:
        raise DomainError(f"K={K} exceeds the supported maximum {K_MAX}")
    if K > K_WARN:
        warnings.warn(f"K={K} > {K_WARN}: the weight system is severely ill-conditioned",
                      RuntimeWarning, stacklevel=2)
    A, b, _ = assemble_system(spec, grid, horizon)
    if not np.array_equal(A, A.T):
        raise AssertionError("weight matrix lost symmetry")
    cond = float(np.linalg.cond(A))
    if not math.isfinite(cond) or cond > COND_LIMIT:
        raise SingularSystemError(
            f"weight system too ill-conditioned (cond={cond:.3e} > {COND_LIMIT:.0e}); "
            f"reduce K or widen the grid spacing", condition=cond)
    w = _solve_spd(A, b)
    res = np.max(np.abs(A @ w - b)) / np.max(np.abs(b))
    if not np.all(np.isfinite(w)) or res > RESIDUAL_LIMIT:
        raise SingularSystemError(f"weight solve residual {res:.3e} too large (cond={cond:.3e})",
                                  condition=cond)
    return OmegaWeights(w, spec, float(horizon), OmegaMethod.OPTIMAL, grid, condition=cond)


def baseline_omega(spec: FbmSpec, grid: GammaGrid, horizon: float = 1.0) -> OmegaWeights:
    """Piecewise Laplace-quadrature weights (linear interpolation / finite differences).

    ``horizon`` is only recorded; these weights do not depend on it.
    """
    h = spec.hurst
    if h == 0.5:
        raise DomainError("baseline weights are undefined at H = 1/2 (pole of Gamma(1 - alpha))")
    K = grid.count
    if K < 2 or grid.degenerate:
        raise DomainError("baseline weights need K >= 2")
    g = grid.speeds
    a = spec.alpha
    w = np.zeros(K)
    if h < 0.5:
        pref = 1.0 / (math.gamma(a) * math.gamma(1.0 - a))
        p1 = lambda lo, hi: (hi ** (1 - a) - lo ** (1 - a)) / (1 - a)  # noqa: E731
        p2 = lambda lo, hi: (hi ** (2 - a) - lo ** (2 - a)) / (2 - a)  # noqa: E731
        for k in range(K):
            if k > 0:
                lo, hi = g[k - 1], g[k]
                w[k] += (p2(lo, hi) - lo * p1(lo, hi)) / (hi - lo)
            if k < K - 1:
                lo, hi = g[k], g[k + 1]
                w[k] += (hi * p1(lo, hi) - p2(lo, hi)) / (hi - lo)
        w *= pref
    else:
        pref = -1.0 / ((2 - a) * math.gamma(a) * math.gamma(2 - a))
        q = lambda lo, hi: (hi ** (2 - a) - lo ** (2 - a)) / (hi - lo)  # noqa: E731
        for k in range(K):
            if k > 0:
                w[k] += q(g[k - 1], g[k])
            if k < K - 1:
                w[k] -= q(g[k], g[k + 1])
        w *= pref
    return OmegaWeights(w, spec, float(horizon), OmegaMethod.BASELINE, grid)


def criterion(spec: FbmSpec, grid, w, horizon: float) -> CriterionReport:
    """Exact decomposition of the integrated squared error for weights ``w``."""
    om = np.asarray(getattr(w, "weights", w), dtype=float).ravel()
    g = np.asarray(getattr(grid, "speeds", grid), dtype=float).ravel()
    if om.shape != g.shape:
        raise DimensionError(f"{om.size} weights for {g.size} speeds")
    A, b, c = assemble_system(spec, g, horizon)
    quad = float(om @ A @ om)
    lin = float(2.0 * (b @ om))
    return CriterionReport(quad, lin, float(c), quad - lin + float(c))


def hurst_sensitivity(spec: FbmSpec, grid: GammaGrid, horizon: float, eps: float = 1e-4,
                      scheme: str = "central") -> np.ndarray:
    """Finite-difference derivative of the optimal weights with respect to H."""
    if not eps > 0:
        raise DomainError("eps must be positive")
    h = spec.hurst
    if not (0.0 < h - eps and h + eps < 1.0):
        raise DomainError(f"H +- eps leaves (0, 1): H={h}, eps={eps}")
    solve = lambda hh: solve_optimal_omega(FbmSpec(hh, spec.kind), grid, horizon).weights  # noqa: E731
    if scheme == "central":
        return (solve(h + eps) - solve(h - eps)) / (2 * eps)
    w0 = solve(h)
    if scheme == "forward":
        return (solve(h + eps) - w0) / eps
    if scheme == "backward":
        return (w0 - solve(h - eps)) / eps
    raise DomainError(f"unknown difference scheme {scheme!r}")


# ----------------------------------------------------------- serialisation


def weights_to_dict(w: OmegaWeights, report: CriterionReport | None = None) -> dict:
    if report is None:
        report = criterion(w.spec, w.grid, w, w.horizon)
    return {
        "type": w.spec.kind.value,
        "hurst": w.spec.hurst,
        "horizon": w.horizon,
        "gamma": [float(x) for x in w.grid.speeds],
        "omega": [float(x) for x in w.weights],
        "method": w.method.value,
        "criterion": report.as_dict(),
    }


def weights_from_dict(doc) -> OmegaWeights:
    if isinstance(doc, (str, bytes)):
        doc = json.loads(doc)
    spec = FbmSpec(doc["hurst"], doc["type"])
    gamma = np.asarray(doc["gamma"], dtype=float)
    method = OmegaMethod(doc["method"])
    if method is OmegaMethod.DEGENERATE:
        grid = build_gamma_grid(1, bm_degenerate=True)
    else:
        ratio = float(gamma[1] / gamma[0]) if gamma.size > 1 else 1.0
        grid = GammaGrid(gamma, ratio, gamma.size)
    return OmegaWeights(doc["omega"], spec, float(doc["horizon"]), method, grid)
