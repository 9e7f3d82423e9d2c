import json
import math
import warnings

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fracdyn.approx import (
    GammaGrid,
    OmegaMethod,
    assemble_system,
    baseline_omega,
    bm_degenerate,
    build_gamma_grid,
    criterion,
    default_horizon,
    hurst_sensitivity,
    solve_optimal_omega,
    weights_from_dict,
    weights_to_dict,
)
from fracdyn.errors import DimensionError, DomainError, SingularSystemError
from fracdyn.kernels import FbmSpec, cross_cov, mafbm_cov, fbm_cov, type1_mvn_scale
from fracdyn.specfun import reg_upper_gamma
from generate_oracles import a_entry, b_entry

# ------------------------------------------------------------------- grid


def test_grid_k5_gamma20():
    g = build_gamma_grid(5, 20.0)
    expect = [0.05, 0.05 * math.sqrt(20), 1.0, math.sqrt(20), 20.0]
    np.testing.assert_allclose(g.speeds, expect, rtol=1e-14)
    assert g.ratio == pytest.approx(math.sqrt(20))
    assert g.speeds[0] == 0.05 and g.speeds[-1] == 20.0


def test_grid_small_cases():
    np.testing.assert_allclose(build_gamma_grid(3, 4.0).speeds, [0.25, 1.0, 4.0], rtol=1e-15)
    g1 = build_gamma_grid(1, 7.0)
    assert g1.speeds.tolist() == [7.0]
    d = build_gamma_grid(1, bm_degenerate=True)
    assert d.degenerate and d.speeds.tolist() == [0.0]
    w = bm_degenerate(FbmSpec(0.5))
    assert w.weights.tolist() == [1.0] and w.method is OmegaMethod.DEGENERATE


def test_grid_ratio_mode_is_nested():
    a = build_gamma_grid(5, ratio=2.0).speeds
    b = build_gamma_grid(7, ratio=2.0).speeds
    np.testing.assert_allclose(a, b[1:-1], rtol=1e-15)
    np.testing.assert_allclose(a, [0.25, 0.5, 1, 2, 4], rtol=1e-15)


@pytest.mark.parametrize("args,kw", [((0, 20.0), {}), ((3, 1.0), {}), ((3, 0.5), {}),
                                     ((3,), {"ratio": 1.0}), ((3,), {}), ((2, 20.0), {"bm_degenerate": True})])
def test_grid_errors(args, kw):
    with pytest.raises(DomainError):
        build_gamma_grid(*args, **kw)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 16), st.floats(1.01, 1e3))
def test_grid_symmetric_in_log(k, gmax):
    g = build_gamma_grid(k, gmax).speeds
    assert np.all(np.diff(g) > 0)
    np.testing.assert_allclose(np.log(g), -np.log(g[::-1]), atol=1e-12)


# ----------------------------------------------------------------- system

A_SCALAR = (1 + (math.exp(-2) - 1) / 2) / 2


def test_scalar_type2_case():
    spec = FbmSpec(0.5, "II")
    g = build_gamma_grid(1, 1.0)
    A, b, c = assemble_system(spec, g, 1.0)
    assert A[0, 0] == pytest.approx(A_SCALAR, rel=1e-15)
    assert b[0] == pytest.approx(math.exp(-1), rel=1e-14)
    assert c == pytest.approx(0.5, rel=1e-15)
    w = solve_optimal_omega(spec, g, 1.0)
    assert w.weights[0] == pytest.approx(math.exp(-1) / A_SCALAR, rel=1e-14)


@pytest.mark.parametrize("kind", ["I", "II"])
def test_matrix_symmetric_exactly(kind):
    A, _, _ = assemble_system(FbmSpec(0.3, kind), build_gamma_grid(9, 50.0), 4.0)
    assert np.array_equal(A, A.T)


def _naive(kind, h, g, T):
    a = h + 0.5
    gi, gj = g[:, None], g[None, :]
    if kind == "I":
        A = (2 * T + (np.exp(-gi * T) - 1) / gi + (np.exp(-gj * T) - 1) / gj) / (gi + gj)
        qe = np.array([reg_upper_gamma(a, x) * math.exp(x) for x in g * T])
        b = 2 * T / g ** a - T ** a / (g * math.gamma(a + 1)) + (np.exp(-g * T) - qe) / g ** (a + 1)
    else:
        s = gi + gj
        A = (T + (np.exp(-s * T) - 1) / s) / s
        b = None
    return A, b


@pytest.mark.parametrize("kind", ["I", "II"])
def test_stable_forms_match_naive_where_benign(kind):
    g = np.array([1.5, 3.0, 7.0, 20.0])
    A, b, _ = assemble_system(FbmSpec(0.3, kind), g, 2.0)
    An, bn = _naive(kind, 0.3, g, 2.0)
    np.testing.assert_allclose(A, An, rtol=1e-13)
    if bn is not None:
        np.testing.assert_allclose(b, bn, rtol=1e-10)


def test_type1_vector_stays_finite_for_huge_speeds():
    # Q(a, x) e^x overflows naively far below x = 1e4
    g = np.array([10.0, 100.0, 1e3, 1e4])
    _, b, _ = assemble_system(FbmSpec(0.7, "I"), g, 6.0)
    assert np.all(np.isfinite(b))
    with pytest.raises(OverflowError):
        math.exp(1e3 * 6.0)


@pytest.mark.parametrize("kind", ["I", "II"])
@pytest.mark.parametrize("h", [0.15, 0.75])
def test_system_entries_against_quadrature(kind, h):
    T = 3.0
    g = np.array([1e-3, 0.08, 1.0, 25.0])
    A, b, c = assemble_system(FbmSpec(h, kind), g, T)
    with mp.workdps(20):
        for i in range(len(g)):
            assert b[i] == pytest.approx(float(b_entry(kind, mp.mpf(h), mp.mpf(g[i]), T)), rel=1e-10)
            for j in range(i, len(g)):
                assert A[i, j] == pytest.approx(float(a_entry(kind, mp.mpf(g[i]), mp.mpf(g[j]), T)), rel=1e-12)


@pytest.mark.parametrize("kind", ["I", "II"])
def test_constant_is_integrated_variance(kind):
    h, T = 0.3, 2.5
    _, _, c = assemble_system(FbmSpec(h, kind), [1.0], T)
    from scipy.integrate import quad
    scale = type1_mvn_scale(h) if kind == "I" else 1.0
    ref, _ = quad(lambda t: scale * fbm_cov(FbmSpec(h, kind), t, t), 0, T, epsrel=1e-13)
    assert c == pytest.approx(ref, rel=1e-10)


@pytest.mark.parametrize("kind", ["I", "II"])
def test_criterion_matches_time_integral_of_covariances(kind):
    # E(w) = int_0^T Var B^ + Var B - 2 Cov(B^, B) dt, through the kernels module
    from scipy.integrate import quad

    spec = FbmSpec(0.7, kind)
    g = build_gamma_grid(3, 10.0)
    w = np.array([0.3, -0.1, 0.8])
    T = 2.0
    scale = type1_mvn_scale(0.7) if kind == "I" else 1.0

    def err(t):
        return (mafbm_cov(spec, g, w, t, t) + scale * fbm_cov(spec, t, t) - 2 * cross_cov(spec, g, w, t))

    ref, _ = quad(err, 0, T, epsrel=1e-12, limit=200)
    assert criterion(spec, g, w, T).total == pytest.approx(ref, rel=1e-9)


# ----------------------------------------------------------------- solver


@pytest.mark.parametrize("kind,T", [("I", 6.0), ("II", 10.0)])
@pytest.mark.parametrize("h", [0.1, 0.3, 0.5, 0.7, 0.9])
@pytest.mark.parametrize("k", [2, 3, 5, 7, 9])
def test_optimality_and_normal_equations(kind, T, h, k):
    spec = FbmSpec(h, kind)
    g = build_gamma_grid(k, 20.0)
    w = solve_optimal_omega(spec, g, T)
    A, b, c = assemble_system(spec, g, T)
    assert np.max(np.abs(A @ w.weights - b)) / np.max(np.abs(b)) < 1e-8
    rep = criterion(spec, g, w, T)
    assert rep.total >= -1e-9
    assert rep.total == pytest.approx(c - b @ w.weights, rel=1e-6, abs=1e-9 * c)
    rng = np.random.default_rng(k * 100 + int(h * 10))
    norm = np.linalg.norm(w.weights)
    for _ in range(100):
        d = rng.normal(size=k)
        d *= rng.uniform(0, 0.1) * norm / np.linalg.norm(d)
        assert criterion(spec, g, w.weights + d, T).total >= rep.total - 1e-9 * max(1.0, c)


def test_criterion_trivial_cases():
    spec = FbmSpec(0.5, "II")
    rep = criterion(spec, [1.0], [0.0], 1.0)
    assert rep.total == rep.constant == pytest.approx(0.5)
    assert rep.quadratic == 0 and rep.linear == 0
    with pytest.raises(DimensionError):
        criterion(spec, [1.0, 2.0], [0.0], 1.0)


@pytest.mark.parametrize("h", [0.2, 0.5, 0.8])
def test_monotone_in_k_on_nested_grids(h):
    spec = FbmSpec(h, "II")
    totals = []
    for k in range(2, 12):
        g = build_gamma_grid(k, ratio=2.0)
        totals.append(criterion(spec, g, solve_optimal_omega(spec, g, 10.0), 10.0).total)
    assert np.all(np.diff(totals) <= 1e-9)


@pytest.mark.parametrize("kind,T", [("I", 6.0), ("II", 10.0)])
@pytest.mark.parametrize("h", [0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9])
@pytest.mark.parametrize("k", [3, 5, 7])
def test_optimal_beats_baseline(kind, T, h, k):
    spec = FbmSpec(h, kind)
    g = build_gamma_grid(k, 20.0)
    opt = criterion(spec, g, solve_optimal_omega(spec, g, T), T).total
    base = criterion(spec, g, baseline_omega(spec, g, T), T).total
    assert opt < base


def test_singular_system_reported():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with pytest.raises(SingularSystemError) as exc:
            solve_optimal_omega(FbmSpec(0.3, "II"), build_gamma_grid(11, 20.0), 2.0)
    assert exc.value.condition > 1e14


def test_large_k_warns_and_caps():
    with pytest.warns(RuntimeWarning):
        solve_optimal_omega(FbmSpec(0.3, "II"), build_gamma_grid(12, ratio=1.5), 10.0)
    with pytest.raises(DomainError):
        solve_optimal_omega(FbmSpec(0.3, "II"), build_gamma_grid(17, 20.0), 10.0)


def test_half_is_valid_for_optimal():
    w = solve_optimal_omega(FbmSpec(0.5, "I"), build_gamma_grid(5, 20.0), 6.0)
    assert np.all(np.isfinite(w.weights))


def test_degenerate_grid_solves_to_unit_weight():
    spec = FbmSpec(0.5, "II")
    w = solve_optimal_omega(spec, build_gamma_grid(1, bm_degenerate=True), 3.0)
    assert w.weights.tolist() == [1.0]
    A, b, c = assemble_system(spec, [0.0], 3.0)
    assert b[0] / A[0, 0] == pytest.approx(1.0, rel=1e-14)
    assert criterion(spec, [0.0], [1.0], 3.0).total == pytest.approx(0.0, abs=1e-13)


# --------------------------------------------------------------- baseline


def _baseline_oracle(h, g):
    """Per-interval quadrature of the hat-function / finite-difference constructions."""
    a = h + 0.5
    K = len(g)
    w = [mp.mpf(0)] * K
    with mp.workdps(30):
        if h < 0.5:
            mu = lambda x: x ** (-a) / (mp.gamma(a) * mp.gamma(1 - a))  # noqa: E731
            for k in range(K - 1):
                lo, hi = mp.mpf(g[k]), mp.mpf(g[k + 1])
                w[k] += mp.quad(lambda x: (hi - x) / (hi - lo) * mu(x), [lo, hi])
                w[k + 1] += mp.quad(lambda x: (x - lo) / (hi - lo) * mu(x), [lo, hi])
        else:
            nu = lambda x: x ** (1 - a) / (mp.gamma(a) * mp.gamma(2 - a))  # noqa: E731
            for k in range(K - 1):
                lo, hi = mp.mpf(g[k]), mp.mpf(g[k + 1])
                m = mp.quad(nu, [lo, hi]) / (hi - lo)
                w[k] += m
                w[k + 1] -= m
    return np.array([float(x) for x in w])


@pytest.mark.parametrize("h", [0.3, 0.8, 0.1, 0.95])
def test_baseline_against_interval_quadrature(h):
    g = build_gamma_grid(5, 20.0)
    w = baseline_omega(FbmSpec(h), g)
    np.testing.assert_allclose(w.weights, _baseline_oracle(h, g.speeds), rtol=1e-12)


def test_baseline_structure():
    g = build_gamma_grid(2, 4.0)
    w = baseline_omega(FbmSpec(0.3), g).weights
    ref = _baseline_oracle(0.3, g.speeds)
    np.testing.assert_allclose(w, ref, rtol=1e-12)
    for h in (0.05, 0.2, 0.45):
        assert np.all(baseline_omega(FbmSpec(h), build_gamma_grid(7, 20.0)).weights >= 0)
    with pytest.raises(DomainError):
        baseline_omega(FbmSpec(0.5), g)
    with pytest.raises(DomainError):
        baseline_omega(FbmSpec(0.3), build_gamma_grid(1, 5.0))


# ------------------------------------------------------------ sensitivity


def test_sensitivity_brackets_and_richardson():
    spec = FbmSpec(0.4, "II")
    g = build_gamma_grid(3, 20.0)
    c4 = hurst_sensitivity(spec, g, 2.0, 1e-4)
    c5 = hurst_sensitivity(spec, g, 2.0, 1e-5)
    np.testing.assert_allclose(c4, c5, rtol=1e-3)
    fwd = hurst_sensitivity(spec, g, 2.0, 1e-3, scheme="forward")
    bwd = hurst_sensitivity(spec, g, 2.0, 1e-3, scheme="backward")
    c3 = hurst_sensitivity(spec, g, 2.0, 1e-3)
    assert np.all((np.minimum(fwd, bwd) <= c3 + 1e-9) & (c3 <= np.maximum(fwd, bwd) + 1e-9))
    np.testing.assert_allclose(c3, (fwd + bwd) / 2, rtol=1e-10)


def test_sensitivity_continuous_across_half():
    g = build_gamma_grid(5, 20.0)
    vals = [hurst_sensitivity(FbmSpec(h, "I"), g, 6.0, 1e-4) for h in (0.499, 0.5, 0.501)]
    assert all(np.all(np.isfinite(v)) for v in vals)
    np.testing.assert_allclose(vals[0], vals[1], rtol=2e-2)
    np.testing.assert_allclose(vals[2], vals[1], rtol=2e-2)


def test_sensitivity_domain():
    with pytest.raises(DomainError):
        hurst_sensitivity(FbmSpec(0.99), build_gamma_grid(3, 5.0), 1.0, 0.05)
    with pytest.raises(DomainError):
        hurst_sensitivity(FbmSpec(0.5), build_gamma_grid(3, 5.0), 1.0, 0.0)


# --------------------------------------------------------------- json


def test_json_roundtrip_and_schema():
    spec = FbmSpec(0.7, "I")
    w = solve_optimal_omega(spec, build_gamma_grid(5, 20.0), 6.0)
    doc = weights_to_dict(w)
    assert set(doc) == {"type", "hurst", "horizon", "gamma", "omega", "method", "criterion"}
    assert set(doc["criterion"]) == {"quadratic", "linear", "constant", "total"}
    text = json.dumps(doc)
    back = weights_from_dict(text)
    np.testing.assert_array_equal(back.weights, w.weights)
    np.testing.assert_array_equal(back.grid.speeds, w.grid.speeds)
    assert back.spec == spec and back.method is OmegaMethod.OPTIMAL


def test_default_horizon():
    assert default_horizon("I", 2.0) == 6.0
    assert default_horizon("II", 2.0) == 2.0
    assert default_horizon("I", 2.0, multiplier=2) == 4.0


def test_gamma_grid_validation():
    with pytest.raises(DomainError):
        GammaGrid(np.array([2.0, 1.0]), 2.0, 2)
    with pytest.raises(DimensionError):
        GammaGrid(np.array([1.0, 2.0]), 2.0, 3)
