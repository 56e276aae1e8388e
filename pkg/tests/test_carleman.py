import math

import numpy as np
import pytest
import sympy as sy
from hypothesis import given
from hypothesis import strategies as st

from skscontrol.carleman import (CarlemanWeights, WeightParams, audit_dt, build_beta,
                                 carleman_functionals, carleman_ratios, check_discrete_weight_lemmas,
                                 check_phi_negative, check_theta_bounds, conjugation_expansion,
                                 conjugation_identity_residual, conjugation_order, ledger_choices,
                                 parameter_ledger, theta, time_conjugation_residual, varphi)
from skscontrol.errors import ConfigError, ConstructionError, DomainError
from skscontrol.spacedisc import SpaceGrid
from skscontrol.system import SystemParams, adjoint_solve
from skscontrol.timegrid import DualSeq, TimeGrid


def weights(omega0=(0.4, 0.6), **kw):
    return CarlemanWeights(build_beta(omega0), WeightParams(**kw))


# bump ----------------------------------------------------------------------------

def test_centered_interval_gives_the_parabola():
    b = build_beta((0.4, 0.6))
    assert np.allclose(b.coefficients, [0, 1, -1], atol=1e-15)
    assert b.delta_crit == pytest.approx(0.2, abs=1e-12)
    assert b.center == 0.5 and b.sup == pytest.approx(0.25)


def test_off_center_interval_audit():
    b = build_beta((0.6, 0.8))
    x = np.linspace(0, 1, 10001)
    assert 0.6 < x[np.argmax(b(x))] < 0.8
    assert np.all(b(x[1:-1]) > 0)
    assert b(0.0) == 0 and abs(b(1.0)) < 1e-13


def test_interval_too_close_to_the_boundary():
    with pytest.raises(ConstructionError) as err:
        build_beta((0.85, 0.95))
    assert "center" in err.value.diagnostics
    with pytest.raises(ConfigError):
        build_beta((0.0, 0.3))


@given(st.floats(0.14, 0.86), st.floats(0.01, 0.1))
def test_bump_invariants(c, half):
    a, b = c - half, c + half
    if not (0 < a and b < 1):
        return
    beta = build_beta((a, b))
    assert beta(0.0) == 0.0 and abs(beta(1.0)) < 1e-12
    assert beta(0.0, 1) > 0 and beta(1.0, 1) < 0
    # critical points of the polynomial inside [0, 1]: exactly one, the midpoint
    roots = beta.poly.deriv().roots()
    real = roots[np.abs(roots.imag) < 1e-9].real
    inside = real[(real > 0) & (real < 1)]
    assert len(inside) == 1 and inside[0] == pytest.approx(c, abs=1e-8)
    x = np.linspace(0, 1, 2001)
    out = (x <= a) | (x >= b)
    assert np.min(np.abs(beta(x[out], 1))) >= beta.delta_crit * (1 - 1e-8)
    assert beta.poly.degree() <= 8


# time and space weights ------------------------------------------------------------

def test_theta_examples():
    p = WeightParams(m=1, delta=0.25, T=1)
    assert theta(0.0, p) == pytest.approx(3.2)
    s = np.linspace(0, 0.5, 11)
    assert np.allclose(theta(0.5 - s, p), theta(0.5 + s, p), rtol=1e-14)
    with pytest.raises(DomainError):
        theta(-0.25, p)
    with pytest.raises(DomainError):
        theta(1.3, p)


def test_space_weight_constants():
    w = weights(k=2, m=1, lam=1)
    assert w.c2 == pytest.approx(0.5)
    assert w.c1 == pytest.approx(math.e)
    assert w.varphi(0.5) == pytest.approx(math.exp(0.75) - math.exp(math.e))
    assert check_phi_negative(w)
    assert varphi(0.5, w.params, w.beta) == w.varphi(0.5)


@pytest.mark.parametrize("m", [1 / 3, 1.0, 2.0])
def test_theta_derivatives_match_symbolic(m):
    t = sy.symbols("t")
    d, T = sy.Rational(1, 4), 1
    mm = sy.nsimplify(m)
    th = ((t + d * T) * (T + d * T - t)) ** (-mm)
    w = weights(m=m, k=m + 1, delta=0.25, T=1.0)
    f1, f2 = sy.lambdify(t, sy.diff(th, t)), sy.lambdify(t, sy.diff(th, t, 2))
    for tv in (-0.2, 0.0, 0.3, 0.5, 0.9, 1.2):
        assert w.dtheta(tv) == pytest.approx(float(f1(tv)), rel=1e-12)
        assert w.d2theta(tv) == pytest.approx(float(f2(tv)), rel=1e-12)


@pytest.mark.parametrize("omega0,lam", [((0.4, 0.6), 1.0), ((0.6, 0.8), 2.0), ((0.2, 0.35), 1.5)])
def test_space_weight_derivatives_match_symbolic(omega0, lam):
    w = weights(omega0, lam=lam)
    x = sy.symbols("x")
    beta = sum(float(c) * x ** i for i, c in enumerate(w.beta.coefficients))
    phi = sy.exp(lam * (w.c2 + beta)) - sy.exp(lam * w.c1)
    pts = np.array([0.0, 0.13, 0.5, 0.77, 1.0])
    for k in range(1, 5):
        f = sy.lambdify(x, sy.diff(phi, x, k))
        assert np.allclose(w.dvarphi(pts, k), [float(f(v)) for v in pts], rtol=1e-10, atol=1e-10)


def test_weight_exponentials_are_reciprocal():
    w = weights(tau=2.0)
    t, x = np.linspace(0, 1, 5), np.linspace(0, 1, 7)
    assert np.allclose(w.r(t, x) * w.rho(t, x), 1.0)
    assert np.all(w.r(t, x) < 1)


# theta bounds ----------------------------------------------------------------------

def test_theta_bound_example():
    rep = check_theta_bounds(WeightParams(m=1, delta=0.25, T=1))
    assert rep["max_theta"] == pytest.approx(3.2) and rep["max_bound"] == pytest.approx(4.0)
    assert rep["max_ok"] and rep["plus_ok"] and rep["symmetric"]
    assert rep["plus_bound"] == pytest.approx(8.0)
    assert rep["C_derivative"] <= 1 / 0.25 ** 1 + 1e-12


@pytest.mark.parametrize("m", [1 / 3, 1.0, 2.0])
@pytest.mark.parametrize("delta", [0.1, 0.25, 0.5])
def test_theta_bounds_pass_on_the_audit_grid(m, delta):
    rep = check_theta_bounds(WeightParams(m=m, k=m + 1, delta=delta, T=1.0))
    assert rep["max_ok"] and rep["plus_ok"]


def test_power_law_step_bound_leaves_the_padding_for_small_powers():
    # the step bound (dT)^m / 2^m exceeds the padding dT once m < 1
    rep = check_theta_bounds(WeightParams(m=1 / 3, k=1, delta=0.25, T=1.0))
    assert rep["power_law_dt"] == pytest.approx(0.5)
    assert not rep["power_law_dt_inside_padding"]
    assert audit_dt(WeightParams(m=1 / 3, k=1, delta=0.25, T=1.0)) < 0.25
    big = check_theta_bounds(WeightParams(m=1 / 3, k=1, delta=0.25, T=1.0), dt=0.3)
    assert not big["plus_ok"]


# discrete lemmas -------------------------------------------------------------------

def test_weight_lemma_constants():
    w = weights(m=1, delta=0.25, T=1)
    rep = check_discrete_weight_lemmas(w, TimeGrid(1.0, 64))
    assert rep["derivative"][1] <= 4
    for ell in (1, 2, 3, 4):
        assert math.isfinite(rep["shift"][ell]) and rep["shift"][ell] >= 0


def test_weight_lemma_constants_stable_under_refinement():
    w = weights(m=1, delta=0.25, T=1)
    a = check_discrete_weight_lemmas(w, TimeGrid(1.0, 64))
    b = check_discrete_weight_lemmas(w, TimeGrid(1.0, 128))
    for ell in (1, 2, 3, 4):
        assert 0.5 <= a["derivative"][ell] / b["derivative"][ell] <= 2
        if a["shift"][ell] > 0:
            assert 0.5 <= a["shift"][ell] / b["shift"][ell] <= 2


def test_weight_lemma_precondition():
    w = weights(m=1, delta=0.25, T=1, tau=100.0)
    with pytest.raises(ConfigError):
        check_discrete_weight_lemmas(w, TimeGrid(1.0, 4))


def test_weight_remainder_halves_with_the_step():
    w = weights(m=1, delta=0.5, T=1)
    rep = check_discrete_weight_lemmas(w, TimeGrid(1.0, 64))
    assert 1.6 <= rep["remainder_ratio"] <= 2.4


# conjugation -----------------------------------------------------------------------

@pytest.mark.parametrize("omega0,lam,s", [((0.4, 0.6), 1.0, 1.0), ((0.6, 0.8), 2.0, 0.5),
                                          ((0.2, 0.35), 1.5, 2.0)])
def test_expansion_with_exact_derivatives_matches_symbolic(omega0, lam, s):
    w = weights(omega0, lam=lam)
    x = sy.symbols("x")
    beta = sum(float(c) * x ** i for i, c in enumerate(w.beta.coefficients))
    phi = sy.exp(lam * (w.c2 + beta)) - sy.exp(lam * w.c1)
    z = (x * (1 - x)) ** 2 * sy.cos(3 * x)
    exact = sy.lambdify(x, sy.exp(s * phi) * sy.diff(sy.exp(-s * phi) * z, x, 4))
    zs_f = [sy.lambdify(x, sy.diff(z, x, k)) for k in range(5)]
    pts = np.linspace(0.05, 0.95, 13)
    zs = tuple(np.array([float(f(v)) for v in pts]) for f in zs_f)
    lt, rt = conjugation_expansion(w, s, pts, zs)
    ref = np.array([float(exact(v)) for v in pts])
    assert np.allclose(lt + rt, ref, rtol=1e-9, atol=1e-9 * np.max(np.abs(ref)))


def test_conjugation_quartic_example():
    w = weights()
    z = lambda x: x ** 2 * (1 - x) ** 2
    r = [conjugation_identity_residual(w, SpaceGrid(N), z)["residual"] for N in (99, 199)]
    assert r[0] / r[1] >= 3.5


def test_conjugation_trivial_cases():
    w = weights()
    g = SpaceGrid(50)
    rep = conjugation_identity_residual(w, g, lambda x: np.sin(np.pi * x) ** 2, s=0.0)
    assert rep["residual"] == 0.0
    rep = conjugation_identity_residual(w, g, np.zeros(50))
    assert rep["residual"] == 0.0 and rep["lhs_max"] == 0.0


@pytest.mark.parametrize("omega0,lam,s", [((0.4, 0.6), 1.0, 1.0), ((0.6, 0.8), 2.0, 0.5),
                                          ((0.2, 0.35), 1.5, 2.0)])
def test_conjugation_second_order(omega0, lam, s):
    rep = conjugation_order(weights(omega0, lam=lam), s)
    assert rep["order"] >= 2
    assert rep["order_max"] >= 1.99


def test_time_conjugation_constant_in_time_reduces_to_weight_remainder():
    w = weights(delta=0.5)
    tg = TimeGrid(1.0, 32)
    x = np.linspace(0.1, 0.9, 5)
    z = DualSeq(tg, np.tile(np.cos(x), (33, 1)))
    rep = time_conjugation_residual(w, tg, z, x)
    assert rep["reduction_residual"] <= 1e-12 * max(1.0, rep["scale"])
    zero = time_conjugation_residual(w, tg, DualSeq(tg, np.zeros((33, 5))), x)
    assert zero["remainder_max"] == 0.0


def test_time_conjugation_remainder_is_first_order(rng):
    w = weights(delta=0.5)
    x = np.linspace(0.05, 0.95, 9)
    a, b = rng.standard_normal(3), rng.standard_normal(3)

    def z_on(M):
        tg = TimeGrid(1.0, M)
        t = tg.dual_points[:, None]
        return tg, DualSeq(tg, (a[0] + a[1] * np.sin(2 * t + b[0]) + a[2] * t ** 2) * np.cos(x + b[1]))

    rems = []
    for M in (32, 64):
        tg, z = z_on(M)
        rems.append(time_conjugation_residual(w, tg, z, x)["remainder_max"])
    assert 1.6 <= rems[0] / rems[1] <= 2.4


# functionals -----------------------------------------------------------------------

def _adjoint(N=30, M=16, scale=1.0, seed=0):
    r = np.random.default_rng(seed)
    g, tg = SpaceGrid(N), TimeGrid(1.0, M)
    return adjoint_solve(scale * r.standard_normal(N), scale * r.standard_normal(N),
                         SystemParams(), g, tg)


def test_functionals_zero_and_quadratic():
    w = weights(delta=0.25)
    z = carleman_functionals(_adjoint(scale=0.0), w)
    assert z["I_H"] == z["I_KS"] == z["W_H"] == z["W_KS"] == 0.0
    f1 = carleman_functionals(_adjoint(), w)
    f2 = carleman_functionals(_adjoint(scale=2.0), w)
    for k in ("I_H", "I_KS", "W_H", "W_KS"):
        assert f2[k] == pytest.approx(4 * f1[k], rel=1e-12)


def test_functional_term_against_loop():
    w = weights(delta=0.25, tau=1.5)
    ad = _adjoint(N=12, M=6)
    g, tg = ad.sgrid, ad.tgrid
    P = ad.p.values
    total = 0.0
    for n in range(1, tg.M + 1):
        t = (n - 0.5) * tg.dt
        th = w.theta(t)
        for i, xi in enumerate(g.x):
            total += tg.dt * g.h * math.exp(2 * 1.5 * th * w.varphi(xi)) * th ** 3 * P[n - 1, i] ** 2
    got = carleman_functionals(ad, w)["terms"]["H_0"]
    assert got == pytest.approx(1.5 ** 3 * total, rel=1e-12)


def test_carleman_ratio_experiment_records_finite_constants():
    rep = carleman_ratios(_adjoint(), weights(delta=0.25), SystemParams())
    for k in ("heat", "fourth_order", "single_observation"):
        assert 0 < rep[k] < math.inf


# ledger ------------------------------------------------------------------------------

LEDGER = dict(m=1, k=2, T=0.5, tau2=2.0, delta1=0.4, epsilon0=1e-2, epsilon1=1e-2)


def test_ledger_example_conditions_pass():
    rep = parameter_ledger(WeightParams(**LEDGER), 1e-6)
    assert rep.all_conditions_pass
    assert rep.identities["scaled_tau"]["relative_error"] <= 1e-12
    assert rep.tau == pytest.approx(2 * (0.25 + 0.5 + 0.5 ** (2 - 1 / 3)))
    # the coupled padding is not admissible at this step
    assert rep.delta > rep.admissibility["delta_le_delta1"]["bound"]
    assert not rep.admissible


@given(st.floats(1e-12, 1e-2), st.sampled_from([1 / 3, 1.0, 2.0]), st.floats(0.2, 0.9))
def test_scaled_tau_identity(dt, m, T):
    p = WeightParams(m=m, k=m + 1, T=T, tau2=2.0, delta1=0.4, epsilon0=1e-2)
    rep = parameter_ledger(p, dt)
    assert rep.identities["scaled_tau"]["relative_error"] <= 1e-12
    eq = rep.identities["single_observation_equality"]
    assert eq["value"] == pytest.approx(eq["target"], rel=1e-11)


def test_padding_shrinks_like_a_root_of_the_step():
    p = WeightParams(**LEDGER)
    d1 = ledger_choices(p, 1e-6)[2]
    d2 = ledger_choices(p, 1e-6 / 2 ** 10)[2]
    assert d2 / d1 == pytest.approx(0.5, rel=1e-12)


def test_zero_thresholds_fail_every_threshold_condition():
    p = WeightParams(**{**LEDGER, "epsilon0": 0.0, "epsilon1": 0.0})
    rep = parameter_ledger(p, 1e-6)
    for name in ("heat_step", "fourth_order_step", "coupling_step", "single_observation_step"):
        assert not rep.conditions[name]["pass"]
    assert not rep.all_conditions_pass


def test_weight_params_validation():
    for kw in ({"k": 0.5, "m": 1}, {"delta": 0.0}, {"delta": 0.6}, {"lam": 0}, {"T": -1}):
        with pytest.raises(ConfigError):
            WeightParams(**kw)
