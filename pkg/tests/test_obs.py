import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from skscontrol.errors import ConfigError
from skscontrol.hum import HUMConfig, PenaltyFn
from skscontrol.obs import (DecayRow, ObsSample, ct_time_sweep, decay_study, dt_sweep_points,
                            estimate_CT, fit_decay, gramians, obs_terms, phi_sweep_points,
                            random_final_data, remainder_weight)
from skscontrol.spacedisc import SpaceGrid
from skscontrol.system import StepOperator, SystemParams
from skscontrol.timegrid import TimeGrid

P = SystemParams()
PHIS = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6]


def test_remainder_weight():
    assert remainder_weight(2.0, 1e-3) == pytest.approx(math.exp(-2.0 / 1e-3 ** 0.1))


def test_ratio_is_scale_invariant(rng):
    g, tg = SpaceGrid(30), TimeGrid(0.5, 16)
    step = StepOperator(P, g, tg)
    p, q = random_final_data(g, rng)
    base = obs_terms(p, q, P, g, tg, C1=1.0, step=step).ratio
    for c in (1e-3, 2.0, -7.5):
        assert obs_terms(c * p, c * q, P, g, tg, C1=1.0, step=step).ratio == pytest.approx(base, rel=1e-12)


def test_zero_datum_is_rejected():
    g, tg = SpaceGrid(10), TimeGrid(0.5, 4)
    with pytest.raises(ConfigError):
        obs_terms(np.zeros(10), np.zeros(10), P, g, tg, C1=1.0)


def test_sample_ratio_edge_cases():
    assert ObsSample(1.0, 0.0, 0.0, True).ratio == math.inf
    assert math.isnan(ObsSample(0.0, 0.0, 0.0, False).ratio)
    assert ObsSample(2.0, 1.0, 1.0, False).ratio == 1.0


def test_terms_match_gramian_quadratic_forms(rng):
    g, tg = SpaceGrid(20), TimeGrid(0.5, 16)
    S, G, Kh = gramians(P, g, tg)
    coef = 1e-3
    for _ in range(5):
        p, q = rng.standard_normal(20), rng.standard_normal(20)
        x = np.concatenate([p, q])
        s = obs_terms(p, q, P, g, tg, remainder=coef)
        assert s.lhs == pytest.approx(x @ S @ x, rel=1e-10)
        assert s.observation == pytest.approx(x @ G @ x, rel=1e-10)
        assert s.remainder == pytest.approx(coef * x @ Kh @ x, rel=1e-10)


def test_constant_estimate():
    g, tg = SpaceGrid(30), TimeGrid(0.5, 32)
    est = estimate_CT(P, g, tg, samples=16, C1=1.0, rng=np.random.default_rng(3))
    assert all(est.CT2 >= r for r in est.sampled)
    assert est.monotone
    assert est.CT2 == pytest.approx(est.eig_max, rel=1e-6)
    more = estimate_CT(P, g, tg, samples=32, C1=1.0, rng=np.random.default_rng(3))
    assert more.CT2 >= est.CT2 * (1 - 1e-9)


def test_constant_bounds_every_random_datum(rng):
    g, tg = SpaceGrid(30), TimeGrid(0.5, 32)
    est = estimate_CT(P, g, tg, samples=4, C1=1.0)
    for _ in range(20):
        p, q = rng.standard_normal(30), rng.standard_normal(30)
        assert obs_terms(p, q, P, g, tg, remainder=est.remainder).ratio <= est.CT2 * (1 + 1e-8)


def test_datum_concentrated_in_the_region_has_a_small_ratio():
    g, tg = SpaceGrid(49), TimeGrid(0.5, 32)
    x = g.x
    bump = np.where(np.abs(x - 0.5) < 0.2, np.cos(np.pi * (x - 0.5) / 0.4) ** 4, 0.0)
    s = obs_terms(0 * bump, bump, P, g, tg, C1=1.0)
    assert s.observation > 0 and s.ratio < 1


def test_constant_grows_as_the_horizon_shrinks():
    g = SpaceGrid(30)
    sweep = ct_time_sweep(P, g, 1 / 64, Ts=(0.25, 0.5, 0.75), samples=4)
    CT = [r["CT"] for r in sweep["rows"]]
    assert CT[0] > CT[1] > CT[2]
    assert sweep["fit_slope_invT"] > 0


# decay fit --------------------------------------------------------------------------

def _row(phi, ratio, dt=1e-3, converged=True):
    return DecayRow(M=1, dt=dt, C1=1.0, phi=phi, sqrt_phi=math.sqrt(phi), final_ratio=ratio,
                    stage_norm=0.0, smoothing_ratio=0.0, control_cost=0.0, cost_ratio=0.0,
                    iterations=1, converged=converged)


@given(st.floats(0.2, 3.0), st.floats(-3, 3))
@settings(max_examples=30)
def test_fit_recovers_exact_power_laws(slope, logc):
    rows = [_row(p, math.exp(logc) * math.sqrt(p) ** slope) for p in PHIS]
    s, b, C, floor, used, excluded, _ = fit_decay(rows)
    assert s == pytest.approx(slope, abs=1e-9) and b == pytest.approx(logc, abs=1e-8)
    assert floor is None and excluded == []


def test_fit_drops_a_trailing_floor_and_failed_runs():
    ratios = [1e-1, 1e-2, 1e-3, 1.001e-3, 1.002e-3]
    rows = [_row(p, r) for p, r in zip(PHIS, ratios)]
    rows.append(_row(1e-7, 1e-9, converged=False))
    s, _, _, floor, used, excluded, _ = fit_decay(rows)
    assert used == [0, 1, 2] and sorted(excluded) == [3, 4, 5]
    assert s == pytest.approx(2.0) and floor == pytest.approx(1e-3)


def test_phi_sweep_points_hit_each_penalty():
    pts = phi_sweep_points(128, 0.5, PHIS)
    for (M, pen), p in zip(pts, PHIS):
        assert M == 128 and pen(0.5 / 128) == pytest.approx(p, rel=1e-12)


# decay study -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def phi_study():
    g = SpaceGrid(99)
    return decay_study(phi_sweep_points(128, 0.5, PHIS), P, g, 0.5, HUMConfig(T0=0.25))


def test_decay_follows_the_square_root_of_the_penalty(phi_study):
    assert phi_study.floor is None
    assert abs(phi_study.slope - 1) <= 0.2
    assert all(r.converged for r in phi_study.rows)


def test_control_cost_stays_below_the_gramian_constant(phi_study):
    cb = phi_study.cost_bound
    assert cb["holds"] and cb["max_cost_ratio"] <= cb["CT"]


def test_study_outputs(phi_study, tmp_path):
    phi_study.write_csv(tmp_path / "d.csv")
    phi_study.write_json(tmp_path / "d.json")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0].split(",") == list(phi_study.COLUMNS) and len(lines) == 6


def test_study_is_thread_count_independent():
    g = SpaceGrid(49)
    pts = phi_sweep_points(32, 0.5, PHIS[:3])
    a = decay_study(pts, P, g, 0.5, HUMConfig(T0=0.25), threads=1, cost_check=False)
    b = decay_study(pts, P, g, 0.5, HUMConfig(T0=0.25), threads=3, cost_check=False)
    assert a.rows == b.rows


def test_study_requires_a_stage_time():
    with pytest.raises(ConfigError):
        decay_study(phi_sweep_points(16, 0.5, [1e-2]), P, SpaceGrid(10), 0.5, HUMConfig())


# step refinement at fixed C1.  With a stage penalty dt * phi the realized
# final norms track sqrt(dt * phi), not sqrt(phi), so the two expectations
# below do not hold on this discretization; see the decisions ledger.

MS = [32, 64, 128, 256, 512]


@pytest.fixture(scope="module")
def dt_study():
    return decay_study(dt_sweep_points(MS, 5.0), P, SpaceGrid(99), 0.5, HUMConfig(T0=0.25),
                       cost_check=False)


@pytest.mark.xfail(strict=True, reason="decay under step refinement follows sqrt(dt*phi)")
def test_step_refinement_slope_against_sqrt_phi(dt_study):
    assert abs(dt_study.slope - 1) <= 0.2


def test_step_refinement_slope_against_scaled_penalty(dt_study):
    # measured: about 1.1 against sqrt(dt * phi), versus about 2.4 against sqrt(phi)
    assert dt_study.slope > 1.5
    assert 0.8 <= dt_study.scaled_slope <= 1.4


@pytest.fixture(scope="module")
def constant_penalty_ratios():
    pts = [(M, PenaltyFn("constant", value=1e-4)) for M in MS]
    st_ = decay_study(pts, P, SpaceGrid(99), 0.5, HUMConfig(T0=0.25), cost_check=False)
    return np.array([r.dt for r in st_.rows]), np.array([r.final_ratio for r in st_.rows])


@pytest.mark.xfail(strict=True, reason="final ratio drifts with dt at constant phi")
def test_constant_penalty_gives_a_step_independent_ratio(constant_penalty_ratios):
    _, r = constant_penalty_ratios
    assert r.max() / r.min() <= 2


def test_constant_penalty_drift_is_a_fractional_power_of_the_step(constant_penalty_ratios):
    dt, r = constant_penalty_ratios
    assert np.all(np.diff(r) < 0)
    exponent = np.polyfit(np.log(dt), np.log(r), 1)[0]
    assert 0.25 <= exponent <= 0.75


def test_gramian_constant_is_the_pencil_eigenvalue():
    g, tg = SpaceGrid(20), TimeGrid(0.25, 16)
    S, G, Kh = gramians(P, g, tg)
    coef = 1e-4
    lam = sla.eigh(S, G + coef * Kh, eigvals_only=True)[-1]
    est = estimate_CT(P, g, tg, samples=4, remainder=coef)
    assert est.eig_max == pytest.approx(lam, rel=1e-12)


def test_final_norm_decreases_with_the_penalty(phi_study):
    ratios = [r.final_ratio for r in sorted(phi_study.rows, key=lambda r: -r.phi)]
    assert all(b <= a for a, b in zip(ratios, ratios[1:]))


def test_random_datum_has_a_finite_ratio(rng):
    g, tg = SpaceGrid(49), TimeGrid(0.5, 64)
    p, q = random_final_data(g, rng)
    s = obs_terms(p, q, P, g, tg, C1=1.0)
    assert not s.anomaly and math.isfinite(s.ratio) and s.ratio > 0
    assert min(s.lhs, s.observation, s.remainder) >= 0
