"""Observability and decay experiments.

``obs_ratio`` evaluates, for one adjoint final datum, the ratio of the
initial-time adjoint energy to the observation on the control region plus a
small remainder proportional to the stronger norm of the final datum.
``estimate_CT`` turns that into a constant by sampling and then refining
with power iteration on the generalized Rayleigh quotient built from dense
Gramians.  ``decay_study`` runs the two-stage controller across a sweep of
steps or penalties and fits the final-norm decay against ``sqrt(phi)``.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import ConfigError, NumericalFailure
from .hum import HUMConfig, PenaltyFn, stage_steps, two_stage_control
from .spacedisc import SpaceGrid, sobolev_norm, stiffness_matrix
from .system import StepOperator, SystemParams, adjoint_solve, march_adjoint
from .timegrid import TimeGrid

REMAINDER_EXPONENT = 0.1


def remainder_weight(C1: float, dt: float) -> float:
    return math.exp(-C1 / dt ** REMAINDER_EXPONENT)


@dataclass
class ObsSample:
    lhs: float
    observation: float
    remainder: float
    anomaly: bool = False

    @property
    def ratio(self) -> float:
        den = self.observation + self.remainder
        if den > 0:
            return self.lhs / den
        return math.inf if self.lhs > 0 else math.nan


def obs_terms(pT, qT, params: SystemParams, sgrid: SpaceGrid, tgrid: TimeGrid, C1=None,
              remainder=None, step: StepOperator | None = None) -> ObsSample:
    """The three terms of the relaxed observability inequality for one datum.

    The remainder coefficient is ``exp(-C1 / dt**0.1)`` unless ``remainder``
    gives it directly.
    """
    pT, qT = sgrid.check_field(pT), sgrid.check_field(qT)
    if not (np.any(pT) or np.any(qT)):
        raise ConfigError("final datum must be nonzero")
    coef = remainder_weight(C1, tgrid.dt) if remainder is None else float(remainder)
    ad = adjoint_solve(pT, qT, params, sgrid, tgrid, step)
    hx, M = sgrid.h, tgrid.M
    lhs = hx * (np.sum(ad.p.values[0] ** 2) + np.sum(ad.q.values[0] ** 2))
    chi = params.mask(sgrid)
    obs = tgrid.dt * hx * np.sum((chi * ad.q.values[:M]) ** 2)
    rem = coef * (sobolev_norm(sgrid, pT, "H01") ** 2 + sobolev_norm(sgrid, qT, "H02") ** 2)
    anomaly = (obs + rem) == 0 and lhs > 0
    return ObsSample(float(lhs), float(obs), float(rem), bool(anomaly))


def obs_ratio(pT, qT, C1, params: SystemParams, sgrid: SpaceGrid, tgrid: TimeGrid,
              step: StepOperator | None = None) -> float:
    return obs_terms(pT, qT, params, sgrid, tgrid, C1=C1, step=step).ratio


def random_final_data(sgrid: SpaceGrid, rng, modes: int = 12):
    """Smooth random ``(pT, qT)`` from decaying sine series.

    The fourth-order component carries an extra ``sin(pi x)`` factor so it
    also has a vanishing slope at both ends.
    """
    x = sgrid.x
    k = np.arange(1, modes + 1)
    S = np.sin(np.pi * np.outer(k, x))
    a, b = rng.standard_normal(modes), rng.standard_normal(modes)
    pT = (a / k ** 2) @ S
    qT = np.sin(np.pi * x) * ((b / k ** 2) @ S)
    return pT, qT


def gramians(params: SystemParams, sgrid: SpaceGrid, tgrid: TimeGrid,
             step: StepOperator | None = None):
    """Dense quadratic forms on ``x = (pT, qT)``.

    Returns ``(S, G, Kh)``: initial adjoint energy, observation and the
    ``h``-weighted stiffness, each ``2N x 2N``.
    """
    step = step or StepOperator(params, sgrid, tgrid)
    N, M, hx = sgrid.N, tgrid.M, sgrid.h
    Z = march_adjoint(step, np.eye(2 * N), M)  # (M+1, 2N, 2N)
    chi = params.mask(sgrid)
    Q = chi[None, :, None] * Z[:M, N:, :]
    G = tgrid.dt * hx * np.einsum("nik,nil->kl", Q, Q)
    S = hx * Z[0].T @ Z[0]
    Kh = hx * np.block([[stiffness_matrix(sgrid, "H1").toarray(), np.zeros((N, N))],
                       [np.zeros((N, N)), stiffness_matrix(sgrid, "H2").toarray()]])
    sym = lambda A: 0.5 * (A + A.T)
    return sym(S), sym(G), sym(Kh)


@dataclass
class CTEstimate:
    CT2: float
    sampled_max: float
    sampled: list
    rayleigh_trace: list
    eig_max: float
    remainder: float
    monotone: bool

    @property
    def CT(self) -> float:
        return math.sqrt(self.CT2)


def estimate_CT(params: SystemParams, sgrid: SpaceGrid, tgrid: TimeGrid, samples: int = 16,
                C1: float | None = 1.0, remainder: float | None = None, rng=None,
                power_iters: int = 200, step: StepOperator | None = None) -> CTEstimate:
    """Estimate the squared relaxed-observability constant.

    Each random sample is evaluated by a direct adjoint march.  The best
    sample then seeds power iteration for the largest generalized
    eigenvalue of ``(S, G + remainder * Kh)``; the estimate is the larger of
    the two.  ``eig_max`` is the dense symmetric-definite eigenvalue, kept
    as an independent check.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    step = step or StepOperator(params, sgrid, tgrid)
    coef = remainder_weight(C1, tgrid.dt) if remainder is None else float(remainder)
    N = sgrid.N
    draws = [random_final_data(sgrid, rng) for _ in range(samples)]
    ratios = [obs_terms(p, q, params, sgrid, tgrid, remainder=coef, step=step).ratio
              for p, q in draws]
    best = int(np.argmax(ratios))
    S, G, Kh = gramians(params, sgrid, tgrid, step)
    B = G + coef * Kh
    try:
        cho = sla.cho_factor(B)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("observation form is not positive definite") from exc
    x = np.concatenate(draws[best])
    trace = [float(x @ S @ x / (x @ B @ x))]
    for _ in range(power_iters):
        x = sla.cho_solve(cho, S @ x)
        x /= math.sqrt(x @ B @ x)
        trace.append(float(x @ S @ x))
        if abs(trace[-1] - trace[-2]) <= 1e-13 * trace[-1]:
            break
    monotone = all(b >= a * (1 - 1e-12) for a, b in zip(trace, trace[1:]))
    eig = float(sla.eigh(S, B, eigvals_only=True)[-1])
    return CTEstimate(max(max(ratios), max(trace)), float(max(ratios)), ratios, trace, eig,
                      coef, monotone)


def ct_time_sweep(params: SystemParams, sgrid: SpaceGrid, dt: float, Ts=(0.25, 0.5, 0.75),
                  C1: float = 1.0, samples: int = 8, seed: int = 0) -> dict:
    """Constant versus horizon at fixed step, with a fit ``log CT = a + b / T``."""
    rows = []
    for T in Ts:
        M = max(1, int(round(T / dt)))
        est = estimate_CT(params, sgrid, TimeGrid(M * dt, M), samples, C1,
                          rng=np.random.default_rng(seed))
        rows.append({"T": M * dt, "M": M, "CT": est.CT, "CT2": est.CT2})
    invT = np.array([1 / r["T"] for r in rows])
    logC = np.log([r["CT"] for r in rows])
    b, a = np.polyfit(invT, logC, 1) if len(rows) > 1 else (float("nan"), float(logC[0]))
    return {"rows": rows, "fit_intercept": float(a), "fit_slope_invT": float(b)}


# decay study -------------------------------------------------------------------

@dataclass
class DecayRow:
    M: int
    dt: float
    C1: float
    phi: float
    sqrt_phi: float
    final_ratio: float
    stage_norm: float
    smoothing_ratio: float
    control_cost: float
    cost_ratio: float
    iterations: int
    converged: bool


@dataclass
class DecayStudy:
    rows: list
    slope: float
    intercept: float
    fitted_C: float
    floor: float | None
    used: list
    excluded: list
    scaled_slope: float = float("nan")
    cost_bound: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "fitted_C": self.fitted_C,
                "floor": self.floor, "scaled_slope": self.scaled_slope, "used_rows": self.used, "excluded_rows": self.excluded,
                "cost_bound": self.cost_bound, "n_rows": len(self.rows)}

    COLUMNS = ("M", "dt", "C1", "phi", "sqrt_phi", "final_ratio", "stage_norm",
               "smoothing_ratio", "control_cost", "cost_ratio", "iterations", "converged")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                d = asdict(r)
                w.writerow([repr(d[c]) if isinstance(d[c], float) else d[c] for c in self.COLUMNS])

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def phi_sweep_points(M: int, T: float, phis) -> list:
    """Exponential penalties hitting each ``phi`` exactly at step ``T/M``."""
    dt = T / M
    return [(M, PenaltyFn("exponential", C1=PenaltyFn.C1_for(p, dt))) for p in phis]


def dt_sweep_points(Ms, C1: float) -> list:
    return [(M, PenaltyFn("exponential", C1=C1)) for M in Ms]


def default_initial_data(sgrid: SpaceGrid):
    x = sgrid.x
    return np.sin(np.pi * x) + 0.5 * np.sin(3 * np.pi * x), 4 * x * (1 - x)


def _floor_start(log_r, log_s, flat_slope):
    """Index from which the small-phi end of the curve is flat."""
    k = len(log_r)
    start = k
    while start > 1:
        ds = log_s[start - 1] - log_s[start - 2]
        local = (log_r[start - 1] - log_r[start - 2]) / ds if ds != 0 else 0.0
        if local >= flat_slope:
            break
        start -= 1
    return start if start < k else None


def fit_decay(rows, flat_slope: float = 0.25):
    """Least-squares slope of log final ratio against log sqrt(phi).

    Rows are ordered by decreasing ``phi``; a trailing run of points whose
    local slope falls below ``flat_slope`` is treated as the saturation
    floor and left out of the fit, as are non-converged runs.
    """
    ok = [i for i, r in enumerate(rows) if r.converged and r.final_ratio > 0]
    excluded = [i for i in range(len(rows)) if i not in ok]
    order = sorted(ok, key=lambda i: -rows[i].phi)
    log_r = np.log([rows[i].final_ratio for i in order])
    log_s = np.log([rows[i].sqrt_phi for i in order])
    floor = None
    if len(order) >= 3:
        start = _floor_start(log_r, log_s, flat_slope)
        if start is not None and start >= 2:
            floor = float(np.exp(log_r[start - 1]))
            excluded += order[start:]
            order, log_r, log_s = order[:start], log_r[:start], log_s[:start]
    if len(order) >= 2 and np.ptp(log_s) > 0:
        slope, intercept = np.polyfit(log_s, log_r, 1)
    else:
        slope, intercept = float("nan"), float("nan")
    fitted_C = float(np.exp(np.max(log_r - log_s))) if len(order) else float("nan")
    # same fit against the stage-one penalty dt * phi, which the realized
    # final norms follow more closely when dt varies across the sweep
    log_st = np.log([math.sqrt(rows[i].dt * rows[i].phi) for i in order])
    scaled = float(np.polyfit(log_st, log_r, 1)[0]) if len(order) >= 2 and np.ptp(log_st) > 0 \
        else float("nan")
    return (float(slope), float(intercept), fitted_C, floor, sorted(order), sorted(excluded),
            scaled)


def decay_study(points, params: SystemParams, sgrid: SpaceGrid, T: float, config: HUMConfig,
                u0=None, v0=None, threads: int = 1, cost_check: bool = True) -> DecayStudy:
    """Run the two-stage controller at each ``(M, penalty)`` point and fit the decay.

    ``cost_check`` also computes, from the dense Gramians on the coarsest
    stage grid, the constant ``CT`` with ``|h| <= CT |y0|`` valid for every
    penalty at least the smallest scaled penalty of the sweep (only when all
    points share one step).
    """
    if u0 is None or v0 is None:
        u0, v0 = default_initial_data(sgrid)
    if config.T0 is None:
        raise ConfigError("decay study needs the stage horizon T0")

    def run(point):
        M, pen = point
        tg = TimeGrid(T, M)
        rep = two_stage_control(u0, v0, pen, config, params, sgrid, tg)
        return DecayRow(M=M, dt=tg.dt, C1=float(pen.C1), phi=rep.phi, sqrt_phi=rep.sqrt_phi,
                        final_ratio=rep.final_ratio, stage_norm=rep.stage_norm_negative,
                        smoothing_ratio=rep.smoothing_ratio, control_cost=rep.control_cost,
                        cost_ratio=rep.control_cost / rep.initial_L2 if rep.initial_L2 else 0.0,
                        iterations=rep.iterations, converged=rep.converged)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run, points))
    else:
        rows = [run(p) for p in points]
    slope, intercept, C, floor, used, excluded, scaled = fit_decay(rows)
    study = DecayStudy(rows, slope, intercept, C, floor, used, excluded, scaled)
    Ms = {r.M for r in rows}
    if cost_check and len(Ms) == 1:
        M = Ms.pop()
        dt = T / M
        M0 = stage_steps(config.T0, dt, M)
        stage = TimeGrid(M0 * dt, M0)
        phi_min = min(r.phi for r in rows) * dt
        S, G, Kh = gramians(params, sgrid, stage)
        CT2 = float(sla.eigh(S, G + phi_min * Kh, eigvals_only=True)[-1])
        CT = math.sqrt(CT2)
        worst = max(r.cost_ratio for r in rows)
        study.cost_bound = {"CT": CT, "scaled_phi_min": phi_min, "max_cost_ratio": worst,
                            "holds": bool(worst <= CT * (1 + 1e-8))}
    return study
