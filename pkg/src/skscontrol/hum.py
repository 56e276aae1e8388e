"""Penalized HUM control synthesis and the two-stage controller.

The unknown is the adjoint final datum ``x = (pT, qT)``.  With ``K =
diag(-L2, B4)`` and ``h``-weighted pairings the functional is

    J(x) = 1/2 sum_n dt |chi q^{n+1/2}|^2 + phi/2 <x, K x> + <y0, z^{1/2}>

and its gradient, in the pairing ``<a, b>_K = h a^T K b``, is
``K^{-1} y^M + phi x`` where ``y^M`` is the final state reached from ``y0``
under the control ``chi q``.  The minimizer satisfies ``y^M = -phi K x``.
Conjugate gradients run in the ``K`` inner product, where the Hessian is
``K^{-1} Gram + phi I``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError
from .spacedisc import SpaceGrid, pair_norm, solve_stiffness, stiffness_matrix
from .system import (StateTrajectory, StepOperator, SystemParams, _step_for, march_adjoint,
                     march_forward)
from .timegrid import DualSeq, PrimalSeq, TimeGrid


@dataclass(frozen=True)
class PenaltyFn:
    """Penalty weight as a function of the time step.

    ``exponential``: ``exp(-C1 / dt**0.1)``; ``scaled``: ``dt`` times that;
    ``constant``: ``value``; ``table``: lookup in ``table`` (pairs of
    ``(dt, phi)``, matched with a relative tolerance of 1e-9).
    """
    kind: str = "exponential"
    C1: float = 1.0
    value: float = 1e-4
    table: tuple = ()

    def __post_init__(self):
        if self.kind not in ("exponential", "scaled", "constant", "table"):
            raise ConfigError(f"unknown penalty kind {self.kind!r}")
        if self.kind in ("exponential", "scaled") and not self.C1 > 0:
            raise ConfigError("C1 must be positive")
        if self.kind == "constant" and not self.value > 0:
            raise ConfigError("constant penalty must be positive")
        object.__setattr__(self, "table", tuple((float(a), float(b)) for a, b in self.table))

    def __call__(self, dt: float) -> float:
        if self.kind == "exponential":
            return math.exp(-self.C1 / dt ** 0.1)
        if self.kind == "scaled":
            return dt * math.exp(-self.C1 / dt ** 0.1)
        if self.kind == "constant":
            return float(self.value)
        for key, val in self.table:
            if math.isclose(key, dt, rel_tol=1e-9):
                return val
        raise ConfigError(f"penalty table has no entry for dt={dt}")

    @staticmethod
    def C1_for(phi: float, dt: float) -> float:
        """The ``C1`` giving exponential penalty ``phi`` at step ``dt``."""
        return -math.log(phi) * dt ** 0.1


def _phi_value(penalty, dt):
    phi = penalty(dt) if callable(penalty) else float(penalty)
    if not phi > 0:
        raise ConfigError(f"penalty must be positive, got {phi}")
    return phi


@dataclass(frozen=True)
class HUMConfig:
    cg_tol: float = 1e-8
    max_iter: int = 1000
    T0: float | None = None

    def __post_init__(self):
        if not (0 < self.cg_tol < 1):
            raise ConfigError("cg_tol must lie in (0, 1)")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be positive")
        if self.T0 is not None and not self.T0 > 0:
            raise ConfigError("T0 must be positive")


class HUMProblem:
    """Linear algebra of the penalized functional on one time grid."""

    def __init__(self, params: SystemParams, sgrid: SpaceGrid, tgrid: TimeGrid, phi: float,
                 step: StepOperator | None = None):
        self.params, self.sgrid, self.tgrid, self.phi = params, sgrid, tgrid, float(phi)
        self.step = _step_for(step, params, sgrid, tgrid)
        self.K = sp.block_diag([stiffness_matrix(sgrid, "H1"),
                                stiffness_matrix(sgrid, "H2")], format="csr")
        self.N = sgrid.N
        self.chi = params.mask(sgrid)

    # pairings
    def k_inner(self, a, b) -> float:
        return self.sgrid.h * float(a @ (self.K @ b))

    def l2_inner(self, a, b) -> float:
        return self.sgrid.h * float(np.dot(a, b))

    def k_solve(self, y):
        N = self.N
        return np.concatenate([solve_stiffness(self.sgrid, y[:N], "H1"),
                               solve_stiffness(self.sgrid, y[N:], "H2")])

    # marches
    def adjoint(self, x):
        return march_adjoint(self.step, x, self.tgrid.M)

    def control(self, Z):
        """Masked fourth-order adjoint component on half steps ``0..M-1``."""
        return self.chi * Z[:-1, self.N:]

    def final_state(self, y0, x):
        Z = self.adjoint(x)
        Y = march_forward(self.step, y0, self.control(Z), self.tgrid.M)
        return Y[-1], Z

    def observation(self, Z) -> float:
        return self.tgrid.dt * self.sgrid.h * float(np.sum(self.control(Z) ** 2))

    def J(self, x, y0) -> float:
        Z = self.adjoint(x)
        return (0.5 * self.observation(Z) + 0.5 * self.phi * self.k_inner(x, x)
                + self.l2_inner(y0, Z[0]))

    def grad(self, x, y0):
        """Gradient in the ``K`` pairing."""
        yM, _ = self.final_state(y0, x)
        return self.k_solve(yM) + self.phi * x

    def hessian(self, d):
        return self.grad(d, np.zeros_like(d))


def _stack(sgrid, a, b):
    return np.concatenate([sgrid.check_field(a), sgrid.check_field(b)])


def eval_J(pT, qT, u0, v0, penalty, params: SystemParams, sgrid: SpaceGrid, tgrid: TimeGrid,
           step: StepOperator | None = None) -> float:
    """Value of the penalized functional at ``(pT, qT)``."""
    prob = HUMProblem(params, sgrid, tgrid, _phi_value(penalty, tgrid.dt), step)
    return prob.J(_stack(sgrid, pT, qT), _stack(sgrid, u0, v0))


def grad_J(pT, qT, u0, v0, penalty, params: SystemParams, sgrid: SpaceGrid, tgrid: TimeGrid,
           step: StepOperator | None = None):
    """Riesz representative of the derivative of ``J`` in the H1 x H2 metric."""
    prob = HUMProblem(params, sgrid, tgrid, _phi_value(penalty, tgrid.dt), step)
    g = prob.grad(_stack(sgrid, pT, qT), _stack(sgrid, u0, v0))
    return g[:sgrid.N], g[sgrid.N:]


@dataclass
class HUMResult:
    phatT: np.ndarray
    qhatT: np.ndarray
    control: DualSeq
    trajectory: StateTrajectory
    J_value: float
    iterations: int
    converged: bool
    phi: float
    final_norms: dict
    control_cost: float
    identity_residual: float
    cost_diagnostics: dict
    history: list = field(default_factory=list)
    monotone: bool = True

    def summary(self) -> dict:
        return {"J": self.J_value, "iterations": self.iterations, "converged": self.converged,
                "phi": self.phi, "final_norms": self.final_norms,
                "control_cost": self.control_cost, "identity_residual": self.identity_residual,
                "cost_diagnostics": self.cost_diagnostics, "monotone": self.monotone}

    def write_history_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "J", "grad_norm"])
            for it, Jv, g in self.history:
                w.writerow([it, repr(float(Jv)), repr(float(g))])

    def write_summary_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def _cg(prob: HUMProblem, y0, tol, max_iter):
    """Conjugate gradients in the ``K`` inner product, starting from zero.

    Stops once the gradient norm is below ``tol`` times both the initial
    gradient norm and the current final-state norm.
    """
    x = np.zeros(2 * prob.N)
    g0 = prob.grad(x, y0)
    r = -g0
    rr = prob.k_inner(r, r)
    r0 = math.sqrt(rr)
    history = [(0, 0.0, r0)]
    if r0 == 0.0:
        return x, 0, True, history, True
    d = r.copy()
    J_prev, monotone = 0.0, True
    for it in range(1, max_iter + 1):
        Hd = prob.hessian(d)
        curv = prob.k_inner(d, Hd)
        alpha = rr / curv
        x = x + alpha * d
        r = r - alpha * Hd
        rr_new = prob.k_inner(r, r)
        J_k = 0.5 * prob.k_inner(x, g0 - r)
        history.append((it, J_k, math.sqrt(rr_new)))
        if J_k > J_prev + 1e-12 * max(abs(J_prev), abs(J_k)):
            monotone = False
        J_prev = J_k
        # -r - phi x is K^{-1} y^M for the current iterate, so the second
        # test bounds the final-state identity residual relative to y^M
        final_size = math.sqrt(max(prob.k_inner(r + prob.phi * x, r + prob.phi * x), 0.0))
        if math.sqrt(rr_new) <= tol * min(r0, final_size):
            return x, it, True, history, monotone
        d = r + (rr_new / rr) * d
        rr = rr_new
    return x, max_iter, False, history, monotone


def solve_hum(u0, v0, penalty, config: HUMConfig, params: SystemParams, sgrid: SpaceGrid,
              tgrid: TimeGrid, step: StepOperator | None = None) -> HUMResult:
    """Minimize the penalized functional and build the corresponding control.

    Non-convergence within ``config.max_iter`` is flagged on the result,
    not raised.
    """
    phi = _phi_value(penalty, tgrid.dt)
    prob = HUMProblem(params, sgrid, tgrid, phi, step)
    y0 = _stack(sgrid, u0, v0)
    x, iters, conv, hist, mono = _cg(prob, y0, config.cg_tol, config.max_iter)

    # independent post-processing: fresh marches from the minimizer
    N, M, dt, hx = sgrid.N, tgrid.M, tgrid.dt, sgrid.h
    Z = prob.adjoint(x)
    ctrl = np.zeros((M + 1, N))
    ctrl[:M] = prob.control(Z)
    Y = march_forward(prob.step, y0, ctrl[:M], M)
    traj = StateTrajectory(sgrid, tgrid, PrimalSeq(tgrid, Y[:, :N]), PrimalSeq(tgrid, Y[:, N:]))
    yM = Y[-1]
    target = -phi * (prob.K @ x)
    diff = yM - target
    norm_yM = pair_norm(sgrid, yM[:N], yM[N:], "Hm1xHm2")
    norm_diff = pair_norm(sgrid, diff[:N], diff[N:], "Hm1xHm2")
    ident = norm_diff / norm_yM if norm_yM > 0 else norm_diff
    cost = math.sqrt(dt * hx * float(np.sum(ctrl[:M] ** 2)))
    y0_norm = pair_norm(sgrid, y0[:N], y0[N:])
    x_norm = pair_norm(sgrid, x[:N], x[N:], "H1xH2")
    J_val = (0.5 * prob.observation(Z) + 0.5 * phi * prob.k_inner(x, x)
             + prob.l2_inner(y0, Z[0]))
    diag = {"sqrt_phi_final_data": math.sqrt(phi) * x_norm, "initial_L2": y0_norm,
            "final_data_H1xH2": x_norm,
            "cost_ratio": cost / y0_norm if y0_norm > 0 else 0.0}
    return HUMResult(
        phatT=x[:N].copy(), qhatT=x[N:].copy(), control=DualSeq(tgrid, ctrl), trajectory=traj,
        J_value=J_val, iterations=iters, converged=conv, phi=phi,
        final_norms={"L2": pair_norm(sgrid, yM[:N], yM[N:]), "Hm1xHm2": norm_yM},
        control_cost=cost, identity_residual=ident, cost_diagnostics=diag,
        history=hist, monotone=mono)


@dataclass
class TwoStageReport:
    M0: int
    phi: float
    phi_scaled: float
    sqrt_phi: float
    stage_norm_negative: float
    smoothing_ratio: float
    final_L2: float
    initial_L2: float
    control_cost: float
    converged: bool
    iterations: int
    trajectory: StateTrajectory
    control: DualSeq
    stage: HUMResult

    @property
    def final_ratio(self) -> float:
        return self.final_L2 / self.initial_L2 if self.initial_L2 > 0 else 0.0

    def summary(self) -> dict:
        return {"M0": self.M0, "phi": self.phi, "phi_scaled": self.phi_scaled,
                "sqrt_phi": self.sqrt_phi, "stage_norm_Hm1xHm2": self.stage_norm_negative,
                "smoothing_ratio": self.smoothing_ratio, "final_L2": self.final_L2,
                "initial_L2": self.initial_L2, "final_ratio": self.final_ratio,
                "control_cost": self.control_cost, "converged": self.converged,
                "iterations": self.iterations}


def stage_steps(T0: float, dt: float, M: int) -> int:
    M0 = int(math.floor(T0 / dt + 1e-9))
    if not (1 <= M0 < M):
        raise ConfigError(f"T0={T0} gives {M0} control steps out of {M}; need 1 <= M0 < M")
    return M0


def two_stage_control(u0, v0, penalty, config: HUMConfig, params: SystemParams,
                      sgrid: SpaceGrid, tgrid: TimeGrid,
                      step: StepOperator | None = None) -> TwoStageReport:
    """Control on ``[0, T0]`` with penalty ``dt * phi(dt)``, then evolve freely.

    Reports the negative-norm size reached at ``T0``, the one-step smoothing
    ratio ``sqrt(dt) |y^{M0+1}|_{H1xH2} / |y^{M0}|_{H-1xH-2}`` and the final
    L2 norm.
    """
    if config.T0 is None or not config.T0 < tgrid.T:
        raise ConfigError("two-stage control needs 0 < T0 < T")
    dt = tgrid.dt
    step = _step_for(step, params, sgrid, tgrid)
    M0 = stage_steps(config.T0, dt, tgrid.M)
    phi = _phi_value(penalty, dt)
    stage_grid = TimeGrid(M0 * dt, M0)
    res = solve_hum(u0, v0, dt * phi, config, params, sgrid, stage_grid, step)
    N, M = sgrid.N, tgrid.M
    yM0 = np.concatenate([res.trajectory.u.values[-1], res.trajectory.v.values[-1]])
    Yfree = march_forward(step, yM0, None, M - M0)
    U = np.vstack([res.trajectory.u.values, Yfree[1:, :N]])
    V = np.vstack([res.trajectory.v.values, Yfree[1:, N:]])
    traj = StateTrajectory(sgrid, tgrid, PrimalSeq(tgrid, U), PrimalSeq(tgrid, V))
    ctrl = np.zeros((M + 1, N))
    ctrl[:M0] = res.control.values[:M0]
    neg = pair_norm(sgrid, yM0[:N], yM0[N:], "Hm1xHm2")
    y1 = Yfree[1]
    smooth = math.sqrt(dt) * pair_norm(sgrid, y1[:N], y1[N:], "H1xH2") / neg if neg > 0 else 0.0
    return TwoStageReport(
        M0=M0, phi=phi, phi_scaled=dt * phi, sqrt_phi=math.sqrt(phi), stage_norm_negative=neg,
        smoothing_ratio=smooth, final_L2=pair_norm(sgrid, U[-1], V[-1]),
        initial_L2=pair_norm(sgrid, u0, v0), control_cost=res.control_cost,
        converged=res.converged, iterations=res.iterations, trajectory=traj,
        control=DualSeq(tgrid, ctrl), stage=res)
