"""Implicit-Euler solver for the coupled heat / fourth-order parabolic system.

Forward (primal grid), one step ``n -> n+1``::

    (I - dt*Gamma*L2 + dt*c*D1) u' - dt v'                       = u
    -dt u' + (I + dt*gamma*B4 + dt*D3 + dt*a*L2) v'              = v + dt*chi*h

The adjoint runs backwards on the dual grid as the exact transpose march
``A^T z^{n-1/2} = z^{n+1/2}`` from ``z^{M+1/2} = (pT, qT)``.  With that choice
the duality pairing between controls and observations telescopes exactly.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, DimensionError, NumericalFailure, PropertyFailure
from .spacedisc import BC, SpaceGrid, build_operator, stiffness_matrix
from .timegrid import DualSeq, PrimalSeq, TimeGrid


@dataclass(frozen=True)
class SystemParams:
    Gamma: float = 0.3
    gamma: float = 0.3
    a: float = 1.0
    c: float = 1.0
    omega: tuple = (0.2, 0.8)

    def __post_init__(self):
        object.__setattr__(self, "omega", tuple(float(w) for w in self.omega))
        for name in ("Gamma", "gamma", "a", "c"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        if self.Gamma <= 0 or self.gamma <= 0:
            raise ConfigError("Gamma and gamma must be positive")
        if self.a < 0:
            raise ConfigError("a must be nonnegative")
        wa, wb = self.omega
        if not (0 < wa < wb < 1):
            raise ConfigError(f"omega must satisfy 0 < a < b < 1, got {self.omega}")

    def mask(self, grid: SpaceGrid) -> np.ndarray:
        """Nodal indicator of the control region (strict inequalities)."""
        x = grid.x
        return ((x > self.omega[0]) & (x < self.omega[1])).astype(float)


class StepOperator:
    """Assembled step matrix with a reusable sparse LU factorization."""

    def __init__(self, params: SystemParams, sgrid: SpaceGrid, tgrid: TimeGrid):
        self.params, self.sgrid, self.tgrid = params, sgrid, tgrid
        N, dt = sgrid.N, tgrid.dt
        I = sp.identity(N, format="csr")
        L2 = build_operator(sgrid, 2).matrix
        D1 = build_operator(sgrid, 1).matrix
        D3 = build_operator(sgrid, 3, BC.CLAMPED).matrix
        B4 = build_operator(sgrid, 4, BC.CLAMPED).matrix
        p = params
        heat = I - dt * p.Gamma * L2 + dt * p.c * D1
        ks = I + dt * p.gamma * B4 + dt * D3 + dt * p.a * L2
        self.matrix = sp.bmat([[heat, -dt * I], [-dt * I, ks]], format="csc")
        self.chi = params.mask(sgrid)
        try:
            self.lu = spla.splu(self.matrix)
        except RuntimeError as exc:
            raise NumericalFailure("step matrix is singular",
                                   diagnostics={"dt": dt, "N": N, **params.__dict__}) from exc

    @property
    def N(self):
        return self.sgrid.N

    def solve(self, rhs):
        return self.lu.solve(np.asarray(rhs, dtype=float))

    def solve_transpose(self, rhs):
        return self.lu.solve(np.asarray(rhs, dtype=float), trans="T")


def assemble_step_matrix(params: SystemParams, sgrid: SpaceGrid, tgrid: TimeGrid) -> StepOperator:
    return StepOperator(params, sgrid, tgrid)


def _step_for(step, params, sgrid, tgrid):
    if step is None:
        return StepOperator(params, sgrid, tgrid)
    if step.sgrid != sgrid or step.tgrid.dt != tgrid.dt or step.params != params:
        raise ConfigError("supplied step operator was built for different grids or parameters")
    return step


@dataclass
class StateTrajectory:
    """A pair of field sequences on one time grid.

    Forward runs hold ``(u, v)`` as primal sequences; adjoint runs hold
    ``(p, q)`` as dual sequences.  ``first``/``second`` give uniform access.
    """
    sgrid: SpaceGrid
    tgrid: TimeGrid
    first: PrimalSeq | DualSeq
    second: PrimalSeq | DualSeq
    kind: str = "forward"

    @property
    def u(self):
        return self.first

    @property
    def v(self):
        return self.second

    @property
    def p(self):
        return self.first

    @property
    def q(self):
        return self.second

    def stacked(self) -> np.ndarray:
        """Array of shape ``(M+1, 2N)``."""
        return np.concatenate([self.first.values, self.second.values], axis=1)

    def to_csv(self, path):
        names = ("u", "v") if self.kind == "forward" else ("p", "q")
        times = self.tgrid.primal_points if self.kind == "forward" else self.tgrid.dual_points
        x = self.sgrid.x
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "t", "x", *names])
            A, B = self.first.values, self.second.values
            for n, t in enumerate(times):
                for i, xi in enumerate(x):
                    w.writerow([n, repr(float(t)), repr(float(xi)), repr(float(A[n, i])),
                                repr(float(B[n, i]))])


def _as_control(control, sgrid, tgrid):
    shape = (tgrid.M + 1, sgrid.N)
    if control is None:
        return np.zeros(shape)
    vals = control.values if isinstance(control, DualSeq) else np.asarray(control, dtype=float)
    if vals.shape != shape:
        raise DimensionError(f"control must have shape {shape}, got {vals.shape}")
    out = np.nan_to_num(vals[:-1], nan=0.0)
    return np.vstack([out, np.zeros((1, sgrid.N))])


def march_forward(step: StepOperator, y0: np.ndarray, control: np.ndarray | None = None,
                  nsteps: int | None = None) -> np.ndarray:
    """Raw forward march on stacked states ``(2N,)`` or ``(2N, k)``.

    ``control`` holds the heat-free source for the fourth-order block at each
    half step, shape ``(nsteps, N)`` (or ``(nsteps, N, k)``); it is masked here.
    """
    N, dt = step.N, step.tgrid.dt
    nsteps = step.tgrid.M if nsteps is None else nsteps
    y = np.array(y0, dtype=float)
    out = np.empty((nsteps + 1,) + y.shape)
    out[0] = y
    chi = step.chi if y.ndim == 1 else step.chi[:, None]
    for n in range(nsteps):
        rhs = y.copy()
        if control is not None:
            rhs[N:] += dt * chi * control[n]
        y = step.solve(rhs)
        if not np.all(np.isfinite(y)):
            raise NumericalFailure("non-finite state in forward march", step=n + 1)
        out[n + 1] = y
    return out


def march_adjoint(step: StepOperator, zT: np.ndarray, nsteps: int | None = None) -> np.ndarray:
    """Raw transpose march; entry ``n`` of the result is ``z^{n+1/2}``."""
    M = step.tgrid.M if nsteps is None else nsteps
    z = np.array(zT, dtype=float)
    out = np.empty((M + 1,) + z.shape)
    out[M] = z
    for n in range(M, 0, -1):
        z = step.solve_transpose(z)
        if not np.all(np.isfinite(z)):
            raise NumericalFailure("non-finite state in adjoint march", step=n - 1)
        out[n - 1] = z
    return out


def forward_solve(u0, v0, control, params: SystemParams, sgrid: SpaceGrid, tgrid: TimeGrid,
                  step: StepOperator | None = None) -> StateTrajectory:
    """March the controlled system from ``(u0, v0)`` over the whole grid.

    ``control`` is a :class:`DualSeq` of fields (or an ``(M+1, N)`` array, or
    None for no control); only half steps ``0..M-1`` are used and the
    control-region mask is applied here.
    """
    step = _step_for(step, params, sgrid, tgrid)
    y0 = np.concatenate([sgrid.check_field(u0), sgrid.check_field(v0)])
    h = _as_control(control, sgrid, tgrid)
    Y = march_forward(step, y0, h)
    N = sgrid.N
    return StateTrajectory(sgrid, tgrid, PrimalSeq(tgrid, Y[:, :N]), PrimalSeq(tgrid, Y[:, N:]))


def adjoint_solve(pT, qT, params: SystemParams, sgrid: SpaceGrid, tgrid: TimeGrid,
                  step: StepOperator | None = None) -> StateTrajectory:
    """Backward transpose march from ``(pT, qT)`` placed at ``T + dt/2``."""
    step = _step_for(step, params, sgrid, tgrid)
    zT = np.concatenate([sgrid.check_field(pT), sgrid.check_field(qT)])
    Z = march_adjoint(step, zT)
    N = sgrid.N
    return StateTrajectory(sgrid, tgrid, DualSeq(tgrid, Z[:, :N]), DualSeq(tgrid, Z[:, N:]),
                           kind="adjoint")


def adjoint_pde_march(pT, qT, params: SystemParams, sgrid: SpaceGrid, tgrid: TimeGrid):
    """Independent backward discretization with sign-flipped odd derivatives.

    Uses ``-c*D1`` and ``-D3`` in place of the transposed stencils; it
    differs from :func:`adjoint_solve` only in the boundary rows of ``D3``.
    Used as a consistency reference.
    """
    N, dt = sgrid.N, tgrid.dt
    I = sp.identity(N, format="csr")
    L2 = build_operator(sgrid, 2).matrix
    D1 = build_operator(sgrid, 1).matrix
    D3 = build_operator(sgrid, 3, BC.CLAMPED).matrix
    B4 = build_operator(sgrid, 4, BC.CLAMPED).matrix
    p = params
    heat = I - dt * p.Gamma * L2 - dt * p.c * D1
    ks = I + dt * p.gamma * B4 - dt * D3 + dt * p.a * L2
    lu = spla.splu(sp.bmat([[heat, -dt * I], [-dt * I, ks]], format="csc"))
    z = np.concatenate([pT, qT]).astype(float)
    out = np.empty((tgrid.M + 1, 2 * N))
    out[-1] = z
    for n in range(tgrid.M, 0, -1):
        z = lu.solve(z)
        out[n - 1] = z
    return StateTrajectory(sgrid, tgrid, DualSeq(tgrid, out[:, :N]), DualSeq(tgrid, out[:, N:]),
                           kind="adjoint")


def recursion_residual(traj: StateTrajectory, control, params: SystemParams,
                       step: StepOperator | None = None) -> np.ndarray:
    """Relative residual of each forward step after substituting the states back."""
    sgrid, tgrid = traj.sgrid, traj.tgrid
    step = _step_for(step, params, sgrid, tgrid)
    Y = traj.stacked()
    h = _as_control(control, sgrid, tgrid)
    N, dt = sgrid.N, tgrid.dt
    A = step.matrix
    res = np.empty(tgrid.M)
    for n in range(tgrid.M):
        src = Y[n].copy()
        src[N:] += dt * step.chi * h[n]
        Ay = A @ Y[n + 1]
        scale = np.abs(A) @ np.abs(Y[n + 1]) + np.abs(src)
        res[n] = np.max(np.abs(Ay - src)) / max(np.max(scale), np.finfo(float).tiny)
    return res


def duality_residual(u0, v0, pT, qT, control, params: SystemParams, sgrid: SpaceGrid,
                     tgrid: TimeGrid, step: StepOperator | None = None) -> dict:
    """Both sides of the control/observation duality and their mismatch.

    ``sum_n dt (chi h, q)^{n+1/2} = (u^M, pT) + (v^M, qT) - (u0, p^{1/2}) - (v0, q^{1/2})``
    with ``h``-weighted pairings.  The relative residual is scaled by the sum
    of magnitudes of all terms.
    """
    step = _step_for(step, params, sgrid, tgrid)
    fw = forward_solve(u0, v0, control, params, sgrid, tgrid, step)
    ad = adjoint_solve(pT, qT, params, sgrid, tgrid, step)
    hx, dt, M = sgrid.h, tgrid.dt, tgrid.M
    h = _as_control(control, sgrid, tgrid)
    obs_terms = dt * hx * np.sum(step.chi * h[:M] * ad.q.values[:M], axis=1)
    lhs = obs_terms.sum()
    terms = np.array([
        hx * np.dot(fw.u.values[M], pT), hx * np.dot(fw.v.values[M], qT),
        -hx * np.dot(u0, ad.p.values[0]), -hx * np.dot(v0, ad.q.values[0])])
    rhs = terms.sum()
    scale = np.abs(obs_terms).sum() + np.abs(terms).sum()
    absr = abs(lhs - rhs)
    return {"lhs": float(lhs), "rhs": float(rhs), "absolute": float(absr),
            "relative": float(absr / scale) if scale > 0 else float(absr), "scale": float(scale)}


# energy estimates -----------------------------------------------------------

@dataclass
class EnergyReport:
    C: float
    C_normal: float
    C_regular: float
    dt: float
    max_ratio_normal: float
    max_ratio_regular: float
    iterated_ok: bool
    trials: int
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        tol = 1 + 1e-12
        return self.max_ratio_normal <= tol and self.max_ratio_regular <= tol and self.iterated_ok


def _energies(Z, sgrid):
    """L2 and H1xH2 energies per time index and trial; ``Z`` is ``(M+1, 2N, k)``."""
    N, hx = sgrid.N, sgrid.h
    P, Q = Z[:, :N, :], Z[:, N:, :]
    E = hx * (np.sum(P ** 2, axis=1) + np.sum(Q ** 2, axis=1))
    K1 = stiffness_matrix(sgrid, "H1").toarray()
    K2 = stiffness_matrix(sgrid, "H2").toarray()
    R = hx * (np.einsum("mik,ij,mjk->mk", P, K1, P) + np.einsum("mik,ij,mjk->mk", Q, K2, Q))
    return E, R


def _min_C_regular(Rm, Rp, Ep, dt):
    """Smallest C with ``Rm <= exp(2 C dt) (Rp + C dt Ep)``, vectorized bisection."""
    # the right side increases in C once C > -(Rp/Ep + 1/2)/dt
    lo = -(Rp / Ep + 0.5) / dt
    hi = np.maximum(np.log(np.maximum(Rm / Rp, 1e-300)) / (2 * dt), 0.0) + 1.0
    def ok(C):
        return Rm <= np.exp(2 * C * dt) * (Rp + C * dt * Ep)
    for _ in range(200):
        bad = ~ok(hi)
        if not bad.any():
            break
        hi = np.where(bad, 2 * hi + 1.0, hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        good = ok(mid)
        hi = np.where(good, mid, hi)
        lo = np.where(good, lo, mid)
    return hi


def _fit_energy_constant(Z, sgrid, dt):
    E, R = _energies(Z, sgrid)
    Em, Ep = E[:-1], E[1:]  # n-1/2 versus n+1/2
    Rm, Rp = R[:-1], R[1:]
    live = Ep > 0
    if not live.any():
        return 0.0, 0.0, E, R
    C_norm = float(np.max(np.log(Em[live] / Ep[live])) / (2 * dt))
    C_reg = float(np.max(_min_C_regular(Rm[live], Rp[live], Ep[live], dt)))
    return C_norm, C_reg, E, R


def energy_ratios(Z, sgrid, dt, C):
    """Worst per-step ratios ``lhs/rhs`` of both inequalities for a given C."""
    E, R = _energies(Z, sgrid)
    Em, Ep, Rm, Rp = E[:-1], E[1:], R[:-1], R[1:]
    live = Ep > 0
    if not live.any():
        return 0.0, 0.0, True
    g = np.exp(2 * C * dt)
    rn = float(np.max(Em[live] / (g * Ep[live])))
    rr = float(np.max(Rm[live] / (g * (Rp[live] + C * dt * Ep[live]))))
    # chained form: n steps separate the first dual point from index n
    steps = np.arange(Z.shape[0])[:, None]
    chain = np.all(E[0] <= np.exp(2 * C * dt * steps) * E * (1 + 1e-12) + 1e-300)
    return rn, rr, bool(chain)


def adjoint_batch(pT, qT, params, sgrid, tgrid, step=None):
    """Adjoint marches for a batch of final data of shape ``(k, N)``."""
    step = _step_for(step, params, sgrid, tgrid)
    zT = np.concatenate([np.atleast_2d(pT), np.atleast_2d(qT)], axis=1).T
    return march_adjoint(step, zT)


def energy_estimate_check(pT, qT, params: SystemParams, sgrid: SpaceGrid, tgrid: TimeGrid,
                          step: StepOperator | None = None, C: float | None = None,
                          raise_on_failure: bool = False) -> EnergyReport:
    """Fit (or verify) the one-step energy constant of the adjoint march.

    ``pT``/``qT`` may hold a batch of trials as rows.  If ``C`` is None the
    smallest constant satisfying both per-step inequalities over all trials
    and steps is fitted; otherwise the given constant is checked.  The fitted
    value can be negative when the march is strictly dissipative.
    """
    Z = adjoint_batch(pT, qT, params, sgrid, tgrid, step)
    dt = tgrid.dt
    C_norm, C_reg, _, _ = _fit_energy_constant(Z, sgrid, dt)
    C_use = max(C_norm, C_reg) if C is None else float(C)
    rn, rr, chain = energy_ratios(Z, sgrid, dt, C_use)
    rep = EnergyReport(C_use, C_norm, C_reg, dt, rn, rr, chain, Z.shape[2],
                       {"two_C_dt": 2 * C_use * dt})
    if raise_on_failure and not rep.passed:
        raise PropertyFailure(f"energy estimate violated: normal {rn:.3g}, regular {rr:.3g}")
    return rep
