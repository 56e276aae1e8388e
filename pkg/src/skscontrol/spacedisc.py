"""Finite differences on the unit interval.

Fields are stored at the interior nodes ``x_i = i*h``, ``i = 1..N``, with
``h = 1/(N+1)``; boundary values are implied by the boundary condition.
Two kinds are supported:

* ``dirichlet``: ``w = 0`` at both ends (ghost nodes ``w_0 = w_{N+1} = 0``).
* ``clamped``: ``w = w' = 0`` at both ends; the second ghost layer is
  eliminated by reflection, ``w_{-1} = w_1`` and ``w_{N+2} = w_N``.

All stencils are the standard centred second-order ones.  The reflection
ghost is exact for profiles that are even about each endpoint, so such
profiles are used when measuring convergence of the third- and fourth-order
operators.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import ConfigError, DimensionError, NumericalFailure


class BC(str, Enum):
    DIRICHLET = "dirichlet"
    CLAMPED = "clamped"


@dataclass(frozen=True)
class SpaceGrid:
    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 8:
            raise ConfigError(f"SpaceGrid needs N >= 8 interior nodes, got {self.N}")
        object.__setattr__(self, "N", int(self.N))

    @property
    def h(self) -> float:
        return 1.0 / (self.N + 1)

    @property
    def x(self) -> np.ndarray:
        return np.arange(1, self.N + 1) * self.h

    def check_field(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape[-1:] != (self.N,):
            raise DimensionError(f"field of shape {f.shape} does not live on N={self.N} nodes")
        return f


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    """Sparse banded matrix approximating ``d^order/dx^order``."""
    matrix: sp.csr_matrix
    order: int
    bc: BC
    grid: SpaceGrid

    def __call__(self, f):
        f = self.grid.check_field(f)
        if f.ndim == 1:
            return self.matrix @ f
        return (self.matrix @ f.reshape(-1, self.grid.N).T).T.reshape(f.shape)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    @property
    def bandwidth(self) -> int:
        coo = self.matrix.tocoo()
        return int(np.max(np.abs(coo.row - coo.col))) if coo.nnz else 0


_STENCILS = {
    1: {-1: -0.5, 1: 0.5},
    2: {-1: 1.0, 0: -2.0, 1: 1.0},
    3: {-2: -0.5, -1: 1.0, 1: -1.0, 2: 0.5},
    4: {-2: 1.0, -1: -4.0, 0: 6.0, 1: -4.0, 2: 1.0},
}


@lru_cache(maxsize=64)
def _assemble(N: int, order: int, bc: BC) -> sp.csr_matrix:
    h = 1.0 / (N + 1)
    st = _STENCILS[order]
    diags, offsets = [], []
    for k, w in st.items():
        diags.append(np.full(N - abs(k), w))
        offsets.append(k)
    A = sp.diags(diags, offsets, shape=(N, N), format="lil")
    if bc is BC.CLAMPED and -2 in st:
        # ghost w_{-1} = w_1 lands on row 0, w_{N+2} = w_N on row N-1
        A[0, 0] += st[-2]
        A[N - 1, N - 1] += st[2]
    A = A.tocsr() / h ** order
    A.sort_indices()
    return A


def build_operator(grid: SpaceGrid, order: int, bc: BC | str = BC.DIRICHLET) -> DiscreteOperator:
    """Centred finite-difference operator of the given derivative order.

    Orders 1 and 2 accept either boundary kind (the two coincide for them,
    since the stencils only reach the first ghost layer).  Orders 3 and 4
    need the clamped kind.
    """
    bc = BC(bc)
    if order not in _STENCILS:
        raise ConfigError(f"unsupported derivative order {order}")
    if order >= 3 and bc is not BC.CLAMPED:
        raise ConfigError(f"order {order} operator requires clamped boundary conditions")
    if grid.N < 5:
        raise ConfigError("stencil needs at least 5 nodes")
    return DiscreteOperator(_assemble(grid.N, order, bc), order, bc, grid)


# norms ----------------------------------------------------------------------

def l2_inner(grid: SpaceGrid, f, g) -> float:
    f, g = grid.check_field(f), grid.check_field(g)
    return grid.h * float(np.dot(f, g))


def _banded_upper(A: sp.spmatrix, bw: int) -> np.ndarray:
    """Upper banded storage for ``scipy.linalg.cholesky_banded``."""
    N = A.shape[0]
    ab = np.zeros((bw + 1, N))
    for k in range(bw + 1):
        ab[bw - k, k:] = A.diagonal(k)
    return ab


@lru_cache(maxsize=32)
def _stiffness_factors(N: int):
    """Banded Cholesky factors of ``-L2`` and ``B4``."""
    g = SpaceGrid(N)
    neg_lap = -build_operator(g, 2).matrix
    bilap = build_operator(g, 4, BC.CLAMPED).matrix
    try:
        c1 = sla.cholesky_banded(_banded_upper(neg_lap, 1))
        c2 = sla.cholesky_banded(_banded_upper(bilap, 2))
    except np.linalg.LinAlgError as exc:  # pragma: no cover - definite by construction
        raise NumericalFailure("stiffness matrix not positive definite") from exc
    return c1, c2


def solve_stiffness(grid: SpaceGrid, f, which: str) -> np.ndarray:
    """Solve ``-L2 w = f`` (``which='H1'``) or ``B4 w = f`` (``which='H2'``)."""
    c1, c2 = _stiffness_factors(grid.N)
    cb = {"H1": c1, "H2": c2}[which]
    f = grid.check_field(f)
    rhs = f if f.ndim == 1 else f.reshape(-1, grid.N).T
    w = sla.cho_solve_banded((cb, False), rhs)
    return w if f.ndim == 1 else w.T.reshape(f.shape)


def stiffness_matrix(grid: SpaceGrid, which: str) -> sp.csr_matrix:
    if which == "H1":
        return -build_operator(grid, 2).matrix
    if which == "H2":
        return build_operator(grid, 4, BC.CLAMPED).matrix
    raise ValueError(which)


SPACES = ("L2", "H01", "H02", "Hm1", "Hm2")


def sobolev_norm(grid: SpaceGrid, f, space: str = "L2") -> float:
    """Discrete norm of a field.

    ``H01``: ``sqrt(h f^T (-L2) f)``.  ``H02``: ``sqrt(h f^T B4 f)``.
    ``Hm1``/``Hm2``: norm of the stiffness-solve preimage in ``H01``/``H02``,
    i.e. the dual norm with respect to the ``h``-weighted pairing.
    """
    f = grid.check_field(f)
    if space == "L2":
        q = float(np.dot(f, f))
    elif space in ("H01", "H02"):
        K = stiffness_matrix(grid, "H1" if space == "H01" else "H2")
        q = float(f @ (K @ f))
    elif space in ("Hm1", "Hm2"):
        w = solve_stiffness(grid, f, "H1" if space == "Hm1" else "H2")
        q = float(np.dot(f, w))
    else:
        raise ValueError(f"unknown space {space!r}; choose from {SPACES}")
    return float(np.sqrt(grid.h * max(q, 0.0)))


def pair_norm(grid: SpaceGrid, u, v, kind: str = "L2") -> float:
    """Norm of a (heat, fourth-order) pair: ``L2``, ``H1xH2`` or ``Hm1xHm2``."""
    spaces = {"L2": ("L2", "L2"), "H1xH2": ("H01", "H02"), "Hm1xHm2": ("Hm1", "Hm2")}[kind]
    return float(np.hypot(sobolev_norm(grid, u, spaces[0]), sobolev_norm(grid, v, spaces[1])))


def poincare_check(grid: SpaceGrid, samples: int = 200, rng=None) -> dict:
    """Largest ``||f||_L2 / ||f||_H01`` over random fields and the eigen-bound.

    Returns a dict with ``max_sampled``, the exact discrete maximum (inverse
    square root of the smallest eigenvalue of ``-L2``) and the continuum
    value ``1/pi``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    # white noise sits near the top of the spectrum, so sample low sine modes
    k = np.arange(1, 9)
    modes = np.sin(np.pi * np.outer(k, grid.x))
    best = 0.0
    for _ in range(samples):
        f = (rng.standard_normal(k.size) / k ** 2) @ modes
        best = max(best, sobolev_norm(grid, f) / sobolev_norm(grid, f, "H01"))
    lam_min = 4.0 / grid.h ** 2 * np.sin(np.pi * grid.h / 2) ** 2
    return {"max_sampled": best, "discrete_bound": float(1.0 / np.sqrt(lam_min)),
            "continuum_bound": 1.0 / np.pi}
