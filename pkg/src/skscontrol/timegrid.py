"""Uniform time grids with primal and dual (half-step) points.

Primal sequences live at ``t_n = n*dt`` for ``n = 0..M``; dual sequences live
at ``t_{n+1/2}`` for ``n = 0..M``, so the last dual value sits at
``T + dt/2``, outside ``[0, T]``.  Both store ``M + 1`` payloads, which may be
scalars or spatial fields (arrays with trailing axes).

Operators that produce a sequence defined only on part of the index range
record the valid range in ``lo``/``hi`` and fill the other slots with NaN.
Asking an operator for indices outside the valid range raises
:class:`RangeError` instead of silently propagating NaN.

All the summation-by-parts identities are available as residual checks:
:func:`check_product_rules` and :func:`check_integration_by_parts`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionError, RangeError


@dataclass(frozen=True)
class TimeGrid:
    T: float
    M: int

    def __post_init__(self):
        if not (self.T > 0 and np.isfinite(self.T)):
            raise ValueError(f"T must be positive and finite, got {self.T}")
        if int(self.M) != self.M or self.M < 1:
            raise ValueError(f"M must be a positive integer, got {self.M}")
        object.__setattr__(self, "M", int(self.M))

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def primal_points(self) -> np.ndarray:
        return np.arange(self.M + 1) * self.dt

    @property
    def dual_points(self) -> np.ndarray:
        return (np.arange(self.M + 1) + 0.5) * self.dt


def _default_inner(a, b):
    """Pairing of payloads: product summed over trailing (spatial) axes."""
    prod = np.asarray(a) * np.asarray(b)
    if prod.ndim <= 1:
        return prod
    return prod.reshape(prod.shape[0], -1).sum(axis=1)


@dataclass(frozen=True, eq=False)
class _Seq:
    grid: TimeGrid
    values: np.ndarray
    lo: int = 0
    hi: int | None = None
    _kind = "seq"

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim == 0 or vals.shape[0] != self.grid.M + 1:
            raise DimensionError(
                f"{self._kind} sequence needs {self.grid.M + 1} values, got shape {vals.shape}")
        hi = self.grid.M if self.hi is None else int(self.hi)
        lo = int(self.lo)
        if not (0 <= lo <= hi <= self.grid.M):
            raise RangeError(f"invalid valid-index range [{lo}, {hi}]")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    # construction helpers
    @classmethod
    def sample(cls, grid: TimeGrid, fn: Callable[[float], object]):
        pts = grid.primal_points if cls is PrimalSeq else grid.dual_points
        return cls(grid, np.array([fn(t) for t in pts], dtype=float))

    @classmethod
    def _partial(cls, grid, lo, hi, block):
        block = np.asarray(block, dtype=float)
        vals = np.full((grid.M + 1,) + block.shape[1:], np.nan)
        vals[lo:hi + 1] = block
        return cls(grid, vals, lo, hi)

    @property
    def payload_shape(self):
        return self.values.shape[1:]

    def need(self, lo, hi):
        if lo < self.lo or hi > self.hi:
            raise RangeError(
                f"{self._kind} sequence valid on [{self.lo}, {self.hi}], "
                f"operator needs [{lo}, {hi}]")
        return self.values

    def _combine(self, other, op):
        if isinstance(other, _Seq):
            if type(other) is not type(self) or other.grid != self.grid:
                raise DimensionError("cannot combine sequences on different grids or meshes")
            a, b = self.values, other.values
            while a.ndim < b.ndim:
                a = a[..., None]
            while b.ndim < a.ndim:
                b = b[..., None]
            lo, hi = max(self.lo, other.lo), min(self.hi, other.hi)
            with np.errstate(invalid="ignore"):
                out = op(a, b)
            return type(self)._partial(self.grid, lo, hi, out[lo:hi + 1])
        with np.errstate(invalid="ignore"):
            out = op(self.values, other)
        return type(self)._partial(self.grid, self.lo, self.hi, out[self.lo:self.hi + 1])

    def __add__(self, other):
        return self._combine(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __rsub__(self, other):
        return self._combine(other, lambda a, b: b - a)

    def __mul__(self, other):
        return self._combine(other, np.multiply)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._combine(other, np.divide)

    def __pow__(self, k):
        return self._combine(k, np.power)

    def __neg__(self):
        return self * -1.0

    def __getitem__(self, n):
        self.need(n, n)
        return self.values[n]


class PrimalSeq(_Seq):
    """Values at ``t_n``, ``n = 0..M``."""
    _kind = "primal"


class DualSeq(_Seq):
    """Values at ``t_{n+1/2}``, ``n = 0..M`` (index ``n`` stores ``n+1/2``)."""
    _kind = "dual"


def _check_kind(u, cls):
    if not isinstance(u, cls):
        raise DimensionError(f"expected {cls.__name__}, got {type(u).__name__}")


def integral_primal(u: PrimalSeq):
    """``sum_{n=1}^{M} dt * u^n``; ``u^0`` is ignored."""
    _check_kind(u, PrimalSeq)
    vals = u.need(1, u.grid.M)
    return u.grid.dt * vals[1:].sum(axis=0)


def integral_dual(u: DualSeq):
    """``sum_{n=0}^{M-1} dt * u^{n+1/2}``; the value at ``T + dt/2`` is ignored."""
    _check_kind(u, DualSeq)
    vals = u.need(0, u.grid.M - 1)
    return u.grid.dt * vals[:-1].sum(axis=0)


# translations ---------------------------------------------------------------
#
# Each operator maps target index n to source indices n + a (and n + b for the
# differences).  The target is valid wherever all its source indices are, so
# partially valid inputs give partially valid outputs; an empty result is a
# RangeError.

def _apply(u, src_cls, dst_cls, span, shifts, fn):
    _check_kind(u, src_cls)
    lo = max(span[0], *(u.lo - a for a in shifts))
    hi = min(span[1], *(u.hi - a for a in shifts))
    if lo > hi:
        raise RangeError(f"{u._kind} sequence valid on [{u.lo}, {u.hi}] leaves nothing of "
                         f"the target range [{span[0]}, {span[1]}]")
    parts = [u.values[lo + a:hi + a + 1] for a in shifts]
    return dst_cls._partial(u.grid, lo, hi, fn(*parts))


def shift_up(u: PrimalSeq) -> DualSeq:
    """Primal to dual: value at ``n+1/2`` is ``u^{n+1}``, ``n = 0..M-1``."""
    return _apply(u, PrimalSeq, DualSeq, (0, u.grid.M - 1), (1,), lambda a: a)


def shift_down(u: PrimalSeq) -> DualSeq:
    """Primal to dual: value at ``n+1/2`` is ``u^n``, ``n = 0..M-1``."""
    return _apply(u, PrimalSeq, DualSeq, (0, u.grid.M - 1), (0,), lambda a: a)


def dual_shift_up(u: DualSeq) -> PrimalSeq:
    """Dual to primal: value at ``n`` is ``u^{n+1/2}``, ``n = 1..M``."""
    return _apply(u, DualSeq, PrimalSeq, (1, u.grid.M), (0,), lambda a: a)


def dual_shift_down(u: DualSeq) -> PrimalSeq:
    """Dual to primal: value at ``n`` is ``u^{n-1/2}``, ``n = 1..M``."""
    return _apply(u, DualSeq, PrimalSeq, (1, u.grid.M), (-1,), lambda a: a)


_TRANSLATIONS = {
    ("plus", "primal->dual"): shift_up,
    ("minus", "primal->dual"): shift_down,
    ("plus", "dual->primal"): dual_shift_up,
    ("minus", "dual->primal"): dual_shift_down,
}


def translate(u, direction: str, grid_side: str):
    """Dispatch to one of the four translation operators.

    ``direction`` is ``"plus"`` or ``"minus"``; ``grid_side`` is
    ``"primal->dual"`` or ``"dual->primal"``.
    """
    try:
        fn = _TRANSLATIONS[(direction, grid_side)]
    except KeyError:
        raise ValueError(f"unknown translation ({direction!r}, {grid_side!r})") from None
    return fn(u)


def diff_forward(u: PrimalSeq) -> DualSeq:
    """``(u^{n+1} - u^n)/dt`` at ``n+1/2``, ``n = 0..M-1``."""
    dt = u.grid.dt
    return _apply(u, PrimalSeq, DualSeq, (0, u.grid.M - 1), (1, 0), lambda a, b: (a - b) / dt)


def diff_backward(u: DualSeq) -> PrimalSeq:
    """``(u^{n+1/2} - u^{n-1/2})/dt`` at ``n``, ``n = 1..M``."""
    dt = u.grid.dt
    return _apply(u, DualSeq, PrimalSeq, (1, u.grid.M), (0, -1), lambda a, b: (a - b) / dt)


# identity checks ------------------------------------------------------------

@dataclass
class Residual:
    absolute: float
    relative: float
    scale: float


@dataclass
class ResidualReport:
    residuals: dict[str, Residual] = field(default_factory=dict)

    @property
    def max_absolute(self) -> float:
        return max((r.absolute for r in self.residuals.values()), default=0.0)

    @property
    def max_relative(self) -> float:
        return max((r.relative for r in self.residuals.values()), default=0.0)

    def as_dict(self):
        return {k: {"absolute": r.absolute, "relative": r.relative, "scale": r.scale}
                for k, r in self.residuals.items()}


def _residual(lhs, rhs, scale) -> Residual:
    lhs, rhs = np.asarray(lhs, dtype=float), np.asarray(rhs, dtype=float)
    absr = float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0
    sc = float(np.max(scale)) if np.size(scale) else 0.0
    rel = absr / sc if sc > 0 else absr
    return Residual(absr, rel, sc)


def _valid(seq: _Seq):
    return seq.values[seq.lo:seq.hi + 1]


def check_product_rules(f: DualSeq, g1: DualSeq, g2: DualSeq) -> ResidualReport:
    """Residuals of the backward-difference product and square rules.

    Checks, on ``n = 1..M``::

        Db(g1 g2) = up(g1) Db(g2) + Db(g1) down(g2)
        Db(g1 g2) = down(g1) Db(g2) + Db(g1) up(g2)
        up(f) Db(f)   = Db(f^2)/2 + dt/2 Db(f)^2
        down(f) Db(f) = Db(f^2)/2 - dt/2 Db(f)^2
    """
    dt = f.grid.dt
    up, down, Db = dual_shift_up, dual_shift_down, diff_backward
    rep = ResidualReport()

    lhs = Db(g1 * g2)
    t1, t2 = up(g1) * Db(g2), Db(g1) * down(g2)
    rep.residuals["product_rule_plus"] = _residual(
        _valid(lhs), _valid(t1 + t2), np.abs(_valid(lhs)) + np.abs(_valid(t1)) + np.abs(_valid(t2)))
    t1, t2 = down(g1) * Db(g2), Db(g1) * up(g2)
    rep.residuals["product_rule_minus"] = _residual(
        _valid(lhs), _valid(t1 + t2), np.abs(_valid(lhs)) + np.abs(_valid(t1)) + np.abs(_valid(t2)))

    half_sq = 0.5 * Db(f * f)
    corr = (0.5 * dt) * Db(f) ** 2
    for name, shifted, sign in (("square_plus", up(f), 1.0), ("square_minus", down(f), -1.0)):
        lhs = shifted * Db(f)
        rhs = half_sq + sign * corr
        rep.residuals[name] = _residual(
            _valid(lhs), _valid(rhs),
            np.abs(_valid(lhs)) + np.abs(_valid(half_sq)) + np.abs(_valid(corr)))
    return rep


def check_integration_by_parts(u: PrimalSeq, v: DualSeq, u2: PrimalSeq | None = None,
                               v2: DualSeq | None = None,
                               inner: Callable = _default_inner) -> ResidualReport:
    """Residuals of the five summation-by-parts identities.

    ``u, u2`` are primal and ``v, v2`` dual; ``u2``/``v2`` default to ``u``/``v``
    and serve as the second argument of the same-mesh identities.  ``inner``
    pairs payloads row by row (default: product summed over trailing axes).
    Each relative residual is scaled by the sum of magnitudes of all terms.
    """
    u2 = u if u2 is None else u2
    v2 = v if v2 is None else v2
    g = u.grid
    M, dt = g.M, g.dt
    U, V, U2, V2 = u.need(0, M), v.need(0, M), u2.need(0, M), v2.need(0, M)
    ip = inner
    rep = ResidualReport()

    def dsum(x):  # dual integral of a per-index array, plus its magnitude
        return dt * x[:M].sum(), dt * np.abs(x[:M]).sum()

    def psum(x):
        return dt * x[1:].sum(), dt * np.abs(x[1:]).sum()

    def pair(i, a, j, b):
        return float(ip(a[i:i + 1], b[j:j + 1])[0])

    # shift-down of primal against dual equals primal against dual shift-down
    l, ls = dsum(ip(_zero_fill(shift_up(u)), V))
    r, rs = psum(ip(U, _zero_fill(dual_shift_down(v))))
    rep.residuals["translation_plus"] = _residual(l, r, ls + rs)

    l, ls = dsum(ip(_zero_fill(shift_down(u)), V))
    b0, bM = dt * pair(0, U, 0, V), dt * pair(M, U, M, V)
    r, rs = psum(ip(U, _zero_fill(dual_shift_up(v))))
    rep.residuals["translation_minus"] = _residual(l, b0 - bM + r, ls + abs(b0) + abs(bM) + rs)

    l, ls = dsum(ip(_zero_fill(diff_forward(u)), V))
    b0, bM = pair(0, U, 0, V), pair(M, U, M, V)
    r, rs = psum(ip(_zero_fill(diff_backward(v)), U))
    rep.residuals["by_parts_mixed"] = _residual(l, -b0 + bM - r, ls + abs(b0) + abs(bM) + rs)

    l, ls = psum(ip(_zero_fill(diff_backward(v)),
                    _zero_fill(dual_shift_down(v2))))
    b0, bM = pair(0, V, 0, V2), pair(M, V, M, V2)
    r, rs = psum(ip(_zero_fill(dual_shift_up(v)),
                    _zero_fill(diff_backward(v2))))
    rep.residuals["by_parts_dual_mesh"] = _residual(l, -b0 + bM - r, ls + abs(b0) + abs(bM) + rs)

    l, ls = dsum(ip(_zero_fill(diff_forward(u)), _zero_fill(shift_up(u2))))
    b0, bM = pair(0, U, 0, U2), pair(M, U, M, U2)
    r, rs = dsum(ip(_zero_fill(shift_down(u)), _zero_fill(diff_forward(u2))))
    rep.residuals["by_parts_primal_mesh"] = _residual(l, -b0 + bM - r, ls + abs(b0) + abs(bM) + rs)
    return rep


def _zero_fill(seq: _Seq):
    """Values array with NaN slots zeroed so that range-restricted sums work."""
    out = np.array(seq.values)
    out[:seq.lo] = 0.0
    out[seq.hi + 1:] = 0.0
    return out


def calculus_suite(instances: int = 100, Ms=(4, 16, 64), rng=None, T: float = 1.0,
                   width: int = 3) -> list:
    """Run every identity check on random sequences.

    Returns one row per ``(M, instance, identity)`` with the absolute and
    relative residuals.  Payloads are random vectors of length ``width``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    rows = []
    for M in Ms:
        g = TimeGrid(T, M)
        for i in range(instances):
            draw = lambda: rng.standard_normal((M + 1, width))
            f, g1, g2, v, v2 = (DualSeq(g, draw()) for _ in range(5))
            u, u2 = PrimalSeq(g, draw()), PrimalSeq(g, draw())
            reps = (check_product_rules(f, g1, g2), check_integration_by_parts(u, v, u2, v2))
            for rep in reps:
                for name, r in rep.residuals.items():
                    rows.append({"M": M, "instance": i, "identity": name,
                                 "absolute": r.absolute, "relative": r.relative})
    return rows
