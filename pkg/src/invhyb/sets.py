"""Constraint-described sets: membership, tangent-cone tests and grid sampling.

A set is a finite union of conjunctions of scalar inequalities ``h(z) <= 0``.
Constraint functions index their argument as ``z[0], z[1], ...`` so the same
callable evaluates a single point (shape ``(k,)``) or a batch (shape ``(k, N)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MEMBERSHIP_TOL = 1e-9
DEFAULT_RESOLUTION = 0.01
ALL_BLOCKS = frozenset({"x", "u", "w"})


class NonsmoothCornerError(ValueError):
    """An active constraint has a vanishing gradient at the test point."""


def _fd_gradient(h: Callable, z: np.ndarray) -> np.ndarray:
    """Central-difference gradient; works on a point or a (k, N) batch."""
    z = np.asarray(z, dtype=float)
    grad = np.empty_like(z)
    for i in range(z.shape[0]):
        step = 1e-6 * (1.0 + np.abs(z[i]))
        zp = z.copy()
        zm = z.copy()
        zp[i] = z[i] + step
        zm[i] = z[i] - step
        grad[i] = (np.asarray(h(zp), dtype=float) - np.asarray(h(zm), dtype=float)) / (2 * step)
    return grad


@dataclass(frozen=True)
class ScalarConstraint:
    """One inequality ``h(z) <= 0``.

    ``uses`` records which argument blocks (state ``x``, input ``u``,
    disturbance ``w``) the function depends on; projections rely on it.
    ``scale`` widens the membership tolerance to ``tol * (1 + |scale|)``.
    """

    h: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = ""
    scale: float = 1.0
    uses: frozenset = ALL_BLOCKS

    def value(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(self.h(z), dtype=float)

    def gradient(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.grad is not None:
            g = np.asarray(self.grad(z), dtype=float)
            if z.ndim == 2 and g.ndim == 1:
                g = np.repeat(g.reshape(-1, 1), z.shape[1], axis=1)
            elif z.ndim == 2 and g.shape != z.shape:
                g = np.broadcast_to(g, z.shape).copy()
            return g
        return _fd_gradient(self.h, z)

    def tolerance(self, tol: float = MEMBERSHIP_TOL) -> float:
        return tol * (1.0 + abs(self.scale))


def constraint(h, grad=None, name="", scale=1.0, uses=("x",)) -> ScalarConstraint:
    """Shorthand used by the system constructors."""
    return ScalarConstraint(h=h, grad=grad, name=name, scale=scale, uses=frozenset(uses))


def _batch_values(con: ScalarConstraint, Z: np.ndarray) -> np.ndarray:
    """Evaluate on a (k, N) batch, looping if the callable does not vectorize."""
    n_pts = Z.shape[1]
    try:
        vals = np.asarray(con.h(Z), dtype=float)
        if vals.shape == (n_pts,):
            return vals
        if vals.ndim == 0:
            return np.full(n_pts, float(vals))
    except Exception:  # noqa: BLE001 - fall back to pointwise evaluation
        pass
    return np.array([float(con.h(Z[:, i])) for i in range(n_pts)])


@dataclass(frozen=True)
class ConstraintSet:
    """Union over ``clauses`` of the conjunction of each clause's constraints.

    An empty clause is the whole space; no clauses at all is the empty set.
    """

    dim: int
    clauses: tuple[tuple[ScalarConstraint, ...], ...]
    name: str = ""

    @staticmethod
    def of(dim: int, *constraints: ScalarConstraint, name: str = "") -> "ConstraintSet":
        return ConstraintSet(dim, (tuple(constraints),), name)

    @staticmethod
    def whole(dim: int) -> "ConstraintSet":
        return ConstraintSet(dim, ((),), "whole")

    @staticmethod
    def empty(dim: int) -> "ConstraintSet":
        return ConstraintSet(dim, (), "empty")

    def union(self, other: "ConstraintSet") -> "ConstraintSet":
        self._check_dim(other)
        return ConstraintSet(self.dim, self.clauses + other.clauses, f"({self.name})|({other.name})")

    def intersect(self, other: "ConstraintSet") -> "ConstraintSet":
        self._check_dim(other)
        clauses = tuple(a + b for a in self.clauses for b in other.clauses)
        return ConstraintSet(self.dim, clauses, f"({self.name})&({other.name})")

    def _check_dim(self, other: "ConstraintSet") -> None:
        if self.dim != other.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")

    # membership -----------------------------------------------------------
    def clause_contains(self, idx: int, z: np.ndarray, tol: float = MEMBERSHIP_TOL) -> bool:
        return all(float(c.value(z)) <= c.tolerance(tol) for c in self.clauses[idx])

    def contains(self, z: Sequence[float], tol: float = MEMBERSHIP_TOL) -> bool:
        z = np.asarray(z, dtype=float)
        return any(self.clause_contains(i, z, tol) for i in range(len(self.clauses)))

    def which_clause(self, z: Sequence[float], tol: float = MEMBERSHIP_TOL) -> int | None:
        """Index of the first clause containing ``z``, or None."""
        z = np.asarray(z, dtype=float)
        for i in range(len(self.clauses)):
            if self.clause_contains(i, z, tol):
                return i
        return None

    def contains_batch(self, points: np.ndarray, tol: float = MEMBERSHIP_TOL) -> np.ndarray:
        """Membership of each row of an ``(N, dim)`` array."""
        P = np.atleast_2d(np.asarray(points, dtype=float))
        Z = P.T
        out = np.zeros(P.shape[0], dtype=bool)
        for clause in self.clauses:
            ok = np.ones(P.shape[0], dtype=bool)
            for c in clause:
                idx = np.flatnonzero(ok & ~out)
                if idx.size == 0:
                    break
                vals = _batch_values(c, Z[:, idx])
                ok[idx] &= vals <= c.tolerance(tol)
            out |= ok
        return out

    def max_violation(self, z: Sequence[float]) -> float:
        """Smallest over clauses of the largest constraint value (<= 0 inside)."""
        z = np.asarray(z, dtype=float)
        best = np.inf
        for clause in self.clauses:
            worst = max((float(c.value(z)) for c in clause), default=-np.inf)
            best = min(best, worst)
        return best

    def active(self, z: np.ndarray, tol: float = MEMBERSHIP_TOL) -> list[list[ScalarConstraint]]:
        """Per containing clause, the constraints with ``|h| <= tol``; [] if not a member."""
        z = np.asarray(z, dtype=float)
        out = []
        for i, clause in enumerate(self.clauses):
            if self.clause_contains(i, z, tol):
                out.append([c for c in clause if abs(float(c.value(z))) <= c.tolerance(tol)])
        return out


@dataclass(frozen=True)
class SublevelSet(ConstraintSet):
    """``{x : V(x) <= r}`` kept alongside its defining function."""

    V: Callable | None = None
    gradV: Callable | None = None
    r: float = 0.0

    @staticmethod
    def build(dim: int, V: Callable, gradV: Callable | None, r: float, scale: float | None = None) -> "SublevelSet":
        s = abs(r) if scale is None else scale
        con = ScalarConstraint(
            h=lambda z: V(z) - r,
            grad=gradV,
            name=f"V<={r:g}",
            scale=s,
            uses=frozenset({"x"}),
        )
        return SublevelSet(dim, ((con,),), f"L_V({r:g})", V, gradV, r)


def band_set(dim: int, V: Callable, gradV: Callable | None, r: float, r_star: float) -> ConstraintSet:
    """``{x : r <= V(x) <= r_star}``."""
    neg = None if gradV is None else (lambda z: -np.asarray(gradV(z)))
    lower = ScalarConstraint(lambda z: r - V(z), neg, f"V>={r:g}", abs(r), frozenset({"x"}))
    upper = ScalarConstraint(lambda z: V(z) - r_star, gradV, f"V<={r_star:g}", abs(r_star), frozenset({"x"}))
    return ConstraintSet.of(dim, lower, upper, name=f"I({r:g},{r_star:g})")


# tangent cone -----------------------------------------------------------------

def _clause_admits(active: list[ScalarConstraint], x: np.ndarray, v: np.ndarray, tol: float) -> bool:
    for c in active:
        g = c.gradient(x)
        if np.linalg.norm(g) <= tol:
            raise NonsmoothCornerError(f"nonsmooth corner unsupported at x={x.tolist()} ({c.name})")
        if float(g @ v) > tol:
            return False
    return True


def tangent_halfspace_test(
    S: ConstraintSet, x: Sequence[float], v: Sequence[float], tol: float = MEMBERSHIP_TOL
) -> bool:
    """Whether ``v`` lies in the tangent cone of ``S`` at ``x``.

    For a union the cone is the union of the clause cones, and a clause cone
    is approximated by the halfspaces of its active constraints.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if not S.contains(x, tol):
        raise ValueError(f"point {x.tolist()} is not in the set")
    if np.linalg.norm(v) <= tol:
        return True
    return any(_clause_admits(act, x, v, tol) for act in S.active(x, tol))


def active_gradients(S: ConstraintSet, x: np.ndarray, tol: float = MEMBERSHIP_TOL) -> list[np.ndarray]:
    """Per containing clause, the stacked gradients of its active constraints."""
    out = []
    for act in S.active(np.asarray(x, dtype=float), tol):
        out.append(np.array([c.gradient(x) for c in act]).reshape(len(act), -1))
    return out


def is_boundary_point(S: ConstraintSet, x: np.ndarray, tol: float = MEMBERSHIP_TOL) -> bool:
    """Member with at least one active constraint in every containing clause."""
    act = S.active(x, tol)
    return bool(act) and all(len(a) > 0 for a in act)


# sampling ---------------------------------------------------------------------

@dataclass(frozen=True)
class SampleGrid:
    points: np.ndarray
    provenance: str
    resolution: float
    box: tuple = field(default=())

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def __iter__(self):
        return iter(self.points)


def lattice(box: Sequence[Sequence[float]], resolution: float) -> np.ndarray:
    """Lexicographically ordered lattice over ``box = [(lo, hi), ...]``.

    Box endpoints are hit exactly (``linspace``), so aligned boxes contain
    values such as 0 and h_max without rounding drift.
    """
    axes = []
    for lo, hi in box:
        count = int(round((hi - lo) / resolution)) + 1
        axes.append(np.linspace(lo, hi, max(count, 1)))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _project_to_surface(c: ScalarConstraint, P: np.ndarray, iters: int = 30) -> tuple[np.ndarray, np.ndarray]:
    """Newton steps along the gradient onto ``h = 0``; returns points and success mask."""
    X = P.T.copy()
    for _ in range(iters):
        hv = _batch_values(c, X)
        g = c.gradient(X)
        g = np.asarray(g, dtype=float).reshape(X.shape)
        gn = np.sum(g * g, axis=0)
        safe = gn > 1e-24
        step = np.where(safe, hv / np.where(safe, gn, 1.0), 0.0)
        X = X - g * step
        if np.all(np.abs(hv) <= 1e-14):
            break
    hv = _batch_values(c, X)
    ok = np.abs(hv) <= c.tolerance()
    return X.T, ok


def sample(
    S: ConstraintSet,
    box: Sequence[Sequence[float]],
    resolution: float = DEFAULT_RESOLUTION,
    mode: str = "interior",
    extra_points: Sequence[Sequence[float]] | None = None,
    band: float = 1.0,
) -> SampleGrid:
    """Deterministic lattice sample of ``S`` within ``box``.

    ``interior`` keeps lattice points that are members, ``grid`` keeps all of
    them, and ``boundary`` projects points within ``band * resolution`` of a
    constraint surface onto it and keeps those that remain members. An empty
    result is returned as a grid with zero points.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    box = [(float(a), float(b)) for a, b in box]
    if len(box) != S.dim:
        raise ValueError(f"box has {len(box)} axes, set has dimension {S.dim}")
    L = lattice(box, resolution)
    if extra_points is not None and len(extra_points):
        L = np.vstack([L, np.asarray(extra_points, dtype=float).reshape(-1, S.dim)])
    if mode == "grid":
        pts = L
    elif mode == "interior":
        pts = L[S.contains_batch(L)] if len(L) else L
    elif mode == "boundary":
        chunks = []
        for clause in S.clauses:
            for c in clause:
                hv = _batch_values(c, L.T)
                g = np.asarray(c.gradient(L.T), dtype=float).reshape(L.T.shape)
                dist = np.abs(hv) / np.maximum(np.linalg.norm(g, axis=0), 1e-12)
                near = L[dist <= band * resolution]
                if near.size == 0:
                    continue
                proj, ok = _project_to_surface(c, near)
                chunks.append(proj[ok])
        pts = np.vstack(chunks) if chunks else np.empty((0, S.dim))
        if len(pts):
            pts = pts[S.contains_batch(pts)]
            pts = np.unique(np.round(pts, 12), axis=0)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    pts = np.asarray(pts, dtype=float).reshape(-1, S.dim)
    if len(pts):
        order = np.lexsort(pts.T[::-1])
        pts = pts[order]
    return SampleGrid(pts, f"{mode}:{S.name}", resolution, tuple(box))
