"""Hybrid inclusions with inputs and disturbances, their closed loops and projections."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .sets import MEMBERSHIP_TOL, ConstraintSet, ScalarConstraint, _batch_values

SOLVER_SAMPLES = 257
SOLVER_XTOL = 1e-12


# boxes and input sets -----------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Axis-aligned box; ``dim == 0`` is the single point of R^0."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    @staticmethod
    def of(*bounds: tuple[float, float]) -> "Box":
        return Box(tuple(float(b[0]) for b in bounds), tuple(float(b[1]) for b in bounds))

    @staticmethod
    def point0() -> "Box":
        return Box((), ())

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ValueError("box bounds differ in length")
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"empty box {self.lo} > {self.hi}")

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (np.array(self.lo, dtype=float) + np.array(self.hi, dtype=float))

    def contains(self, v: Sequence[float], tol: float = MEMBERSHIP_TOL) -> bool:
        v = np.asarray(v, dtype=float).reshape(-1)
        if v.size != self.dim:
            return False
        lo = np.array(self.lo)
        hi = np.array(self.hi)
        slack = tol * (1 + np.maximum(np.abs(lo), np.abs(hi)))
        return bool(np.all(v >= lo - slack) and np.all(v <= hi + slack))

    def clamp(self, v: Sequence[float]) -> np.ndarray:
        return np.clip(np.asarray(v, dtype=float).reshape(-1), self.lo, self.hi)

    def vertices(self) -> list[np.ndarray]:
        if self.dim == 0:
            return [np.empty(0)]
        axes = [sorted({a, b}) for a, b in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return [np.array(p) for p in np.stack([m.ravel() for m in mesh], axis=1)]


class InputSet:
    """Common interface for Ψ/Φ values."""

    dim: int

    def is_empty(self) -> bool: ...

    def contains(self, v, tol: float = MEMBERSHIP_TOL) -> bool: ...

    def vertices(self) -> list[np.ndarray]: ...

    def grid(self, n: int) -> list[np.ndarray]: ...

    def min_norm(self) -> np.ndarray: ...

    def sample(self, rng: np.random.Generator) -> np.ndarray: ...


@dataclass(frozen=True)
class IntervalSet(InputSet):
    """Finite union of closed intervals on R (``dim=1``) or a subset of R^0 (``dim=0``)."""

    intervals: tuple[tuple[float, float], ...]
    dim: int = 1

    @staticmethod
    def point0(nonempty: bool = True) -> "IntervalSet":
        return IntervalSet(((0.0, 0.0),) if nonempty else (), 0)

    def is_empty(self) -> bool:
        return len(self.intervals) == 0

    @property
    def lo(self) -> float:
        return min(a for a, _ in self.intervals)

    @property
    def hi(self) -> float:
        return max(b for _, b in self.intervals)

    def contains(self, v, tol: float = MEMBERSHIP_TOL) -> bool:
        if self.dim == 0:
            return not self.is_empty()
        x = float(np.asarray(v, dtype=float).reshape(-1)[0])
        return any(a - tol * (1 + abs(a)) <= x <= b + tol * (1 + abs(b)) for a, b in self.intervals)

    def vertices(self) -> list[np.ndarray]:
        if self.is_empty():
            return []
        if self.dim == 0:
            return [np.empty(0)]
        pts = sorted({v for ab in self.intervals for v in ab})
        return [np.array([p]) for p in pts]

    def grid(self, n: int) -> list[np.ndarray]:
        if self.is_empty():
            return []
        if self.dim == 0:
            return [np.empty(0)]
        out = []
        for a, b in self.intervals:
            out.extend(np.array([v]) for v in np.linspace(a, b, n if b > a else 1))
        return out

    def min_norm(self) -> np.ndarray:
        if self.is_empty():
            raise ValueError("min-norm element of an empty set")
        if self.dim == 0:
            return np.empty(0)
        cands = [min(max(0.0, a), b) for a, b in self.intervals]
        return np.array([min(cands, key=abs)])

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        if self.is_empty():
            raise ValueError("cannot sample an empty set")
        if self.dim == 0:
            return np.empty(0)
        lengths = np.array([b - a for a, b in self.intervals])
        if lengths.sum() <= 0:
            a, _ = self.intervals[int(rng.integers(len(self.intervals)))]
            return np.array([a])
        k = int(rng.choice(len(lengths), p=lengths / lengths.sum())) if len(lengths) > 1 else 0
        a, b = self.intervals[k]
        return np.array([rng.uniform(a, b)])

    def hull(self) -> "IntervalSet":
        if self.is_empty() or self.dim == 0:
            return self
        return IntervalSet(((self.lo, self.hi),), 1)


@dataclass(frozen=True)
class BoxSet(InputSet):
    """A whole box of dimension >= 2, used when no constraint restricts the block."""

    box: Box

    @property
    def dim(self) -> int:  # type: ignore[override]
        return self.box.dim

    def is_empty(self) -> bool:
        return False

    def contains(self, v, tol: float = MEMBERSHIP_TOL) -> bool:
        return self.box.contains(v, tol)

    def vertices(self) -> list[np.ndarray]:
        return self.box.vertices()

    def grid(self, n: int) -> list[np.ndarray]:
        axes = [np.linspace(a, b, n if b > a else 1) for a, b in zip(self.box.lo, self.box.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return list(np.stack([m.ravel() for m in mesh], axis=1))

    def min_norm(self) -> np.ndarray:
        return self.box.clamp(np.zeros(self.dim))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.box.lo, self.box.hi)


def merge_intervals(intervals: Sequence[tuple[float, float]], gap: float = 0.0) -> tuple[tuple[float, float], ...]:
    if not intervals:
        return ()
    items = sorted(intervals)
    out = [list(items[0])]
    for a, b in items[1:]:
        if a <= out[-1][1] + gap:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return tuple((float(a), float(b)) for a, b in out)


def _bisect_edge(pred_scalar: Callable[[float], bool], bad: float, good: float, xtol: float) -> float:
    """Shrink ``[bad, good]`` around the feasibility edge, returning the feasible side."""
    for _ in range(200):
        if abs(good - bad) <= xtol * (1 + abs(good)):
            break
        mid = 0.5 * (bad + good)
        if pred_scalar(mid):
            good = mid
        else:
            bad = mid
    return good


def feasible_intervals(
    pred: Callable[[np.ndarray], np.ndarray],
    lo: float,
    hi: float,
    n: int = SOLVER_SAMPLES,
    xtol: float = SOLVER_XTOL,
) -> tuple[tuple[float, float], ...]:
    """Closed intervals where a vectorized boolean predicate holds on ``[lo, hi]``.

    Runs are located on ``n`` samples and each edge is refined by bisection;
    feasible pieces narrower than the sample spacing can be missed.
    """
    if hi < lo:
        return ()
    if hi - lo <= xtol * (1 + abs(lo)):
        return ((lo, hi),) if bool(np.asarray(pred(np.array([lo])))[0]) else ()
    s = np.linspace(lo, hi, n)
    ok = np.asarray(pred(s), dtype=bool)

    def scalar(v: float) -> bool:
        return bool(np.asarray(pred(np.array([v])))[0])

    out = []
    i = 0
    while i < n:
        if not ok[i]:
            i += 1
            continue
        k = i
        while k + 1 < n and ok[k + 1]:
            k += 1
        a = s[i] if i == 0 else _bisect_edge(scalar, s[i - 1], s[i], xtol)
        b = s[k] if k == n - 1 else _bisect_edge(scalar, s[k + 1], s[k], xtol)
        out.append((float(a), float(b)))
        i = k + 1
    return merge_intervals(out)


# hybrid time ----------------------------------------------------------------------

@dataclass(frozen=True)
class HybridTime:
    t: float
    j: int

    def key(self) -> tuple[float, int]:
        return (self.t + self.j, self.j)

    def __lt__(self, other: "HybridTime") -> bool:
        return self.key() < other.key()

    def __le__(self, other: "HybridTime") -> bool:
        return self.key() <= other.key()


@dataclass(frozen=True)
class HybridTimeDomain:
    """Flow intervals ``[(j, t_start, t_end), ...]`` of a compact hybrid time domain."""

    intervals: tuple[tuple[int, float, float], ...]

    def __post_init__(self):
        if not self.intervals:
            raise ValueError("hybrid time domain needs at least one interval")
        j0, t0, _ = self.intervals[0]
        if j0 != 0 or t0 != 0.0:
            raise ValueError("hybrid time domain must start at (0, 0)")
        for (ja, _, ea), (jb, sb, eb) in zip(self.intervals, self.intervals[1:]):
            if jb != ja + 1:
                raise ValueError(f"jump counter must increase by one ({ja} -> {jb})")
            if sb != ea:
                raise ValueError(f"interval {jb} starts at {sb}, previous ended at {ea}")
        for j, s, e in self.intervals:
            if e < s:
                raise ValueError(f"interval {j} has negative length")

    @property
    def sup_t(self) -> float:
        return self.intervals[-1][2]

    @property
    def sup_j(self) -> int:
        return self.intervals[-1][0]

    def contains(self, t: float, j: int) -> bool:
        return any(jj == j and s <= t <= e for jj, s, e in self.intervals)

    def flow_time(self) -> float:
        return sum(e - s for _, s, e in self.intervals)


@dataclass
class HybridArc:
    """Samples of a hybrid arc, stored flat; a jump shows up as two samples with equal t."""

    t: np.ndarray
    j: np.ndarray
    x: np.ndarray

    def domain(self) -> HybridTimeDomain:
        out = []
        for jj in range(int(self.j[-1]) + 1 if len(self.j) else 1):
            ts = self.t[self.j == jj]
            out.append((jj, float(ts[0]), float(ts[-1])))
        return HybridTimeDomain(tuple(out))

    def interval(self, jj: int) -> tuple[np.ndarray, np.ndarray]:
        mask = self.j == jj
        return self.t[mask], self.x[mask]

    def __len__(self) -> int:
        return len(self.t)


@dataclass
class DisturbanceSignal:
    """Flow disturbance per sample (held until the next sample) and one value per jump."""

    wc: np.ndarray
    wd: np.ndarray


class TerminationReason(str, enum.Enum):
    Complete = "Complete"
    EndedFlowBoundary = "EndedFlowBoundary"
    EndedFlowNoContinuation = "EndedFlowNoContinuation"
    EndedFlowFiniteEscape = "EndedFlowFiniteEscape"
    EndedJumpOutside = "EndedJumpOutside"
    EndedJumpNoContinuation = "EndedJumpNoContinuation"
    HorizonReached = "HorizonReached"


@dataclass
class SolutionPair:
    arc: HybridArc
    disturbance: DisturbanceSignal
    termination: TerminationReason
    jump_clause: list[int] = field(default_factory=list)
    jump_rows: list[int] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def jumps(self) -> int:
        return int(self.arc.j[-1]) if len(self.arc.j) else 0

    def impact_counts(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for c in self.jump_clause:
            out[c] = out.get(c, 0) + 1
        return out


# systems ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SetValuedMap:
    """Set-valued map given by finitely many selections.

    ``fn(x, u, w)`` returns the selections at a point. With ``convex=True`` the
    value is their convex hull (so suprema of linear functionals sit on the
    list); otherwise it is the finite set itself.
    """

    fn: Callable[[np.ndarray, np.ndarray, np.ndarray], list[np.ndarray]]
    convex: bool = True

    def __call__(self, x, u, w) -> list[np.ndarray]:
        return [np.asarray(v, dtype=float) for v in self.fn(np.asarray(x, float), np.asarray(u, float), np.asarray(w, float))]


@dataclass(frozen=True)
class HybridSystemUW:
    """H_uw: flow set and map over (x, u_c, w_c), jump set and map over (x, u_d, w_d)."""

    n: int
    C: ConstraintSet
    F: SetValuedMap
    D: ConstraintSet
    G: SetValuedMap
    U_c: Box
    U_d: Box
    W_c: Box
    W_d: Box
    name: str = ""
    theta_d_exact: Callable[[np.ndarray], "IntervalSet"] | None = None
    proj_c: ConstraintSet | None = None
    proj_d: ConstraintSet | None = None

    def __post_init__(self):
        if self.C.dim != self.n + self.U_c.dim + self.W_c.dim:
            raise ValueError(f"flow set dimension {self.C.dim} != n + m_c + d_c")
        if self.D.dim != self.n + self.U_d.dim + self.W_d.dim:
            raise ValueError(f"jump set dimension {self.D.dim} != n + m_d + d_d")

    def blocks(self, which: str) -> tuple[ConstraintSet, Box, Box, SetValuedMap]:
        if which in ("flow", "c"):
            return self.C, self.U_c, self.W_c, self.F
        if which in ("jump", "d"):
            return self.D, self.U_d, self.W_d, self.G
        raise ValueError(f"which must be 'flow' or 'jump', got {which!r}")

    def member(self, which: str, x, u, w, tol: float = MEMBERSHIP_TOL) -> bool:
        S, U, W, _ = self.blocks(which)
        if not (U.contains(u, tol) and W.contains(w, tol)):
            return False
        return S.contains(_stack(x, u, w), tol)

    def member_clause(self, which: str, x, u, w, tol: float = MEMBERSHIP_TOL) -> int | None:
        S, U, W, _ = self.blocks(which)
        if not (U.contains(u, tol) and W.contains(w, tol)):
            return None
        return S.which_clause(_stack(x, u, w), tol)


@dataclass(frozen=True)
class FeedbackPair:
    """State feedback (κ_c, κ_d); each returns an array of its input dimension."""

    kappa_c: Callable[[np.ndarray], np.ndarray]
    kappa_d: Callable[[np.ndarray], np.ndarray]
    name: str = ""


@dataclass(frozen=True)
class HybridSystemW(HybridSystemUW):
    """Closed loop H_w: the same structure with zero-dimensional inputs."""

    feedback: FeedbackPair | None = None
    open_loop: HybridSystemUW | None = None

    def flow_selections(self, x, w) -> list[np.ndarray]:
        return self.F(x, np.empty(0), w)

    def jump_selections(self, x, w) -> list[np.ndarray]:
        return self.G(x, np.empty(0), w)

    def in_flow(self, x, w, tol: float = MEMBERSHIP_TOL) -> bool:
        return self.member("flow", x, np.empty(0), w, tol)

    def in_jump(self, x, w, tol: float = MEMBERSHIP_TOL) -> bool:
        return self.member("jump", x, np.empty(0), w, tol)


def _stack(x, u, w) -> np.ndarray:
    return np.concatenate([np.asarray(x, float).reshape(-1), np.asarray(u, float).reshape(-1), np.asarray(w, float).reshape(-1)])


def _stack_batch(X: np.ndarray, u, w) -> np.ndarray:
    """Rows of X (n, N) stacked with inputs given as (m, N) arrays or single vectors."""
    N = X.shape[1]
    parts = [X]
    for blk in (u, w):
        arr = np.asarray(blk, dtype=float)
        if arr.ndim == 1:
            arr = np.repeat(arr.reshape(-1, 1), N, axis=1)
        parts.append(arr.reshape(-1, N))
    return np.vstack(parts)


def kappa_batch(kappa: Callable, X: np.ndarray, m: int) -> np.ndarray:
    """Evaluate a feedback on a (n, N) batch, looping when it does not vectorize."""
    N = X.shape[1]
    try:
        out = np.asarray(kappa(X), dtype=float)
        if out.shape == (m, N):
            return out
        if m == 1 and out.shape == (N,):
            return out.reshape(1, N)
    except Exception:  # noqa: BLE001
        pass
    return np.array([np.asarray(kappa(X[:, i]), dtype=float).reshape(m) for i in range(N)]).T.reshape(m, N)


def _compose(c: ScalarConstraint, n: int, kappa: Callable, U: Box, d: int) -> ScalarConstraint:
    """h(x, κ(x), w) as a constraint over (x, w)."""
    uses_u = "u" in c.uses
    m = U.dim
    u_mid = U.mid

    def h(z):
        z = np.asarray(z, dtype=float)
        x = z[:n]
        w = z[n:]
        if z.ndim == 1:
            u = np.asarray(kappa(x), float).reshape(m) if uses_u else u_mid
            return c.h(_stack(x, u, w))
        u = kappa_batch(kappa, x, m) if uses_u else u_mid
        return c.h(_stack_batch(x, u, w))

    grad = None
    if not uses_u and c.grad is not None:
        keep = np.r_[np.arange(n), np.arange(n + m, n + m + d)]

        def grad(z):
            z = np.asarray(z, dtype=float)
            x = z[:n]
            w = z[n:]
            full = _stack(x, u_mid, w) if z.ndim == 1 else _stack_batch(x, u_mid, w)
            return np.asarray(c.grad(full), dtype=float)[keep]

    uses = frozenset({"x"} | ({"w"} & c.uses))
    return ScalarConstraint(h, grad, c.name, c.scale, uses)


def _input_box_constraint(n: int, kappa: Callable, U: Box, label: str) -> ScalarConstraint:
    lo = np.array(U.lo)
    hi = np.array(U.hi)

    def h(z):
        z = np.asarray(z, dtype=float)
        x = z[:n]
        if z.ndim == 1:
            u = np.asarray(kappa(x), float).reshape(U.dim)
            return float(np.max(np.r_[lo - u, u - hi]))
        u = kappa_batch(kappa, x, U.dim)
        return np.max(np.vstack([lo[:, None] - u, u - hi[:, None]]), axis=0)

    scale = float(np.max(np.abs(np.r_[lo, hi]))) if U.dim else 1.0
    return ScalarConstraint(h, None, f"{label} in U", scale, frozenset({"x"}))


def close_loop(sys: HybridSystemUW, K: FeedbackPair) -> HybridSystemW:
    """Substitute u_c = κ_c(x) during flows and u_d = κ_d(x) at jumps."""
    probe = np.zeros(sys.n)
    for kappa, U, label in ((K.kappa_c, sys.U_c, "kappa_c"), (K.kappa_d, sys.U_d, "kappa_d")):
        out = np.asarray(kappa(probe), dtype=float).reshape(-1)
        if out.size != U.dim:
            raise ValueError(f"{label} returns dimension {out.size}, input space has dimension {U.dim}")

    def lift(S: ConstraintSet, kappa, U: Box, W: Box, label: str) -> ConstraintSet:
        clauses = []
        extra = (_input_box_constraint(sys.n, kappa, U, label),) if U.dim else ()
        for clause in S.clauses:
            clauses.append(tuple(_compose(c, sys.n, kappa, U, W.dim) for c in clause) + extra)
        return ConstraintSet(sys.n + W.dim, tuple(clauses), f"{S.name}|{label}")

    def F_w(x, _u, w):
        return sys.F(x, np.asarray(K.kappa_c(x), float).reshape(sys.U_c.dim), w)

    def G_w(x, _u, w):
        return sys.G(x, np.asarray(K.kappa_d(x), float).reshape(sys.U_d.dim), w)

    return HybridSystemW(
        n=sys.n,
        C=lift(sys.C, K.kappa_c, sys.U_c, sys.W_c, "kappa_c"),
        F=SetValuedMap(F_w, sys.F.convex),
        D=lift(sys.D, K.kappa_d, sys.U_d, sys.W_d, "kappa_d"),
        G=SetValuedMap(G_w, sys.G.convex),
        U_c=Box.point0(),
        U_d=Box.point0(),
        W_c=sys.W_c,
        W_d=sys.W_d,
        name=f"{sys.name}+{K.name}" if K.name else sys.name,
        feedback=K,
        open_loop=sys,
    )


# projections and input/disturbance maps ----------------------------------------------

def _split(clause, blocks: set[str]):
    """Constraints that touch any of ``blocks`` versus those that do not."""
    touching = [c for c in clause if c.uses & blocks]
    rest = [c for c in clause if not (c.uses & blocks)]
    return touching, rest


def _all_ok(cons, Z, tol) -> np.ndarray:
    ok = np.ones(Z.shape[1], dtype=bool)
    for c in cons:
        ok &= _batch_values(c, Z) <= c.tolerance(tol)
    return ok


def _w_set(cons, x, u, W: Box, tol: float) -> InputSet:
    """{w in W : all ``cons`` hold at (x, u, w)} for one clause."""
    if W.dim == 0:
        Z = _stack(x, u, np.empty(0)).reshape(-1, 1)
        return IntervalSet.point0(bool(_all_ok(cons, Z, tol)[0]))
    if not cons:
        return BoxSet(W) if W.dim > 1 else IntervalSet(((W.lo[0], W.hi[0]),))
    if W.dim > 1:
        raise NotImplementedError("disturbance sets are solved for scalar disturbances only")
    X = np.asarray(x, float).reshape(-1, 1)

    def pred(ws):
        Z = _stack_batch(np.repeat(X, len(ws), axis=1), u, np.asarray(ws).reshape(1, -1))
        return _all_ok(cons, Z, tol)

    return IntervalSet(feasible_intervals(pred, W.lo[0], W.hi[0]))


def _union(sets: list[InputSet], dim: int) -> InputSet:
    if dim == 0:
        return IntervalSet.point0(any(not s.is_empty() for s in sets))
    boxes = [s for s in sets if isinstance(s, BoxSet)]
    if boxes:
        return boxes[0]
    return IntervalSet(merge_intervals([ab for s in sets for ab in s.intervals]), dim)  # type: ignore[attr-defined]


def phi_w(sys: HybridSystemUW, x, u, which: str, tol: float = MEMBERSHIP_TOL) -> InputSet:
    """Admissible disturbances {w : (x, u, w) in the flow or jump set}."""
    S, U, W, _ = sys.blocks(which)
    u = np.asarray(u, dtype=float).reshape(-1)
    if not U.contains(u, tol):
        return IntervalSet((), min(W.dim, 1)) if W.dim <= 1 else IntervalSet(())
    pieces = []
    for clause in S.clauses:
        wcons, rest = _split(clause, {"w"})
        Z = _stack(x, u, W.mid).reshape(-1, 1)
        if not _all_ok(rest, Z, tol)[0]:
            continue
        pieces.append(_w_set(wcons, x, u, W, tol))
    if W.dim > 1 and not pieces:
        return IntervalSet(())
    return _union(pieces, min(W.dim, 1) if W.dim <= 1 else W.dim)


def _exists_w(wcons, x, u, W: Box, tol: float) -> bool:
    if not wcons:
        return True
    if W.dim == 0:
        return not _w_set(wcons, x, u, W, tol).is_empty()
    if W.dim > 1:
        raise NotImplementedError("disturbance sets are solved for scalar disturbances only")
    ws = np.linspace(W.lo[0], W.hi[0], SOLVER_SAMPLES)
    X = np.asarray(x, float).reshape(-1, 1)
    Z = _stack_batch(np.repeat(X, len(ws), axis=1), u, ws.reshape(1, -1))
    return bool(np.any(_all_ok(wcons, Z, tol)))


def psi_u(sys: HybridSystemUW, x, which: str, tol: float = MEMBERSHIP_TOL) -> InputSet:
    """Admissible inputs {u : some w puts (x, u, w) in the flow or jump set}."""
    S, U, W, _ = sys.blocks(which)
    x = np.asarray(x, dtype=float).reshape(-1)
    pieces: list[InputSet] = []
    for clause in S.clauses:
        touching, rest = _split(clause, {"u", "w"})
        Z = _stack(x, U.mid, W.mid).reshape(-1, 1)
        if not _all_ok(rest, Z, tol)[0]:
            continue
        ucons = [c for c in touching if "w" not in c.uses]
        wcons = [c for c in touching if "w" in c.uses]
        w_needs_u = any("u" in c.uses for c in wcons)
        if U.dim == 0:
            ok = bool(_all_ok(ucons, _stack(x, U.mid, W.mid).reshape(-1, 1), tol)[0]) and _exists_w(wcons, x, U.mid, W, tol)
            pieces.append(IntervalSet.point0(ok))
            continue
        if not w_needs_u and not _exists_w(wcons, x, U.mid, W, tol):
            continue
        if not ucons and not w_needs_u:
            pieces.append(BoxSet(U) if U.dim > 1 else IntervalSet(((U.lo[0], U.hi[0]),)))
            continue
        if U.dim > 1:
            raise NotImplementedError("input sets are solved for scalar inputs only")

        def pred(us, ucons=ucons, wcons=wcons, w_needs_u=w_needs_u):
            us = np.asarray(us, dtype=float)
            Zb = _stack_batch(np.repeat(x.reshape(-1, 1), len(us), axis=1), us.reshape(1, -1), W.mid)
            ok = _all_ok(ucons, Zb, tol)
            if w_needs_u:
                for i in np.flatnonzero(ok):
                    ok[i] = _exists_w(wcons, x, np.array([us[i]]), W, tol)
            return ok

        pieces.append(IntervalSet(feasible_intervals(pred, U.lo[0], U.hi[0])))
    if U.dim > 1 and not pieces:
        return IntervalSet(())
    return _union(pieces, min(U.dim, 1) if U.dim <= 1 else U.dim)


def _restrict_to_x(c: ScalarConstraint, n: int, u0: np.ndarray, w0: np.ndarray) -> ScalarConstraint:
    """A constraint that ignores u and w, re-expressed over x alone."""

    def h(z):
        z = np.asarray(z, dtype=float)
        return c.h(_stack(z, u0, w0) if z.ndim == 1 else _stack_batch(z, u0, w0))

    grad = None
    if c.grad is not None:

        def grad(z):
            z = np.asarray(z, dtype=float)
            full = _stack(z, u0, w0) if z.ndim == 1 else _stack_batch(z, u0, w0)
            return np.asarray(c.grad(full), dtype=float)[:n]

    return ScalarConstraint(h, grad, c.name, c.scale, frozenset({"x"}))


def _feasibility_margin(cons, n: int, U: Box, W: Box, tol: float) -> ScalarConstraint:
    """min over (u, w) in U x W of the largest constraint value, as a function of x."""
    uses_u = any("u" in c.uses for c in cons) and U.dim > 0
    uses_w = any("w" in c.uses for c in cons) and W.dim > 0
    lo = np.r_[np.array(U.lo) if uses_u else [], np.array(W.lo) if uses_w else []]
    hi = np.r_[np.array(U.hi) if uses_u else [], np.array(W.hi) if uses_w else []]
    k = lo.size

    def unpack(v):
        v = np.asarray(v, dtype=float)
        u = v[: U.dim] if uses_u else U.mid
        w = v[U.dim if uses_u else 0:] if uses_w else W.mid
        return u, w

    def worst(x, V):
        # V: (k, N) candidate (u, w) values
        N = V.shape[1]
        X = np.repeat(np.asarray(x, float).reshape(-1, 1), N, axis=1)
        u = V[: U.dim] if uses_u else U.mid
        w = V[U.dim if uses_u else 0:] if uses_w else W.mid
        Z = _stack_batch(X, u, w)
        return np.max(np.vstack([_batch_values(c, Z) for c in cons]), axis=0)

    def margin_point(x):
        if k == 0:
            return float(worst(x, np.zeros((0, 1)))[0])
        per_axis = max(3, int(round(4096 ** (1.0 / k))))
        axes = [np.linspace(a, b, per_axis) for a, b in zip(lo, hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        V = np.stack([m.ravel() for m in mesh])
        vals = worst(x, V)
        best = int(np.argmin(vals))
        res = minimize(
            lambda v: float(worst(x, np.clip(v, lo, hi).reshape(-1, 1))[0]),
            V[:, best],
            method="Nelder-Mead",
            bounds=list(zip(lo, hi)),
            options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 400},
        )
        return float(min(vals[best], res.fun))

    def h(z):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            return margin_point(z)
        return np.array([margin_point(z[:, i]) for i in range(z.shape[1])])

    scale = max((c.scale for c in cons), default=1.0)
    return ScalarConstraint(h, None, "feasible(u,w)", scale, frozenset({"x"}))


def project_states(sys: HybridSystemUW, which: str, tol: float = MEMBERSHIP_TOL) -> ConstraintSet:
    """State projection Π_c or Π_d as a constraint set over x.

    Constraints that ignore (u, w) carry over with their gradients; the rest
    of a clause becomes one numerically evaluated feasibility margin.
    """
    override = sys.proj_c if which in ("flow", "c") else sys.proj_d
    if override is not None:
        return override
    S, U, W, _ = sys.blocks(which)
    clauses = []
    for clause in S.clauses:
        touching, rest = _split(clause, {"u", "w"})
        new = [_restrict_to_x(c, sys.n, U.mid, W.mid) for c in rest]
        if touching:
            new.append(_feasibility_margin(touching, sys.n, U, W, tol))
        clauses.append(tuple(new))
    label = "Pi_c" if which in ("flow", "c") else "Pi_d"
    return ConstraintSet(sys.n, tuple(clauses), f"{label}({S.name})")


def in_projection(sys: HybridSystemUW, x, which: str, tol: float = MEMBERSHIP_TOL) -> bool:
    """Whether some (u, w) puts x in the flow or jump set."""
    return not psi_u(sys, x, which, tol).is_empty()


def state_sets(sys: HybridSystemUW) -> tuple[ConstraintSet, ConstraintSet]:
    return project_states(sys, "flow"), project_states(sys, "jump")
