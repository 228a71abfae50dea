"""Grid verification of robust control Lyapunov function certificates for forward invariance."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linprog

from .core import (
    HybridSystemUW,
    HybridSystemW,
    IntervalSet,
    InputSet,
    feasible_intervals,
    phi_w,
    project_states,
    psi_u,
)
from .sets import (
    MEMBERSHIP_TOL,
    ConstraintSet,
    NonsmoothCornerError,
    SampleGrid,
    SublevelSet,
    active_gradients,
    band_set,
    is_boundary_point,
    sample,
)

CHECK_TOL = 1e-9


@dataclass(frozen=True)
class RCLFCertificate:
    """(V, r, r*) with margins ρ_c, ρ_d and the regulation slack σ.

    ``rho_c=None`` declares a V that is constant along flows; the flow
    condition is then checked with a zero margin.
    """

    V: Callable[[np.ndarray], np.ndarray]
    gradV: Callable[[np.ndarray], np.ndarray]
    r: float
    r_star: float
    rho_c: Callable[[np.ndarray], float] | None
    rho_d: Callable[[np.ndarray], float] | None
    sigma: float = 0.5

    def __post_init__(self):
        if not self.r < self.r_star:
            raise ValueError(f"need r < r*, got r={self.r}, r*={self.r_star}")
        if not 0.0 < self.sigma < 1.0:
            raise ValueError(f"sigma must lie in (0, 1), got {self.sigma}")

    def rho_c_at(self, x) -> float:
        return 0.0 if self.rho_c is None else float(self.rho_c(x))

    def rho_d_at(self, x) -> float:
        return 0.0 if self.rho_d is None else float(self.rho_d(x))


@dataclass(frozen=True)
class CertificateRegions:
    L_r: SublevelSet
    I_band: ConstraintSet
    Pi_c: ConstraintSet
    Pi_d: ConstraintSet
    M_r: ConstraintSet
    M_c: ConstraintSet
    M_d: ConstraintSet


def regions(sys: HybridSystemUW, cert: RCLFCertificate) -> CertificateRegions:
    """M_r = L_V(r) ∩ (Π_c ∪ Π_d), M_c = I(r, r*) ∩ Π_c, M_d = L_V(r) ∩ Π_d."""
    L = SublevelSet.build(sys.n, cert.V, cert.gradV, cert.r)
    I = band_set(sys.n, cert.V, cert.gradV, cert.r, cert.r_star)
    Pc = project_states(sys, "flow")
    Pd = project_states(sys, "jump")
    return CertificateRegions(L, I, Pc, Pd, L.intersect(Pc.union(Pd)), I.intersect(Pc), L.intersect(Pd))


@dataclass
class VerificationReport:
    condition: str
    grid_size: int
    worst_residual: float
    worst_point: list | None
    passed: bool
    notes: str = ""
    required: bool = True
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("worst_residual",):
            v = d[k]
            if v is not None and not np.isfinite(v):
                d[k] = None if np.isnan(v) else (1e308 if v > 0 else -1e308)
        return d


def _report(condition: str, grid: SampleGrid, residuals: Sequence[float], tol: float, notes: str = "", required: bool = True) -> VerificationReport:
    """Worst residual by max; ties go to the first point in lexicographic grid order."""
    n = len(grid)
    if n == 0:
        return VerificationReport(condition, 0, float("nan"), None, False, ("inconclusive: empty grid. " + notes).strip(), required)
    res = np.asarray(residuals, dtype=float)
    k = int(np.argmax(res))
    worst = float(res[k])
    return VerificationReport(condition, n, worst, grid.points[k].tolist(), bool(worst <= tol), notes, required)


# helper selections ----------------------------------------------------------------------

def disturbance_points(S: InputSet, interior: int = 0) -> list[np.ndarray]:
    """Extreme points of a disturbance set, plus ``interior`` evenly spaced samples."""
    pts = S.vertices()
    if interior > 0 and isinstance(S, IntervalSet) and S.dim == 1:
        for a, b in S.intervals:
            pts.extend(np.array([v]) for v in np.linspace(a, b, interior + 2)[1:-1])
    return pts


def input_candidates(S: InputSet, n_inputs: int, extra: Sequence[np.ndarray] = ()) -> list[np.ndarray]:
    pts = S.grid(n_inputs)
    for e in extra:
        e = np.asarray(e, dtype=float).reshape(-1)
        if S.contains(e):
            pts.append(e)
    return pts


def hull_meets_cone(grads: np.ndarray, vertices: Sequence[np.ndarray], tol: float = CHECK_TOL) -> bool:
    """Whether conv(vertices) intersects {v : grads @ v <= tol}."""
    V = np.array(vertices, dtype=float)
    A = np.atleast_2d(grads) @ V.T
    if A.shape[0] == 0:
        return True
    if np.any(np.all(A <= tol, axis=0)):
        return True
    if A.shape[0] == 1 or len(V) == 1:
        return bool(np.min(A) <= tol) if A.shape[0] == 1 else False
    k = len(V)
    res = linprog(np.zeros(k), A_ub=A, b_ub=np.full(A.shape[0], tol), A_eq=np.ones((1, k)), b_eq=[1.0], bounds=[(0, None)] * k, method="highs")
    return bool(res.status == 0)


def min_over_hull_in_cone(c: np.ndarray, grads: np.ndarray, vertices: Sequence[np.ndarray], tol: float = CHECK_TOL) -> float:
    """min of <c, v> over conv(vertices) ∩ {grads @ v <= tol}; +inf when empty."""
    V = np.array(vertices, dtype=float)
    obj = V @ np.asarray(c, dtype=float)
    G = np.atleast_2d(grads)
    if G.shape[0] == 0 or G.size == 0:
        return float(obj.min())
    A = G @ V.T
    k = len(V)
    res = linprog(obj, A_ub=A, b_ub=np.full(A.shape[0], tol), A_eq=np.ones((1, k)), b_eq=[1.0], bounds=[(0, None)] * k, method="highs")
    return float(res.fun) if res.status == 0 else float("inf")


def flow_meets_tangent(S: ConstraintSet, x: np.ndarray, vertices: Sequence[np.ndarray], tol: float = CHECK_TOL) -> bool:
    """conv(vertices) ∩ T_S(x) ≠ ∅, using the union-of-clauses cone."""
    if any(np.linalg.norm(v) <= tol for v in vertices):
        return True
    for G in active_gradients(S, x):
        if G.size and np.any(np.linalg.norm(G, axis=1) <= tol):
            raise NonsmoothCornerError(f"nonsmooth corner unsupported at x={np.asarray(x).tolist()}")
        if hull_meets_cone(G, vertices, tol):
            return True
    return False


# input restriction maps -----------------------------------------------------------------

def theta_d(sys: HybridSystemUW, x, w_interior: int = 0) -> InputSet:
    """Jump inputs whose every successor lands in Π_c ∪ Π_d.

    Systems may declare an exact form (``theta_d_exact``); otherwise Ψ_d is
    filtered at the extreme disturbance values.
    """
    x = np.asarray(x, dtype=float)
    if sys.theta_d_exact is not None:
        return sys.theta_d_exact(x)
    Psi = psi_u(sys, x, "jump")
    Pc = project_states(sys, "flow")
    Pd = project_states(sys, "jump")

    def lands(u) -> bool:
        Phi = phi_w(sys, x, u, "jump")
        if Phi.is_empty():
            return False
        for w in disturbance_points(Phi, w_interior):
            for xi in sys.G(x, u, w):
                if not (Pc.contains(xi) or Pd.contains(xi)):
                    return False
        return True

    if Psi.is_empty() or Psi.dim == 0:
        return IntervalSet.point0(not Psi.is_empty() and lands(np.empty(0))) if Psi.dim == 0 else Psi
    if not isinstance(Psi, IntervalSet):
        raise NotImplementedError("Θ_d is computed for scalar jump inputs only")
    pieces = []
    for a, b in Psi.intervals:
        pieces.extend(feasible_intervals(lambda us: np.array([lands(np.array([u])) for u in us]), a, b, n=129))
    return IntervalSet(tuple(pieces))


def theta_c(sys: HybridSystemUW, x) -> InputSet:
    """Ψ_c(x), cut down on ∂Π_c \\ Π_d to inputs whose undisturbed flow meets the tangent cone."""
    W = sys.W_c
    if W.dim and not W.contains(np.zeros(W.dim)):
        raise ValueError("Θ_c needs w_c = 0 to be an admissible disturbance")
    x = np.asarray(x, dtype=float)
    Psi = psi_u(sys, x, "flow")
    Pc = project_states(sys, "flow")
    Pd = project_states(sys, "jump")
    if Psi.is_empty() or not is_boundary_point(Pc, x) or Pd.contains(x):
        return Psi
    w0 = np.zeros(W.dim)

    def ok(u) -> bool:
        return flow_meets_tangent(Pc, x, sys.F(x, u, w0))

    if Psi.dim == 0:
        return IntervalSet.point0(ok(np.empty(0)))
    if not isinstance(Psi, IntervalSet):
        raise NotImplementedError("Θ_c is computed for scalar flow inputs only")
    pieces = []
    for a, b in Psi.intervals:
        pieces.extend(feasible_intervals(lambda us: np.array([ok(np.array([u])) for u in us]), a, b, n=129))
    return IntervalSet(tuple(pieces))


# certificate conditions ----------------------------------------------------------------

def verify_rho_positivity(cert: RCLFCertificate, grid_band: SampleGrid, grid_level: SampleGrid) -> list[VerificationReport]:
    """ρ_c > 0 on the I(r, r*) grid and ρ_d > 0 on the L_V(r) grid."""
    out = []
    for cond, fn, grid in (("CLF-rC", cert.rho_c, grid_band), ("CLF-rD", cert.rho_d, grid_level)):
        if fn is None:
            out.append(VerificationReport(cond, len(grid), float("nan"), None, True, "no margin declared; V is flow-invariant, condition not required", False))
            continue
        vals = np.array([float(fn(x)) for x in grid.points])
        rep = _report(cond, grid, -vals, 0.0)
        if len(grid):
            rep.passed = bool(vals.min() > 0)
            rep.extra["min_rho"] = float(vals.min())
        out.append(rep)
    return out


def _sup_flow_derivative(sys, cert, x, u, w_interior: int) -> float:
    Phi = phi_w(sys, x, u, "flow")
    if Phi.is_empty():
        return -np.inf
    g = np.asarray(cert.gradV(x), dtype=float)
    return max(float(g @ xi) for w in disturbance_points(Phi, w_interior) for xi in sys.F(x, u, w))


def _sup_jump_value(sys, cert, x, u, w_interior: int) -> float:
    Phi = phi_w(sys, x, u, "jump")
    if Phi.is_empty():
        return -np.inf
    return max(float(cert.V(xi)) for w in disturbance_points(Phi, w_interior) for xi in sys.G(x, u, w))


def clf_flow_residual(sys, cert, x, n_inputs=41, candidates=(), use_theta=False, w_interior=0) -> float:
    x = np.asarray(x, dtype=float)
    S = theta_c(sys, x) if use_theta else psi_u(sys, x, "flow")
    if S.is_empty():
        return np.inf
    vals = [_sup_flow_derivative(sys, cert, x, u, w_interior) for u in input_candidates(S, n_inputs, [k(x) for k in candidates])]
    return min(vals) + cert.rho_c_at(x)


def clf_jump_residual(sys, cert, x, n_inputs=41, candidates=(), w_interior=0) -> float:
    x = np.asarray(x, dtype=float)
    S = theta_d(sys, x, w_interior)
    if S.is_empty():
        return np.inf
    vals = [_sup_jump_value(sys, cert, x, u, w_interior) for u in input_candidates(S, n_inputs, [k(x) for k in candidates])]
    return min(vals) + cert.rho_d_at(x) - cert.r


def verify_clf_flow(sys, cert, grid: SampleGrid, n_inputs=41, candidates=(), use_theta=False, w_interior=0, tol=CHECK_TOL) -> VerificationReport:
    """inf over inputs, sup over disturbances and flow selections, of <∇V, ξ> + ρ_c on M_c."""
    res = [clf_flow_residual(sys, cert, x, n_inputs, candidates, use_theta, w_interior) for x in grid.points]
    note = "rho_c not declared; zero margin" if cert.rho_c is None else ""
    return _report("CLF-C", grid, res, tol, note)


def verify_clf_jump(sys, cert, grid: SampleGrid, n_inputs=41, candidates=(), w_interior=0, tol=CHECK_TOL) -> VerificationReport:
    """inf over Θ_d, sup over disturbances and jump selections, of V(ξ) + ρ_d − r on M_d."""
    res = [clf_jump_residual(sys, cert, x, n_inputs, candidates, w_interior) for x in grid.points]
    return _report("CLF-D", grid, res, tol * (1 + abs(cert.r)))


# closed-loop checks --------------------------------------------------------------------

def _cl_sets(sysW: HybridSystemW) -> tuple[ConstraintSet, ConstraintSet]:
    return project_states(sysW, "flow"), project_states(sysW, "jump")


def verify_closedloop_lyapunov(sysW: HybridSystemW, cert: RCLFCertificate, grids: dict, w_interior: int = 0, tol: float = CHECK_TOL) -> list[VerificationReport]:
    """ly1 (flow decrease on the band), ly2 (jump level), lyJump (successors stay in Π_c ∪ Π_d).

    ``grids`` maps ``band`` to I ∩ Π_c, ``level`` to L_V(r) ∩ Π_d and
    ``target`` to M_r ∩ Π_d, all for the closed loop.
    """
    empty = np.empty(0)
    band, level, target = grids["band"], grids["level"], grids["target"]
    flow_res = []
    for x in band.points:
        flow_res.append(_sup_flow_derivative(sysW, cert, x, empty, w_interior))
    jump_res = []
    for x in level.points:
        jump_res.append(_sup_jump_value(sysW, cert, x, empty, w_interior) - cert.r)
    Pc, Pd = _cl_sets(sysW)
    both = Pc.union(Pd)
    land_res = []
    for x in target.points:
        Phi = phi_w(sysW, x, empty, "jump")
        worst = -np.inf
        for w in disturbance_points(Phi, w_interior):
            for xi in sysW.G(x, empty, w):
                v = both.max_violation(xi)
                worst = max(worst, 0.0 if both.contains(xi) else v)
        land_res.append(worst if np.isfinite(worst) else 0.0)
    return [
        _report("ly1", band, flow_res, tol),
        _report("ly2", level, jump_res, tol * (1 + abs(cert.r))),
        _report("lyJump", target, land_res, 0.0),
    ]


def verify_invariance_extras(
    sysW: HybridSystemW,
    cert: RCLFCertificate,
    grids: dict,
    attest_linear_growth: bool = False,
    tol: float = CHECK_TOL,
) -> list[VerificationReport]:
    """Ly1 (∇V ≠ 0 on V = r), Ly2/Ly3 (tangent conditions on ∂Π_c off Π_d), Ly4 (boundedness).

    ``grids``: ``level_c`` points with V = r in Π_c; ``boundary_c`` points of
    L_V(r) ∩ ∂Π_c; ``M_r`` a sample of the target set; ``box`` the sampling box.
    """
    Pc, Pd = _cl_sets(sysW)
    empty = np.empty(0)
    w0 = np.zeros(sysW.W_c.dim)
    level_c = grids["level_c"]
    gnorm = [-float(np.linalg.norm(cert.gradV(x))) for x in level_c.points]
    ly1 = _report("Ly1", level_c, gnorm, -tol)

    bd = grids["boundary_c"]
    keep = [i for i, x in enumerate(bd.points) if is_boundary_point(Pc, x) and not Pd.contains(x)]
    bd_pts = SampleGrid(bd.points[keep].reshape(-1, sysW.n), bd.provenance + "\\Pi_d", bd.resolution, bd.box)
    ly2_res = []
    ly3_res = []
    ly3_pts = []
    for x in bd_pts.points:
        verts = sysW.F(x, empty, w0)
        ly2_res.append(0.0 if flow_meets_tangent(Pc, x, verts, tol) else 1.0)
        if abs(float(cert.V(x)) - cert.r) <= 1e-9 * (1 + abs(cert.r)):
            best = np.inf
            for G in active_gradients(Pc, x):
                best = min(best, min_over_hull_in_cone(cert.gradV(x), G, verts, tol))
            ly3_res.append(best)
            ly3_pts.append(x)
    ly2 = _report("Ly2", bd_pts, ly2_res, 0.0, "vacuous: no sampled points" if not len(bd_pts) else "")
    if not len(bd_pts):
        ly2.passed = True
    g3 = SampleGrid(np.array(ly3_pts).reshape(-1, sysW.n), "level∩∂Pi_c", bd.resolution, bd.box)
    ly3 = _report("Ly3", g3, ly3_res, -tol)
    if not len(g3):
        ly3.passed = True
        ly3.notes = "vacuous on the sampled superset: no grid point on V = r ∩ ∂Π_c \\ Π_d"

    if attest_linear_growth:
        ly4 = VerificationReport("Ly4", 0, 0.0, None, True, "attested: linear growth of the flow map")
    else:
        target = grids["M_r"]
        box = np.array(grids["box"], dtype=float)
        span = box[:, 1] - box[:, 0]
        edge = np.any(np.isclose(target.points, box[:, 0], atol=1e-12 * (1 + span)) | np.isclose(target.points, box[:, 1], atol=1e-12 * (1 + span)), axis=1) if len(target) else np.zeros(0, bool)
        ly4 = _report("Ly4", target, edge.astype(float), 0.0, "sampled target region must not reach the sampling box edge")
    return [ly1, ly2, ly3, ly4]


def verify_generic_set(sysW: HybridSystemW, K: ConstraintSet, grids: dict, w_interior: int = 9, tol: float = CHECK_TOL) -> list[VerificationReport]:
    """Invariance items for a set K that is not a sublevel set.

    rcFI2: jumps from K ∩ Π_d land in K. rcFI3: flows on ∂(K ∩ Π_c) point into
    the tangent cone. rcFI5: points of K ∩ ∂Π_c where flow cannot continue lie
    in Π_d. ``grids`` keys: ``jump`` (K ∩ Π_d), ``boundary`` (∂(K ∩ Π_c)),
    ``flow_boundary`` (∂Π_c ∩ K).
    """
    empty = np.empty(0)
    Pc, Pd = _cl_sets(sysW)
    KC = K.intersect(Pc)

    jump = grids["jump"]
    r2 = []
    for x in jump.points:
        worst = -np.inf
        Phi = phi_w(sysW, x, empty, "jump")
        for w in disturbance_points(Phi, w_interior):
            for xi in sysW.G(x, empty, w):
                worst = max(worst, K.max_violation(xi))
        r2.append(worst)
    tolK = max(c.tolerance(tol) for cl in K.clauses for c in cl) if K.clauses else tol
    rep2 = _report("rcFI2", jump, r2, tolK)

    bd = grids["boundary"]
    r3 = []
    for x in bd.points:
        worst = -np.inf
        Phi = phi_w(sysW, x, empty, "flow")
        grads = active_gradients(KC, x)
        for w in disturbance_points(Phi, w_interior):
            for v in sysW.F(x, empty, w):
                if np.linalg.norm(v) <= tol:
                    worst = max(worst, 0.0)
                    continue
                best = np.inf
                for G in grads:
                    best = min(best, float(np.max(G @ v)) if G.size else -np.inf)
                worst = max(worst, best if np.isfinite(best) else 0.0)
        r3.append(worst if np.isfinite(worst) else 0.0)
    rep3 = _report("rcFI3", bd, r3, tol)

    fb = grids["flow_boundary"]
    r5 = []
    w0 = np.zeros(sysW.W_c.dim)
    for x in fb.points:
        stuck = not flow_meets_tangent(Pc, x, sysW.F(x, empty, w0), tol) if is_boundary_point(Pc, x) else False
        r5.append(1.0 if stuck and not Pd.contains(x) else 0.0)
    rep5 = _report("rcFI5", fb, r5, 0.0)
    if not len(fb):
        rep5.passed = True
        rep5.notes = "vacuous: no sampled point of K on the flow-set boundary"
    return [rep2, rep3, rep5]


# grid builders --------------------------------------------------------------------------

def certificate_grids(sys: HybridSystemUW, cert: RCLFCertificate, box, resolution: float, extra_points=None) -> dict:
    """Grids on which the open-loop certificate conditions are evaluated."""
    R = regions(sys, cert)
    return {
        "band": sample(R.I_band, box, resolution, "interior", extra_points),
        "level": sample(R.L_r, box, resolution, "interior", extra_points),
        "M_c": sample(R.M_c, box, resolution, "interior", extra_points),
        "M_d": sample(R.M_d, box, resolution, "interior", extra_points),
    }


def closed_loop_grids(sysW: HybridSystemW, cert: RCLFCertificate, box, resolution: float, extra_points=None) -> dict:
    Pc, Pd = _cl_sets(sysW)
    L = SublevelSet.build(sysW.n, cert.V, cert.gradV, cert.r)
    I = band_set(sysW.n, cert.V, cert.gradV, cert.r, cert.r_star)
    # the boundedness probe samples a box larger than the verification box
    padded = [(lo - 0.1 * (hi - lo) - resolution, hi + 0.1 * (hi - lo) + resolution) for lo, hi in box]
    level_surface = sample(L, box, resolution, "boundary")
    level_c = level_surface.points[Pc.contains_batch(level_surface.points)] if len(level_surface) else level_surface.points
    return {
        "band": sample(I.intersect(Pc), box, resolution, "interior", extra_points),
        "level": sample(L.intersect(Pd), box, resolution, "interior", extra_points),
        "target": sample(L.intersect(Pc.union(Pd)).intersect(Pd), box, resolution, "interior", extra_points),
        "level_c": SampleGrid(np.asarray(level_c).reshape(-1, sysW.n), "V=r∩Pi_c", resolution, tuple(map(tuple, box))),
        "boundary_c": sample(Pc.intersect(L), box, resolution, "boundary", extra_points),
        "M_r": sample(L.intersect(Pc.union(Pd)), padded, resolution, "interior"),
        "box": [tuple(b) for b in padded],
    }


def generic_set_grids(sysW: HybridSystemW, K: ConstraintSet, box, resolution: float) -> dict:
    Pc, Pd = _cl_sets(sysW)
    fb = sample(Pc, box, resolution, "boundary")
    inK = fb.points[K.contains_batch(fb.points)] if len(fb) else fb.points
    return {
        "jump": sample(K.intersect(Pd), box, resolution, "interior"),
        "boundary": sample(K.intersect(Pc), box, resolution, "boundary"),
        "flow_boundary": SampleGrid(np.asarray(inK).reshape(-1, sysW.n), "K∩∂Pi_c", resolution, tuple(map(tuple, box))),
    }
