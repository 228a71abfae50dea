"""Closed-loop simulation of hybrid inclusions: RK4 flows, localized events, seeded disturbances."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    DisturbanceSignal,
    HybridArc,
    HybridSystemW,
    IntervalSet,
    InputSet,
    SolutionPair,
    TerminationReason,
    phi_w,
    project_states,
)
from .rclf import flow_meets_tangent
from .sets import MEMBERSHIP_TOL, ConstraintSet, NonsmoothCornerError

log = logging.getLogger(__name__)

RNG_ALGORITHM = "numpy.random.PCG64"
ESCAPE_BOUND = 1e12


@dataclass(frozen=True)
class Constant:
    value: tuple[float, ...]


@dataclass(frozen=True)
class UniformPerJump:
    """A fresh uniform draw from the admissible disturbance set at each jump."""


@dataclass(frozen=True)
class UniformPerInterval:
    """A fresh uniform draw from the admissible disturbance set at the start of each flow piece."""


DisturbancePolicy = Constant | UniformPerJump | UniformPerInterval


@dataclass(frozen=True)
class NamedSelection:
    index: int


@dataclass(frozen=True)
class ParamValue:
    """Convex weight in [0, 1] between the first and last listed selection."""

    p: float


FlowSelector = NamedSelection | ParamValue


@dataclass(frozen=True)
class SimConfig:
    horizon_T: float = 10.0
    horizon_J: int = 1000
    step_init: float = 0.01
    step_max: float = 0.01
    step_min: float = 1e-10
    event_tol: float = 1e-9
    priority: str = "JumpFirst"
    seed: int = 0
    wc_policy: DisturbancePolicy = field(default_factory=UniformPerInterval)
    wd_policy: DisturbancePolicy = field(default_factory=UniformPerJump)
    flow_selector: FlowSelector = field(default_factory=lambda: ParamValue(0.0))
    jump_selection: int | str = 0
    tol: float = MEMBERSHIP_TOL

    def __post_init__(self):
        if self.priority not in ("JumpFirst", "FlowFirst"):
            raise ValueError("priority must be JumpFirst or FlowFirst")
        if self.horizon_T < 0 or self.horizon_J < 0:
            raise ValueError("horizons must be non-negative")
        if not 0 < self.step_min <= self.step_max:
            raise ValueError("need 0 < step_min <= step_max")


class SimulationError(ValueError):
    """The requested solution cannot be started or continued."""


def _select(vertices: Sequence[np.ndarray], sel: FlowSelector) -> np.ndarray:
    if len(vertices) == 1:
        return vertices[0]
    if isinstance(sel, NamedSelection):
        return vertices[min(sel.index, len(vertices) - 1)]
    return (1.0 - sel.p) * vertices[0] + sel.p * vertices[-1]


def _draw(policy: DisturbancePolicy, S: InputSet, rng: np.random.Generator, dim: int) -> np.ndarray | None:
    if S.is_empty():
        return None
    if isinstance(policy, Constant):
        v = np.asarray(policy.value, dtype=float).reshape(dim)
        return v if S.contains(v) else None
    return S.sample(rng)


class _Flow:
    """Vector field of one flow piece with the disturbance held fixed."""

    def __init__(self, sysW: HybridSystemW, w: np.ndarray, sel: FlowSelector):
        self.sysW = sysW
        self.w = w
        self.sel = sel

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return _select(self.sysW.flow_selections(x, self.w), self.sel)

    def rk4(self, x: np.ndarray, h: float) -> np.ndarray:
        k1 = self(x)
        k2 = self(x + 0.5 * h * k1)
        k3 = self(x + 0.5 * h * k2)
        k4 = self(x + h * k3)
        return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def classify_termination(
    sysW: HybridSystemW,
    x: np.ndarray,
    last_phase: str,
    budget_exhausted: bool = False,
    w_c: np.ndarray | None = None,
    tol: float = MEMBERSHIP_TOL,
    boundary_tol: float | None = None,
) -> TerminationReason:
    """Why a solution cannot be extended from ``x``.

    Budget exhaustion wins. After a jump, a state outside Π_c ∪ Π_d ends
    the solution outside the sets. After flowing, a state that is only in the
    closure band of Π_c ends at its boundary, one where no flow selection
    meets the tangent cone ends with no continuation, and a non-finite state
    is an escape.
    """
    x = np.asarray(x, dtype=float)
    if budget_exhausted:
        return TerminationReason.HorizonReached
    if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > ESCAPE_BOUND:
        return TerminationReason.EndedFlowFiniteEscape
    Pc = project_states(sysW, "flow")
    Pd = project_states(sysW, "jump")
    in_c = Pc.contains(x, tol)
    in_d = Pd.contains(x, tol)
    if last_phase == "jump" and not (in_c or in_d):
        return TerminationReason.EndedJumpOutside
    if in_d:
        return TerminationReason.EndedJumpNoContinuation
    if not in_c:
        btol = boundary_tol if boundary_tol is not None else 1e3 * tol
        if Pc.contains(x, btol):
            return TerminationReason.EndedFlowBoundary
        return TerminationReason.EndedJumpOutside if last_phase == "jump" else TerminationReason.EndedFlowBoundary
    Phi = phi_w(sysW, x, np.empty(0), "flow")
    ws = [w_c] if w_c is not None else Phi.vertices()
    for w in ws:
        try:
            if flow_meets_tangent(Pc, x, sysW.flow_selections(x, w), 1e3 * tol):
                return TerminationReason.Complete
        except NonsmoothCornerError:
            continue
    return TerminationReason.EndedFlowNoContinuation


class _Recorder:
    def __init__(self, n: int, dc: int, dd: int):
        self.t: list[float] = []
        self.j: list[int] = []
        self.x: list[np.ndarray] = []
        self.wc: list[np.ndarray] = []
        self.wd: list[np.ndarray] = []
        self.jump_clause: list[int] = []
        self.jump_rows: list[int] = []
        self.dc = dc
        self.dd = dd

    def add(self, t: float, j: int, x: np.ndarray, wc: np.ndarray | None) -> None:
        self.t.append(float(t))
        self.j.append(int(j))
        self.x.append(np.array(x, dtype=float))
        self.wc.append(np.full(self.dc, np.nan) if wc is None else np.array(wc, dtype=float))

    def set_wc(self, wc: np.ndarray) -> None:
        self.wc[-1] = np.array(wc, dtype=float)

    def build(self, reason: TerminationReason, diag: dict) -> SolutionPair:
        arc = HybridArc(np.array(self.t), np.array(self.j, dtype=int), np.array(self.x).reshape(len(self.t), -1))
        dist = DisturbanceSignal(np.array(self.wc).reshape(len(self.t), self.dc), np.array(self.wd).reshape(len(self.wd), self.dd))
        return SolutionPair(arc, dist, reason, list(self.jump_clause), list(self.jump_rows), diag)


def simulate(sysW: HybridSystemW, x0: Sequence[float], cfg: SimConfig) -> SolutionPair:
    """Simulate one solution pair of the closed loop from ``x0``."""
    x = np.asarray(x0, dtype=float).reshape(-1)
    if x.size != sysW.n:
        raise ValueError(f"x0 has dimension {x.size}, system has {sysW.n}")
    Pc = project_states(sysW, "flow")
    Pd = project_states(sysW, "jump")
    tol = cfg.tol
    if not np.all(np.isfinite(x)):
        raise SimulationError(f"x0={x.tolist()} is not finite")
    if not (Pc.contains(x, tol) or Pd.contains(x, tol)):
        raise SimulationError(f"x0={x.tolist()} is in neither the flow set nor the jump set")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    empty = np.empty(0)
    dc, dd = sysW.W_c.dim, sysW.W_d.dim
    rec = _Recorder(sysW.n, dc, dd)
    jump_tol = max(tol, cfg.event_tol)
    st = {"t": 0.0, "j": 0, "x": x, "wc": None, "last": "none"}
    diag: dict = {"rng": RNG_ALGORITHM, "seed": cfg.seed, "event_residuals": [], "stalls": 0}
    rec.add(0.0, 0, x, None)

    def finish(reason: TerminationReason) -> SolutionPair:
        diag["flow_time"] = st["t"]
        return rec.build(reason, diag)

    def jump() -> TerminationReason | None:
        xv = st["x"]
        Phi = phi_w(sysW, xv, empty, "jump", jump_tol)
        wd = _draw(cfg.wd_policy, Phi, rng, dd)
        clause = None if wd is None else sysW.member_clause("jump", xv, empty, wd, jump_tol)
        if clause is None:
            return TerminationReason.EndedJumpNoContinuation
        succ = sysW.jump_selections(xv, wd)
        pick = int(rng.integers(len(succ))) if cfg.jump_selection == "random" else min(int(cfg.jump_selection), len(succ) - 1)
        rec.wd.append(wd)
        rec.jump_clause.append(int(clause))
        rec.jump_rows.append(len(rec.t) - 1)
        st["j"] += 1
        st["x"] = np.asarray(succ[pick], dtype=float)
        st["wc"] = None
        st["last"] = "jump"
        rec.add(st["t"], st["j"], st["x"], None)
        if not (Pc.contains(st["x"], tol) or Pd.contains(st["x"], tol)):
            return TerminationReason.EndedJumpOutside
        return None

    def flow_piece(wc: np.ndarray) -> tuple[TerminationReason | None, bool]:
        """Integrate until the horizon or the first event; report escape and progress."""
        field_ = _Flow(sysW, wc, cfg.flow_selector)
        watch_d = cfg.priority == "JumpFirst"

        # Events compare raw residuals against event_tol on both sides, so the
        # stop predicate is monotone across a crossing and a localized jump
        # state lies within event_tol of D.
        def entered(xv: np.ndarray) -> bool:
            return Pd.max_violation(xv) <= cfg.event_tol

        def left_flow_set(xv: np.ndarray) -> bool:
            return sysW.C.max_violation(np.r_[xv, wc]) > min(cfg.event_tol, tol)

        def bad(xv: np.ndarray) -> bool:
            if not np.all(np.isfinite(xv)):
                return True
            if left_flow_set(xv):
                return True
            return watch_d and entered(xv)

        progressed = False
        while st["t"] < cfg.horizon_T:
            xv, t = st["x"], st["t"]
            h = min(cfg.step_max, cfg.horizon_T - t)
            x_next = field_.rk4(xv, h)
            while not np.all(np.isfinite(x_next)) and h > cfg.step_min:
                h *= 0.5
                x_next = field_.rk4(xv, h)
            if not np.all(np.isfinite(x_next)) or np.max(np.abs(x_next)) > ESCAPE_BOUND:
                return TerminationReason.EndedFlowFiniteEscape, progressed
            if not bad(x_next):
                st["x"], st["t"] = x_next, t + h
                rec.add(st["t"], st["j"], st["x"], wc)
                progressed = True
                continue
            lo, hi = 0.0, h
            speed = float(np.linalg.norm(field_(xv))) + 1.0
            while hi - lo > cfg.event_tol / speed and hi - lo > 1e-15 * (1 + t):
                mid = 0.5 * (lo + hi)
                if bad(field_.rk4(xv, mid)):
                    hi = mid
                else:
                    lo = mid
            x_lo = field_.rk4(xv, lo) if lo > 0 else xv
            x_hi = field_.rk4(xv, hi)
            if entered(x_lo) or not (np.all(np.isfinite(x_hi)) and entered(x_hi)):
                tau, x_new = lo, x_lo
            else:
                tau, x_new = hi, x_hi
            if tau > 0:
                st["x"], st["t"] = x_new, t + tau
                rec.add(st["t"], st["j"], st["x"], wc)
                if Pd.contains(x_new, jump_tol):
                    diag["event_residuals"].append(max(Pd.max_violation(x_new), 0.0))
            progressed = progressed or tau > 10 * cfg.event_tol / speed or (tau > 0 and Pd.contains(x_new, jump_tol))
            break
        return None, progressed

    while True:
        if st["t"] >= cfg.horizon_T or st["j"] >= cfg.horizon_J:
            return finish(TerminationReason.HorizonReached)
        xv = st["x"]
        in_d = Pd.contains(xv, jump_tol)
        in_c = Pc.contains(xv, tol)
        if in_d and (cfg.priority == "JumpFirst" or not in_c):
            reason = jump()
            if reason is not None:
                return finish(reason)
            continue
        if not in_c:
            return finish(classify_termination(sysW, xv, st["last"], tol=tol))
        Phi_c = phi_w(sysW, xv, empty, "flow", tol)
        wc = st["wc"]
        if wc is None or isinstance(cfg.wc_policy, UniformPerInterval) or not Phi_c.contains(wc):
            wc = _draw(cfg.wc_policy, Phi_c, rng, dc)
            if wc is None:
                return finish(TerminationReason.EndedFlowNoContinuation)
        st["wc"] = wc
        rec.set_wc(wc)
        reason, progressed = flow_piece(wc)
        if reason is not None:
            return finish(reason)
        st["last"] = "flow"
        if progressed or st["t"] >= cfg.horizon_T:
            diag["stalls"] = 0
            continue
        if Pd.contains(st["x"], jump_tol):
            reason = jump()
            if reason is not None:
                return finish(reason)
            continue
        verdict = classify_termination(sysW, st["x"], "flow", w_c=wc, tol=tol)
        diag["stalls"] += 1
        if verdict == TerminationReason.Complete and not isinstance(cfg.wc_policy, Constant) and diag["stalls"] < 3:
            continue
        diag["stall_verdict"] = verdict.value
        return finish(TerminationReason.EndedFlowNoContinuation)


# invariance and solution checks -----------------------------------------------------------

@dataclass(frozen=True)
class InvarianceResult:
    ok: bool
    worst_violation: float
    where: tuple[float, int] | None

    def to_dict(self) -> dict:
        return {"ok": self.ok, "worst_violation": self.worst_violation, "where": list(self.where) if self.where else None}


def check_invariance(sol: SolutionPair, target: ConstraintSet, tol: float = 1e-6) -> InvarianceResult:
    """Largest constraint excess of the stored states relative to ``target``."""
    X = sol.arc.x
    worst = -np.inf
    where = None
    for i in range(len(X)):
        v = target.max_violation(X[i])
        if v > worst:
            worst, where = v, (float(sol.arc.t[i]), int(sol.arc.j[i]))
    return InvarianceResult(bool(worst <= tol), float(worst), where)


def solution_residuals(sysW: HybridSystemW, sol: SolutionPair, tol: float = MEMBERSHIP_TOL) -> dict:
    """Membership residuals of a stored solution pair: flow samples in C_w, pre-jump states in D_w."""
    empty = np.empty(0)
    Pc = project_states(sysW, "flow")
    jumps = set(sol.jump_rows)
    worst_flow = -np.inf
    worst_jump = -np.inf
    bad_flow = 0
    bad_jump = 0
    for i in range(len(sol.arc)):
        x = sol.arc.x[i]
        if i in jumps:
            k = sol.jump_rows.index(i)
            z = np.r_[x, empty, sol.disturbance.wd[k]]
            v = sysW.D.max_violation(z)
            worst_jump = max(worst_jump, v)
            bad_jump += int(not sysW.in_jump(x, sol.disturbance.wd[k], max(tol, 1e-9)))
        else:
            v = Pc.max_violation(x)
            worst_flow = max(worst_flow, v)
            bad_flow += int(not Pc.contains(x, tol))
    return {"flow_violations": bad_flow, "jump_violations": bad_jump, "worst_flow": worst_flow, "worst_jump": worst_jump}


# serialization ---------------------------------------------------------------------------

def trajectory_rows(sol: SolutionPair) -> list[list]:
    n = sol.arc.x.shape[1]
    jumps = {row: k for k, row in enumerate(sol.jump_rows)}
    dd = sol.disturbance.wd.shape[1] if sol.disturbance.wd.ndim == 2 else 0
    rows = []
    for i in range(len(sol.arc)):
        k = jumps.get(i)
        phase = "jump" if k is not None else ("end" if i == len(sol.arc) - 1 else "flow")
        wd = list(sol.disturbance.wd[k]) if k is not None else [""] * dd
        rows.append([sol.arc.t[i], int(sol.arc.j[i]), *sol.arc.x[i][:n], phase, *sol.disturbance.wc[i], *wd])
    return rows


def to_csv(sol: SolutionPair) -> str:
    n = sol.arc.x.shape[1]
    dc = sol.disturbance.wc.shape[1]
    dd = sol.disturbance.wd.shape[1] if sol.disturbance.wd.ndim == 2 else 0
    header = ["t", "j", *[f"x{i + 1}" for i in range(n)], "phase", *[f"wc{i + 1}" for i in range(dc)], *[f"wd{i + 1}" for i in range(dd)]]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in trajectory_rows(sol):
        w.writerow([("" if isinstance(v, float) and np.isnan(v) else repr(float(v))) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def from_csv(text: str, termination: TerminationReason | str = TerminationReason.Complete) -> SolutionPair:
    """Rebuild a solution pair from :func:`to_csv` output (jump-set clause labels are not stored)."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    xi = [i for i, h in enumerate(header) if h.startswith("x")]
    ci = [i for i, h in enumerate(header) if h.startswith("wc")]
    di = [i for i, h in enumerate(header) if h.startswith("wd")]
    ts, js, xs, wcs, wds, rows_j = [], [], [], [], [], []
    for r, row in enumerate(reader):
        ts.append(float(row[0]))
        js.append(int(row[1]))
        xs.append([float(row[i]) for i in xi])
        wcs.append([float(row[i]) if row[i] != "" else np.nan for i in ci])
        if row[header.index("phase")] == "jump":
            wds.append([float(row[i]) for i in di])
            rows_j.append(r)
    arc = HybridArc(np.array(ts), np.array(js, dtype=int), np.array(xs))
    dist = DisturbanceSignal(np.array(wcs).reshape(len(ts), len(ci)), np.array(wds).reshape(len(wds), len(di)))
    return SolutionPair(arc, dist, TerminationReason(termination), [], rows_j, {})


def summary(sol: SolutionPair, invariance: Sequence[tuple[str, InvarianceResult]] = ()) -> dict:
    counts = sol.impact_counts()
    return {
        "termination": sol.termination.value,
        "jumps": sol.jumps,
        "flow_time": float(sol.arc.t[-1]) if len(sol.arc) else 0.0,
        "invariance_checks": [{"target": name, **res.to_dict()} for name, res in invariance],
        "invariant": all(res.ok for _, res in invariance) if invariance else None,
        "impact_count_per_jumpset": {str(k): v for k, v in sorted(counts.items())},
    }


def summary_json(sol: SolutionPair, invariance=()) -> str:
    return json.dumps(summary(sol, invariance), indent=2, sort_keys=True)
