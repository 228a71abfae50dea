"""Reproducible runs on the built-in systems, shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import FeedbackPair, close_loop
from .simulator import SimConfig, UniformPerInterval, UniformPerJump, ParamValue, check_invariance, simulate
from .sets import ConstraintSet, SublevelSet
from .systems import SystemBundle, ball_energy

GROUND = 0  # clause index of the ground impact set in the ball's jump set
DEFAULT_SEEDS = tuple(range(20))


@dataclass
class BallRun:
    seed: int
    ground_impacts: int
    top_jumps: int
    energy_min: float
    energy_max: float
    height_min: float
    height_max: float
    peaks: list[float]
    max_flow_energy_drift: float
    termination: str


def ball_metrics(bundle: SystemBundle, sol, seed: int = 0) -> BallRun:
    p = bundle.params
    E = ball_energy(p)
    x = sol.arc.x
    energies = E(x.T)
    peaks, drift = [], 0.0
    for jj in range(int(sol.arc.j[-1]) + 1):
        seg = sol.arc.j == jj
        if not np.any(seg):
            continue
        e = energies[seg]
        drift = max(drift, float(np.max(np.abs(e - e[0]))))
    # a peak is the largest height between two consecutive ground impacts;
    # the trailing stretch counts only once the ball has started to fall
    ground_js = [k + 1 for k, c in enumerate(sol.jump_clause) if c == GROUND]
    bounds = ground_js + [int(sol.arc.j[-1]) + 1]
    for a, b in zip(bounds[:-1], bounds[1:]):
        seg = (sol.arc.j >= a) & (sol.arc.j < b)
        xs = x[seg]
        if len(xs) == 0:
            continue
        finished = b in ground_js or b > a + 1 or xs[-1, 1] < 0
        if finished:
            peaks.append(float(xs[:, 0].max()))
    counts = sol.impact_counts()
    return BallRun(
        seed=seed,
        ground_impacts=counts.get(GROUND, 0),
        top_jumps=sum(v for k, v in counts.items() if k != GROUND),
        energy_min=float(energies.min()),
        energy_max=float(energies.max()),
        height_min=float(x[:, 0].min()),
        height_max=float(x[:, 0].max()),
        peaks=peaks,
        max_flow_energy_drift=drift,
        termination=sol.termination.value,
    )


def ball_violations(bundle: SystemBundle, run: BallRun, tol: float = 1e-6, peak_range=(10.0, 12.0)) -> list[str]:
    p = bundle.params
    out = []
    if run.energy_min < p.gamma * p.h_min - tol:
        out.append(f"energy {run.energy_min:.6f} below {p.gamma * p.h_min}")
    if run.energy_max > p.E_max + tol:
        out.append(f"energy {run.energy_max:.6f} above {p.E_max}")
    if run.height_min < -tol or run.height_max > p.h_max + tol:
        out.append(f"height range [{run.height_min}, {run.height_max}] leaves [0, {p.h_max}]")
    bad = [h for h in run.peaks if not (peak_range[0] - tol <= h <= peak_range[1] + tol)]
    if bad:
        out.append(f"peaks outside {peak_range}: {bad[:3]}")
    return out


def ball_sim_config(seed: int, T: float = 20.0) -> SimConfig:
    return SimConfig(horizon_T=T, horizon_J=10_000, seed=seed, wd_policy=UniformPerJump(), wc_policy=UniformPerInterval())


def run_ball(bundle: SystemBundle, feedback: str | FeedbackPair, seed: int, T: float = 20.0, x0=(11.0, 0.0)):
    fb = bundle.feedbacks[feedback] if isinstance(feedback, str) else feedback
    sysW = close_loop(bundle.system, fb)
    sol = simulate(sysW, x0, ball_sim_config(seed, T))
    return sol, ball_metrics(bundle, sol, seed)


def ball_comparison(bundle: SystemBundle, seeds=DEFAULT_SEEDS, T: float = 20.0) -> dict:
    """Ground-impact counts for the affine and the minimum-norm impact laws."""
    rows = []
    for s in seeds:
        _, a = run_ball(bundle, "bkd", s, T)
        _, b = run_ball(bundle, "kmd", s, T)
        rows.append({
            "seed": s,
            "impacts_kd": a.ground_impacts,
            "impacts_kmd": b.ground_impacts,
            "violations_kd": ball_violations(bundle, a),
            "violations_kmd": ball_violations(bundle, b),
        })
    return {
        "rows": rows,
        "impacts_kd": [r["impacts_kd"] for r in rows],
        "impacts_kmd": [r["impacts_kmd"] for r in rows],
        "all_peaks_in_range": all(not r["violations_kd"] and not r["violations_kmd"] for r in rows),
    }


# robot arm -----------------------------------------------------------------------------

def arm_initial_conditions(bundle: SystemBundle, n: int = 6, seed: int = 0, level: float = 0.9, n_in_jump: int = 2) -> np.ndarray:
    """Seeded states with V <= level*r, the first ``n_in_jump`` of them in the jump set."""
    rng = np.random.Generator(np.random.PCG64(seed))
    cert, p = bundle.certificate, bundle.params
    (a0, a1), (b0, b1) = bundle.box
    want_jump, want_flow, out = n_in_jump, n - n_in_jump, []
    while want_jump + want_flow > 0:
        x = np.array([rng.uniform(a0, a1), rng.uniform(b0, b1)])
        if cert.V(x) > level * cert.r:
            continue
        in_d = x[0] >= 0 and x[1] >= p.v_bar
        in_c = x[0] <= 0 or x[1] <= p.v_bar
        if in_d and want_jump > 0:
            out.append(x)
            want_jump -= 1
        elif in_c and not in_d and want_flow > 0:
            out.append(x)
            want_flow -= 1
    return np.array(out)


@dataclass
class ArmRun:
    x0: list[float]
    max_V: float
    final_norm: float
    jump_states: list[list[float]] = field(default_factory=list)
    invariant: bool = True
    termination: str = ""


def run_arm(bundle: SystemBundle, x0, seed: int = 0, T: float = 30.0, feedback: str | FeedbackPair = "linear", tol: float = 1e-6) -> ArmRun:
    fb = bundle.feedbacks[feedback] if isinstance(feedback, str) else feedback
    sysW = close_loop(bundle.system, fb)
    cfg = SimConfig(horizon_T=T, horizon_J=10_000, seed=seed, step_max=0.01)
    sol = simulate(sysW, x0, cfg)
    cert = bundle.certificate
    V = np.array([cert.V(x) for x in sol.arc.x])
    jumps = [sol.arc.x[i].tolist() for i in sol.jump_rows]
    return ArmRun(
        x0=list(map(float, x0)),
        max_V=float(V.max()),
        final_norm=float(np.linalg.norm(sol.arc.x[-1])),
        jump_states=jumps,
        invariant=bool(V.max() <= cert.r + tol),
        termination=sol.termination.value,
    )


def arm_jump_violations(bundle: SystemBundle, run: ArmRun, tol: float = 1e-6) -> list[list[float]]:
    vb = bundle.params.v_bar
    return [x for x in run.jump_states if not (x[0] >= -tol and x[1] >= vb - tol)]


# planar ---------------------------------------------------------------------------------

def planar_initial_conditions(n: int = 10, seed: int = 0) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    rad = np.sqrt(rng.uniform(1.0, 2.0, n))
    ang = rng.uniform(0, 2 * np.pi, n)
    return np.c_[rad * np.cos(ang), rad * np.sin(ang)]


def run_planar(bundle: SystemBundle, x0, seed: int = 0, T: float = 10.0, jump_selection="random", flow_p: float | None = None):
    sysW = close_loop(bundle.system, bundle.feedbacks[bundle.default_feedback])
    rng = np.random.Generator(np.random.PCG64(seed + 1000))
    p = float(rng.uniform()) if flow_p is None else flow_p
    cfg = SimConfig(horizon_T=T, horizon_J=200, seed=seed, jump_selection=jump_selection, flow_selector=ParamValue(p))
    sol = simulate(sysW, x0, cfg)
    return sol, check_invariance(sol, bundle.K)


def level_target(bundle: SystemBundle) -> ConstraintSet:
    c = bundle.certificate
    return SublevelSet.build(bundle.system.n, c.V, c.gradV, c.r)
