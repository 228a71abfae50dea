"""Acceptance criteria 1-9, one printed PASS/FAIL line each.

Tolerances are pinned here and not read from the library so that a change
in the package defaults cannot silently loosen a criterion.
"""

import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import halfline_system, jump_outside_system, resting_system
from invhyb.core import TerminationReason, close_loop
from invhyb.experiments import (
    DEFAULT_SEEDS,
    arm_initial_conditions,
    arm_jump_violations,
    planar_initial_conditions,
    run_arm,
    run_ball,
    run_planar,
)
from invhyb.rclf import certificate_grids, generic_set_grids, verify_clf_jump, verify_generic_set, verify_rho_positivity
from invhyb.simulator import SimConfig, simulate
from invhyb.synthesis import synthesize
from invhyb.systems import ArmParams, ball_kappa_min_norm

STATE_TOL = 1e-6
CLOSED_FORM_TOL = 1e-9
DRIFT_TOL = 1e-6
CLF_D_BOUND = -0.49
RHO_D_EXPECTED = 0.981
RUN_SECONDS = 5.0
KD_REFERENCE, KD_BAND = 14, 3
KMD_REFERENCE, KMD_BAND = 7, 2
NORM_TOL = 1e-12


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


@pytest.fixture(scope="module")
def ball_runs(ball):
    """Both impact laws over the default seeds, with wall-clock per run."""
    runs = {"bkd": [], "kmd": []}
    for law in runs:
        for s in DEFAULT_SEEDS:
            t0 = time.perf_counter()
            sol, m = run_ball(ball, law, s, T=20.0)
            runs[law].append((sol, m, time.perf_counter() - t0))
    return runs


def test_criterion_1_ball_invariance(ball, ball_runs, verdict):
    p = ball.params
    bad = []
    slowest = 0.0
    for sol, m, dt in ball_runs["bkd"]:
        x = sol.arc.x
        E = p.gamma * x[:, 0] + 0.5 * x[:, 1] ** 2
        slowest = max(slowest, dt)
        if E.min() < p.gamma * p.h_min - STATE_TOL or E.max() > p.E_max + STATE_TOL:
            bad.append((m.seed, "energy", float(E.min()), float(E.max())))
        if x[:, 0].min() < 0 or x[:, 0].max() > p.h_max + STATE_TOL:
            bad.append((m.seed, "height"))
        if not m.peaks or any(not (10.0 - STATE_TOL <= h <= 12.0 + STATE_TOL) for h in m.peaks):
            bad.append((m.seed, "peaks", m.peaks))
        if dt >= RUN_SECONDS:
            bad.append((m.seed, "runtime", dt))
    verdict(1, not bad, f"{len(ball_runs['bkd'])} seeds, violations={bad}, slowest run {slowest:.2f}s")


def test_criterion_2_min_norm_fewer_impacts(ball_runs, verdict):
    kd = [m.ground_impacts for _, m, _ in ball_runs["bkd"]]
    kmd = [m.ground_impacts for _, m, _ in ball_runs["kmd"]]
    fewer = all(a < b for a, b in zip(kmd, kd))
    in_band = all(abs(a - KMD_REFERENCE) <= KMD_BAND for a in kmd) and all(abs(b - KD_REFERENCE) <= KD_BAND for b in kd)
    verdict(2, fewer and in_band, f"impacts kd={kd} kmd={kmd}")


def test_criterion_3_closed_form_min_norm(ball, verdict):
    p = ball.params
    syn = synthesize(ball.system, ball.certificate)
    closed = ball_kappa_min_norm(p)
    xs = np.linspace(-math.sqrt(2 * p.E_max), -math.sqrt(2 * p.gamma * p.h_min), 200)
    err = max(abs(syn.feedback.kappa_d([0.0, v])[0] - closed([0.0, v])[0]) for v in xs)
    verdict(3, err <= CLOSED_FORM_TOL, f"max |numeric - closed form| = {err:.3e} over 200 points")


def test_criterion_4_flow_energy_conservation(ball, ball_runs, verdict):
    p = ball.params
    worst = 0.0
    for law in ball_runs:
        for sol, _, _ in ball_runs[law]:
            E = p.gamma * sol.arc.x[:, 0] + 0.5 * sol.arc.x[:, 1] ** 2
            for j in np.unique(sol.arc.j):
                e = E[sol.arc.j == j]
                worst = max(worst, float(np.max(np.abs(e - e[0]))))
    verdict(4, worst <= DRIFT_TOL, f"max energy drift within a flow interval = {worst:.3e} over {sum(map(len, ball_runs.values()))} runs")


def test_criterion_5_ball_certificate(ball, verdict):
    g = certificate_grids(ball.system, ball.certificate, ball.box, 0.05)
    rep = verify_clf_jump(ball.system, ball.certificate, g["M_d"], candidates=[ball.feedbacks["bkd"].kappa_d])
    rho = {r.condition: r for r in verify_rho_positivity(ball.certificate, g["band"], g["level"])}["CLF-rD"]
    min_rho = rho.extra["min_rho"]
    ok = rep.passed and rep.worst_residual <= CLF_D_BOUND and rho.passed and min_rho == pytest.approx(RHO_D_EXPECTED, abs=1e-12)
    verdict(5, ok, f"CLF-D worst={rep.worst_residual:.4f} on {rep.grid_size} points, min rho_d={min_rho!r}")


def test_criterion_6_robot_arm(arm, verdict):
    p = ArmParams()
    Q = p.Q()
    exact = Q.tolist() == [[-1.0, 2.0], [2.0, -6.0]] and round(float(np.linalg.det(Q)), 12) == 2.0 and float(np.trace(Q)) == -7.0
    x0s = arm_initial_conditions(arm, n=6, seed=0)
    r = arm.certificate.r
    inside = all(arm.certificate.V(x) <= r for x in x0s)
    t0 = time.perf_counter()
    runs = [run_arm(arm, x, seed=i, T=30.0) for i, x in enumerate(x0s)]
    elapsed = time.perf_counter() - t0
    maxV = max(rr.max_V for rr in runs)
    off_d = [v for rr in runs for v in arm_jump_violations(arm, rr, STATE_TOL)]
    ok = exact and inside and maxV <= r + STATE_TOL and not off_d and elapsed < RUN_SECONDS
    verdict(6, ok, f"Q exact={exact}, max V={maxV:.4f} (r={r}), jumps={sum(len(rr.jump_states) for rr in runs)}, off-D jumps={off_d}, {elapsed:.2f}s total")


def test_criterion_7_planar(planar, verdict):
    lo, hi = 1.0 - STATE_TOL, math.sqrt(2.0) + STATE_TOL
    norms = []
    for i, x0 in enumerate(planar_initial_conditions(10, seed=0)):
        sol, _ = run_planar(planar, x0, seed=i)
        norms.append(np.linalg.norm(sol.arc.x, axis=1))
    allnorms = np.concatenate(norms)
    stays = bool(allnorms.min() >= lo and allnorms.max() <= hi)
    # both jump selections, over a seeded sample of states and disturbances
    rng = np.random.Generator(np.random.PCG64(7))
    drift = 0.0
    for _ in range(500):
        x = rng.uniform(-1.5, 1.5, 2)
        u, w = rng.uniform(math.pi / 4, math.pi / 2), rng.uniform(0, 1)
        for xp in planar.system.G(x, np.array([u]), np.array([w])):
            drift = max(drift, abs(np.linalg.norm(xp) - np.linalg.norm(x)))
    sysW = close_loop(planar.system, planar.feedbacks[planar.default_feedback])
    reps = {r.condition: r for r in verify_generic_set(sysW, planar.K, generic_set_grids(sysW, planar.K, planar.box, 0.01))}
    ok = stays and drift <= NORM_TOL and reps["rcFI2"].passed and reps["rcFI3"].passed
    verdict(
        7,
        ok,
        f"|x| in [{allnorms.min():.6f}, {allnorms.max():.6f}], jump norm drift {drift:.1e}, "
        f"rcFI2 worst={reps['rcFI2'].worst_residual:.2e} ({reps['rcFI2'].grid_size} pts), "
        f"rcFI3 worst={reps['rcFI3'].worst_residual:.2e} ({reps['rcFI3'].grid_size} pts)",
    )


def test_criterion_8_termination_classes(verdict):
    cases = [(resting_system(), [0.5]), (jump_outside_system(), [0.0, 0.0]), (halfline_system(), [-0.5])]
    got = [simulate(s, x0, SimConfig(horizon_T=2.0)).termination for s, x0 in cases]
    want = [TerminationReason.HorizonReached, TerminationReason.EndedJumpOutside, TerminationReason.EndedFlowNoContinuation]
    verdict(8, got == want, f"{[g.value for g in got]}")


ORACLE_SUITES = [
    "tests/test_core.py::test_ball_psi_d_matches_dense_scan",
    "tests/test_core.py::test_planar_psi_c_matches_dense_scan",
    "tests/test_core.py::test_planar_phi_w_matches_dense_w_scan",
    "tests/test_core.py::test_arm_jump_sup_attained_at_disturbance_vertices",
    "tests/test_core.py::test_ball_jump_sup_attained_at_disturbance_vertices",
    "tests/test_synthesis.py::test_interval_edges_are_gamma_sign_changes",
    "tests/test_synthesis.py::test_interval_matches_hand_derivation",
]


def test_criterion_9_oracle_suites_standalone(verdict):
    root = Path(__file__).resolve().parent.parent
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *ORACLE_SUITES], cwd=root, capture_output=True, text=True)
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    verdict(9, proc.returncode == 0, f"standalone oracle suites: {tail}")
