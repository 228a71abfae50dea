import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import halfline_system, jump_outside_system, resting_system
from invhyb.core import TerminationReason, close_loop
from invhyb.experiments import ball_metrics, ball_sim_config, run_ball
from invhyb.simulator import (
    Constant,
    NamedSelection,
    SimConfig,
    check_invariance,
    classify_termination,
    from_csv,
    simulate,
    solution_residuals,
    summary,
    to_csv,
)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(priority="Sometimes")
    with pytest.raises(ValueError):
        SimConfig(step_min=1.0, step_max=0.1)
    with pytest.raises(ValueError):
        SimConfig(horizon_T=-1)


def test_zero_horizon_gives_single_sample():
    sol = simulate(resting_system(), [1.0], SimConfig(horizon_T=0.0))
    assert len(sol.arc) == 1
    assert sol.termination == TerminationReason.HorizonReached


def test_constant_solution_is_invariant():
    from invhyb.sets import ConstraintSet, constraint

    sol = simulate(resting_system(), [0.5], SimConfig(horizon_T=1.0))
    target = ConstraintSet.of(1, constraint(lambda z: np.abs(z[0]) - 1.0, name="|x|<=1"))
    res = check_invariance(sol, target)
    assert res.ok and res.worst_violation <= 0


def test_budget_exhaustion_is_horizon_reached():
    assert classify_termination(resting_system(), np.array([1.0]), "flow", budget_exhausted=True) == TerminationReason.HorizonReached


def test_jump_outside_sets():
    sol = simulate(jump_outside_system(), [0.0, 0.0], SimConfig(horizon_T=1.0))
    assert sol.termination == TerminationReason.EndedJumpOutside
    assert sol.arc.x[-1].tolist() == [5.0, 5.0]


def test_flow_into_boundary_without_continuation():
    sol = simulate(halfline_system(), [-0.5], SimConfig(horizon_T=2.0))
    assert sol.termination == TerminationReason.EndedFlowNoContinuation
    assert sol.arc.t[-1] == pytest.approx(0.5, abs=1e-8)
    assert classify_termination(halfline_system(), np.array([0.0]), "flow") == TerminationReason.EndedFlowNoContinuation


def test_ball_deterministic_under_seed(ball):
    a, _ = run_ball(ball, "bkd", seed=3, T=5.0)
    b, _ = run_ball(ball, "bkd", seed=3, T=5.0)
    assert np.array_equal(a.arc.x, b.arc.x) and np.array_equal(a.disturbance.wd, b.disturbance.wd)
    c, _ = run_ball(ball, "bkd", seed=4, T=5.0)
    assert not np.array_equal(a.disturbance.wd, c.disturbance.wd)


def test_constant_disturbance_policy(ball):
    sysW = close_loop(ball.system, ball.feedbacks["bkd"])
    cfg = SimConfig(horizon_T=3.0, seed=0, wd_policy=Constant((0.85,)))
    sol = simulate(sysW, [11.0, 0.0], cfg)
    assert sol.jumps > 0
    assert np.all(sol.disturbance.wd[:, 0] == 0.85)


def test_first_ground_impact_matches_free_fall(ball):
    # oracle: falling from rest at 11 m reaches the ground after sqrt(2*11/g)
    sol, _ = run_ball(ball, "bkd", seed=0, T=2.0)
    t_hit = sol.arc.t[sol.jump_rows[0]]
    assert t_hit == pytest.approx(math.sqrt(2 * 11 / 9.81), abs=1e-6)
    v_hit = sol.arc.x[sol.jump_rows[0], 1]
    assert v_hit == pytest.approx(-math.sqrt(2 * 9.81 * 11), abs=1e-5)


def test_event_localization_residual(ball):
    sol, _ = run_ball(ball, "bkd", seed=1, T=5.0)
    for row, clause in zip(sol.jump_rows, sol.jump_clause):
        x = sol.arc.x[row]
        if clause == 0:
            assert abs(x[0]) <= 1e-9
        else:
            assert abs(x[0] - 12.0) <= 1e-9


@settings(max_examples=8)
@given(st.integers(0, 10_000))
def test_ball_energy_constant_on_flows(seed):
    from invhyb.systems import load_system

    b = load_system("bouncing-ball")
    _, m = run_ball(b, "kmd", seed, T=6.0)
    assert m.max_flow_energy_drift <= 1e-6


def test_solution_satisfies_flow_and_jump_conditions(ball):
    sysW = close_loop(ball.system, ball.feedbacks["bkd"])
    sol = simulate(sysW, [11.0, 0.0], ball_sim_config(2, 6.0))
    res = solution_residuals(sysW, sol, tol=1e-6)
    assert res["flow_violations"] == 0 and res["jump_violations"] == 0


def test_csv_round_trip_preserves_verdicts(ball):
    sysW = close_loop(ball.system, ball.feedbacks["kmd"])
    sol = simulate(sysW, [11.0, 0.0], ball_sim_config(5, 6.0))
    text = to_csv(sol)
    assert text.splitlines()[0] == "t,j,x1,x2,phase,wd1"
    back = from_csv(text, sol.termination)
    assert np.array_equal(back.arc.x, sol.arc.x) and np.array_equal(back.arc.t, sol.arc.t)
    assert back.jump_rows == sol.jump_rows
    assert solution_residuals(sysW, back, tol=1e-6) == solution_residuals(sysW, sol, tol=1e-6)


def test_summary_fields(ball):
    sol, _ = run_ball(ball, "bkd", seed=0, T=3.0)
    s = summary(sol)
    assert set(s) == {"termination", "jumps", "flow_time", "invariance_checks", "invariant", "impact_count_per_jumpset"}
    assert s["invariant"] is None


def test_planar_jump_selection_choice(planar):
    sysW = close_loop(planar.system, planar.feedbacks["annulus"])
    x0 = [0.0, 1.2]  # on the jump set
    for sel, sign in ((0, -1.0), (1, 1.0)):
        sol = simulate(sysW, x0, SimConfig(horizon_T=0.01, horizon_J=1, seed=0, jump_selection=sel))
        R = sol.arc.x[1]
        assert np.linalg.norm(R) == pytest.approx(1.2, abs=1e-12)
        # the two selections are negatives of each other
        wd = sol.disturbance.wd[0, 0]
        s = math.pi / 3 * wd
        ref = np.array([[math.cos(s), math.sin(s)], [-math.sin(s), math.cos(s)]]) @ np.array(x0)
        assert R == pytest.approx(sign * ref, abs=1e-12)


def test_flow_selector_named(planar):
    sysW = close_loop(planar.system, planar.feedbacks["annulus"])
    a = simulate(sysW, [1.1, 0.3], SimConfig(horizon_T=0.5, flow_selector=NamedSelection(0), seed=0))
    b = simulate(sysW, [1.1, 0.3], SimConfig(horizon_T=0.5, flow_selector=NamedSelection(1), seed=0))
    assert not np.allclose(a.arc.x[-1], b.arc.x[-1])


def test_metrics_on_known_run(ball):
    sol, m = run_ball(ball, "kmd", seed=7, T=20.0)
    assert m == ball_metrics(ball, sol, 7)
    assert m.ground_impacts == sol.impact_counts()[0]


@pytest.mark.parametrize("x0", [[-1.0, 0.0], [float("nan"), 0.0]])
def test_invalid_initial_state_rejected(ball, x0):
    from invhyb.simulator import SimulationError

    sysW = close_loop(ball.system, ball.feedbacks["bkd"])
    with pytest.raises(SimulationError):
        simulate(sysW, x0, SimConfig(horizon_T=1.0))
