import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from invhyb.core import (
    Box,
    BoxSet,
    FeedbackPair,
    HybridArc,
    HybridTime,
    HybridTimeDomain,
    IntervalSet,
    close_loop,
    feasible_intervals,
    merge_intervals,
    phi_w,
    project_states,
    psi_u,
)
from invhyb.rclf import disturbance_points


def dense_interval(mask, grid):
    """Hull of the grid points where ``mask`` holds, or None."""
    if not mask.any():
        return None
    return float(grid[mask].min()), float(grid[mask].max())


# boxes and interval sets ---------------------------------------------------------------

def test_box_basics():
    B = Box.of((0, 1), (-2, 2))
    assert B.dim == 2
    assert B.contains([1.0, -2.0]) and not B.contains([1.1, 0])
    assert B.clamp([5, -5]).tolist() == [1.0, -2.0]
    assert len(B.vertices()) == 4
    assert Box.point0().dim == 0


def test_box_rejects_reversed_bounds():
    with pytest.raises(ValueError):
        Box.of((1, 0))


@pytest.mark.parametrize(
    "intervals, expected",
    [(((-1.0, 1.0),), 0.0), (((2.0, 3.0),), 2.0), (((-3.0, -2.0),), -2.0), (((-3.0, -2.5), (1.5, 4.0)), 1.5)],
)
def test_interval_min_norm(intervals, expected):
    assert IntervalSet(intervals).min_norm()[0] == expected


def test_empty_interval_set_has_no_min_norm():
    with pytest.raises(ValueError):
        IntervalSet(()).min_norm()


def test_box_set_min_norm_clamps_origin():
    assert BoxSet(Box.of((1, 2), (-1, 1))).min_norm().tolist() == [1.0, 0.0]


@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(0, 5)), max_size=8))
def test_merge_intervals_disjoint_and_covering(raw):
    ivs = [(a, a + w) for a, w in raw]
    merged = merge_intervals(ivs)
    for (a1, b1), (a2, b2) in zip(merged, merged[1:]):
        assert b1 < a2
    for a, b in ivs:
        assert any(c <= a and b <= d for c, d in merged)


# pieces must be wider than the 257-point sample spacing (20/256) to be found
@given(st.floats(-5, 5), st.floats(0.08, 3))
def test_feasible_intervals_finds_known_interval(c, half):
    lo, hi = -10.0, 10.0
    out = feasible_intervals(lambda s: np.abs(s - c) <= half, lo, hi)
    a, b = max(lo, c - half), min(hi, c + half)
    assert len(out) == 1
    assert out[0][0] == pytest.approx(a, abs=1e-10)
    assert out[0][1] == pytest.approx(b, abs=1e-10)


# hybrid time ----------------------------------------------------------------------------

def test_hybrid_time_order():
    assert HybridTime(1.0, 0) < HybridTime(1.0, 1)
    assert HybridTime(0.5, 1) < HybridTime(2.0, 0) or HybridTime(2.0, 0) < HybridTime(0.5, 1)


def test_domain_validation_and_queries():
    E = HybridTimeDomain(((0, 0.0, 1.0), (1, 1.0, 1.0), (2, 1.0, 2.5)))
    assert E.sup_t == 2.5 and E.sup_j == 2
    assert E.contains(0.5, 0) and E.contains(1.0, 1) and not E.contains(0.5, 1)
    assert E.flow_time() == pytest.approx(2.5)
    with pytest.raises(ValueError):
        HybridTimeDomain(((0, 0.0, 1.0), (1, 0.5, 2.0)))


def test_arc_domain_from_samples():
    arc = HybridArc(np.array([0.0, 0.5, 0.5, 1.0]), np.array([0, 0, 1, 1]), np.zeros((4, 1)))
    assert arc.domain().intervals == ((0, 0.0, 0.5), (1, 0.5, 1.0))


# Ψ and Φ against dense scans --------------------------------------------------------------

def test_ball_psi_d_and_phi_d_examples(ball):
    x = np.array([0.0, -math.sqrt(2 * 9.81 * 10)])
    psi = psi_u(ball.system, x, "jump")
    assert psi.intervals[0][0] == pytest.approx(0.0, abs=1e-12)
    assert psi.intervals[0][1] == pytest.approx(ball.params.u_max, abs=1e-9)
    phi = phi_w(ball.system, x, [5.935], "jump")
    assert phi.intervals == ((0.8, 0.9),)


def test_planar_psi_c_at_axis_point(planar):
    # oracle: |u| <= x1 and (|x|^2 - 2) x1^2 <= u x1 <= (|x|^2 - 1) x1^2 with x = (1.2, 0)
    psi = psi_u(planar.system, [1.2, 0.0], "flow")
    lo, hi = (1.44 - 2) * 1.44 / 1.2, (1.44 - 1) * 1.44 / 1.2
    # endpoints carry the membership slack 2e-9 on h, i.e. about 1.7e-9 in u
    assert psi.intervals[0][0] == pytest.approx(lo, abs=5e-9)
    assert psi.intervals[0][1] == pytest.approx(hi, abs=5e-9)


def test_arm_psi_c_examples(arm):
    assert psi_u(arm.system, [0.1, 0.5], "flow").intervals == ((-10.0, 10.0),)
    assert psi_u(arm.system, [0.1, 0.7], "flow").is_empty()
    assert phi_w(arm.system, [0.1, 0.7], np.empty(0), "jump").intervals == ((0.8, 0.9),)


def _dense_psi(sys, x, which, nu=801, nw=41):
    S, U, W, _ = sys.blocks(which)
    us = np.linspace(U.lo[0], U.hi[0], nu)
    ws = [np.array(v) for v in np.array(np.meshgrid(*[np.linspace(a, b, nw) for a, b in zip(W.lo, W.hi)])).reshape(W.dim, -1).T] if W.dim else [np.empty(0)]
    ok = np.array([any(S.contains(np.r_[x, u, w]) for w in ws) for u in us])
    return us, ok


@given(st.floats(0.0, 12.0), st.floats(-25.0, 25.0))
def test_ball_psi_d_matches_dense_scan(x1, x2):
    from invhyb.systems import load_system

    sys = load_system("bouncing-ball").system
    x = np.array([x1, x2])
    us, ok = _dense_psi(sys, x, "jump", nu=201, nw=5)
    got = psi_u(sys, x, "jump")
    ref = dense_interval(ok, us)
    if ref is None:
        assert got.is_empty()
    else:
        step = us[1] - us[0]
        assert got.lo <= ref[0] + 1e-9 and got.lo >= ref[0] - step
        assert got.hi >= ref[1] - 1e-9 and got.hi <= ref[1] + step


@given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_planar_psi_c_matches_dense_scan(x1, x2):
    from invhyb.systems import load_system

    sys = load_system("planar").system
    x = np.array([x1, x2])
    us, ok = _dense_psi(sys, x, "flow", nu=601, nw=3)
    got = psi_u(sys, x, "flow")
    step = us[1] - us[0]
    for u, inside in zip(us, ok):
        # points farther than one grid step from an edge must agree
        near_edge = any(abs(u - e) <= step for iv in got.intervals for e in iv)
        if not near_edge:
            assert got.contains([u]) == inside


@given(st.floats(-3.0, 3.0), st.floats(-0.7, 1.2), st.floats(0.6, 1.2))
def test_planar_phi_w_matches_dense_w_scan(u, x1, x2):
    from invhyb.systems import load_system

    sys = load_system("planar").system
    x = np.array([x1, x2])
    ws = np.linspace(0.0, 1.0, 201)
    ok = np.array([sys.member("flow", x, [u], [w]) for w in ws])
    got = phi_w(sys, x, [u], "flow")
    # w does not enter the planar flow set, so Φ is all of W or nothing
    assert got.is_empty() == (not ok.any())
    if ok.any():
        assert got.intervals == ((0.0, 1.0),)


# extreme-point reduction -----------------------------------------------------------------

@given(st.floats(-0.6, 0.6), st.floats(0.6, 0.9))
def test_arm_jump_sup_attained_at_disturbance_vertices(x1, x2):
    from invhyb.systems import load_system

    b = load_system("robot-arm")
    sys, V = b.system, b.certificate.V
    x = np.array([abs(x1), x2])
    Phi = phi_w(sys, x, np.empty(0), "jump")
    vert = max(V(sys.G(x, np.empty(0), w)[0]) for w in disturbance_points(Phi))
    dense = max(V(sys.G(x, np.empty(0), [w])[0]) for w in np.linspace(0.8, 0.9, 401))
    assert vert == pytest.approx(dense, abs=1e-12) or vert >= dense


@given(st.floats(-24.2, -14.1), st.floats(0.0, 11.0))
def test_ball_jump_sup_attained_at_disturbance_vertices(x2, u):
    from invhyb.systems import load_system

    b = load_system("bouncing-ball")
    sys, V = b.system, b.certificate.V
    x = np.array([0.0, x2])
    vert = max(V(sys.G(x, [u], w)[0]) for w in disturbance_points(IntervalSet(((0.8, 0.9),))))
    dense = max(V(sys.G(x, [u], [w])[0]) for w in np.linspace(0.8, 0.9, 401))
    assert vert >= dense - 1e-12


# closed loop -----------------------------------------------------------------------------

def test_close_loop_dimension_checked(ball):
    bad = FeedbackPair(lambda x: np.empty(0), lambda x: np.array([1.0, 2.0]), "bad")
    with pytest.raises(ValueError):
        close_loop(ball.system, bad)


def test_closed_loop_projection_enforces_feedback_admissibility(planar):
    sysW = close_loop(planar.system, planar.feedbacks["annulus"])
    Pc = project_states(sysW, "flow")
    assert Pc.contains([1.2, 0.0])
    assert Pc.contains([0.0, 1.2])
    assert not Pc.contains([0.5, 0.0])


def test_ball_projections(ball):
    Pd = project_states(ball.system, "jump")
    assert Pd.contains([0.0, -15.0])
    assert Pd.contains([12.0, 10.0])
    assert not Pd.contains([5.0, -15.0])
