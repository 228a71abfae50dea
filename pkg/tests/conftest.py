import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from invhyb.core import Box, FeedbackPair, HybridSystemUW, SetValuedMap, close_loop
from invhyb.sets import ConstraintSet, constraint
from invhyb.systems import load_system

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def ball():
    return load_system("bouncing-ball")


@pytest.fixture(scope="session")
def arm():
    return load_system("robot-arm")


@pytest.fixture(scope="session")
def planar():
    return load_system("planar")


def autonomous(n, C, F, D, G):
    """A closed loop with no inputs and no disturbances."""
    sys = HybridSystemUW(
        n=n,
        C=C,
        F=SetValuedMap(lambda x, u, w: [np.asarray(F(x), float)]),
        D=D,
        G=SetValuedMap(lambda x, u, w: [np.asarray(G(x), float)]),
        U_c=Box.point0(),
        U_d=Box.point0(),
        W_c=Box.point0(),
        W_d=Box.point0(),
        name="micro",
    )
    none = lambda x: np.empty(0)  # noqa: E731
    return close_loop(sys, FeedbackPair(none, none, "none"))


def halfline_system():
    """C = {x <= 0}, F = +1, D empty: flow runs into the boundary and cannot continue."""
    C = ConstraintSet.of(1, constraint(lambda z: z[0], lambda z: np.array([1.0]), "x<=0"))
    return autonomous(1, C, lambda x: [1.0], ConstraintSet.empty(1), lambda x: x)


def disk(radius2=4.0, n=2):
    return ConstraintSet.of(n, constraint(lambda z: z[0] ** 2 + z[1] ** 2 - radius2, lambda z: 2 * np.asarray(z), "disk"))


def jump_outside_system():
    """C = D = {|x| <= 2}; the jump map sends every state to (5, 5)."""
    return autonomous(2, disk(), lambda x: [0.0, 0.0], disk(), lambda x: [5.0, 5.0])


def resting_system():
    """C = R^1 with F = 0 and no jumps: every solution is constant and complete."""
    return autonomous(1, ConstraintSet.whole(1), lambda x: [0.0], ConstraintSet.empty(1), lambda x: x)
