"""Built-in systems: controlled bouncing ball, robot arm against a surface, planar rotation example."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .core import Box, FeedbackPair, HybridSystemUW, IntervalSet, SetValuedMap
from .rclf import RCLFCertificate
from .sets import ConstraintSet, ScalarConstraint


def affine(a, b: float = 0.0, name: str = "", scale: float = 1.0, uses=("x",)) -> ScalarConstraint:
    """``a · z + b <= 0`` with its constant gradient."""
    a = np.asarray(a, dtype=float)
    return ScalarConstraint(
        h=lambda z: np.tensordot(a, np.asarray(z, float), axes=1) + b,
        grad=lambda z: a,
        name=name,
        scale=scale,
        uses=frozenset(uses),
    )


def _unit(k: int, i: int, sign: float = 1.0) -> np.ndarray:
    e = np.zeros(k)
    e[i] = sign
    return e


@dataclass(frozen=True)
class SystemBundle:
    """A named system with its certificate, feedbacks and default grids."""

    name: str
    system: HybridSystemUW
    certificate: RCLFCertificate | None
    feedbacks: dict[str, FeedbackPair]
    default_feedback: str
    box: tuple[tuple[float, float], ...]
    K: ConstraintSet | None = None
    params: object = None
    extras_required: bool = True
    notes: dict = field(default_factory=dict)


# bouncing ball ----------------------------------------------------------------------------

@dataclass(frozen=True)
class BallParams:
    gamma: float = 9.81
    h_min: float = 10.0
    h_max: float = 12.0
    e1: float = 0.8
    e2: float = 0.9
    e_p: float = 0.95
    eps: float = 0.1
    delta_p: float = 0.01

    @property
    def v_max(self) -> float:
        return 6.0 * math.sqrt(self.gamma)

    @property
    def E_max(self) -> float:
        return 0.5 * self.v_max**2 + self.gamma * self.h_max

    @property
    def u_max(self) -> float:
        return math.sqrt(2.0 * self.E_max)

    def violations(self) -> list[str]:
        out = []
        if not 0 < self.e1 < self.e2 < 1:
            out.append(f"0 < e1 < e2 < 1 fails (e1={self.e1}, e2={self.e2})")
        if not 0 < self.e_p <= 1:
            out.append(f"e_p in (0, 1] fails (e_p={self.e_p})")
        if not 0 < self.delta_p < self.v_max:
            out.append(f"0 < delta_p < v_max fails (delta_p={self.delta_p})")
        if not 0 < self.h_min < self.h_max:
            out.append("0 < h_min < h_max fails")
        lhs = self.gamma * (self.h_min + self.eps)
        rhs = 0.5 * (1 + self.e1 - self.e2) ** 2 * self.E_max
        if not lhs <= rhs:
            out.append(f"gamma*(h_min+eps) <= (1+e1-e2)^2*E_max/2 fails: {lhs:.6g} > {rhs:.6g}")
        lhs2 = math.sqrt(self.gamma * (self.h_min + self.eps / 2))
        rhs2 = self.e1 * math.sqrt(self.E_max)
        if not lhs2 < rhs2:
            out.append(f"sqrt(gamma*(h_min+eps/2)) < e1*sqrt(E_max) fails: {lhs2:.6g} >= {rhs2:.6g}")
        return out


def ball_energy(p: BallParams) -> Callable:
    return lambda z: 0.5 * np.asarray(z)[1] ** 2 + p.gamma * np.asarray(z)[0]


def ball_kappa_d(p: BallParams) -> Callable:
    """Affine-in-velocity impact input, clipped to [0, u_max].

    The clip only binds for upward velocities, i.e. away from the ground
    impact set where the input is actually used.
    """
    c = p.gamma * (p.eps / 2 + p.h_min)
    slope = math.sqrt(c / p.E_max)
    offset = math.sqrt(2 * c)
    return lambda x: np.array([np.clip(slope * np.asarray(x)[1] + offset, 0.0, p.u_max)])


def ball_kappa_min_norm(p: BallParams) -> Callable:
    """Closed form of the pointwise minimum-norm impact input (clipped to u_max)."""
    offset = math.sqrt(2 * p.gamma * (p.eps / 2 + p.h_min))
    return lambda x: np.array([np.clip(offset + p.e1 * np.asarray(x)[1], 0.0, p.u_max)])


def bouncing_ball(p: BallParams | None = None) -> SystemBundle:
    p = p or BallParams()
    bad = p.violations()
    if bad:
        raise ValueError("invalid bouncing-ball parameters: " + "; ".join(bad))
    g, hmax, Emax, vmax = p.gamma, p.h_max, p.E_max, p.v_max
    root2E = math.sqrt(2 * Emax)
    E = ball_energy(p)

    energy_con = ScalarConstraint(
        h=lambda z: E(z) - Emax,
        grad=lambda z: np.array([g + 0 * np.asarray(z)[1], np.asarray(z)[1]]),
        name="E<=E_max",
        scale=Emax,
        uses=frozenset({"x"}),
    )
    C = ConstraintSet.of(
        2,
        affine(_unit(2, 0, -1), 0.0, "x1>=0"),
        affine(_unit(2, 0), -hmax, "x1<=h_max", hmax),
        energy_con,
        name="C_ball",
    )
    k = 4  # (x1, x2, u_d, w_d)
    ground = (
        affine(_unit(k, 0), 0.0, "x1<=0"),
        affine(_unit(k, 0, -1), 0.0, "x1>=0"),
        affine(_unit(k, 1), 0.0, "x2<=0"),
        affine(_unit(k, 1, -1), -root2E, "x2>=-sqrt(2E_max)", root2E),
    )
    top = (
        affine(_unit(k, 0), -hmax, "x1<=h_max", hmax),
        affine(_unit(k, 0, -1), hmax, "x1>=h_max", hmax),
        affine(_unit(k, 1, -1), 0.0, "x2>=0"),
        affine(_unit(k, 1), -vmax, "x2<=v_max", vmax),
    )
    D = ConstraintSet(k, (ground, top), "D_ball")

    def F(x, u, w):
        return [np.array([x[1], -g])]

    def G(x, u, w):
        if x[0] <= hmax / 2:
            return [np.array([x[0], u[0] - w[0] * x[1]])]
        return [np.array([x[0], min(-p.e_p * x[1], -p.delta_p)])]

    def theta_exact(x) -> IntervalSet:
        x = np.asarray(x, dtype=float)
        if D.contains(np.r_[x, 0.0, p.e1]):
            if x[0] <= hmax / 2:
                top_u = min(p.u_max, root2E + p.e2 * x[1])
                return IntervalSet(((0.0, top_u),)) if top_u >= 0 else IntervalSet(())
            return IntervalSet(((0.0, p.u_max),))
        return IntervalSet(())

    sys = HybridSystemUW(
        n=2,
        C=C,
        F=SetValuedMap(F),
        D=D,
        G=SetValuedMap(G),
        U_c=Box.point0(),
        U_d=Box.of((0.0, p.u_max)),
        W_c=Box.point0(),
        W_d=Box.of((p.e1, p.e2)),
        name="bouncing-ball",
        theta_d_exact=theta_exact,
    )
    cert = RCLFCertificate(
        V=lambda z: -E(z),
        gradV=lambda z: np.array([-g + 0 * np.asarray(z)[1], -np.asarray(z)[1]]),
        r=-g * p.h_min,
        r_star=-g * (p.h_min - p.eps),
        rho_c=None,
        rho_d=lambda z: g * p.eps,
        sigma=0.5,
    )
    no_flow_input = lambda x: np.empty(0)  # noqa: E731
    feedbacks = {
        "bkd": FeedbackPair(no_flow_input, ball_kappa_d(p), "bkd"),
        "kmd": FeedbackPair(no_flow_input, ball_kappa_min_norm(p), "kmd"),
    }
    return SystemBundle(
        "bouncing-ball",
        sys,
        cert,
        feedbacks,
        "bkd",
        ((0.0, hmax), (-25.0, 25.0)),
        params=p,
        extras_required=False,
        notes={"extras": "V is constant along flows; invariance follows from the generic-set items instead of Ly3"},
    )


# robot arm --------------------------------------------------------------------------------

@dataclass(frozen=True)
class ArmParams:
    P: tuple[tuple[float, float], tuple[float, float]] = ((5.0, 1.0), (1.0, 2.0))
    k_c: float = 0.1
    b_c: float = 0.02
    v_bar: float = 0.6
    e1: float = 0.8
    e2: float = 0.9
    f_max: float = 10.0
    k_p: float = 0.5
    k_d: float = 2.0
    rho_c_scale: float = 0.25

    @property
    def abc(self) -> tuple[float, float, float]:
        return self.P[0][0], self.P[1][1], self.P[0][1]

    @property
    def r_star(self) -> float:
        return self.abc[1] * self.v_bar**2

    @property
    def r(self) -> float:
        return 0.8 * self.r_star

    def Q(self) -> np.ndarray:
        a, b, c = self.abc
        off = a - b * self.k_p - c * self.k_d
        return np.array([[-2 * c * self.k_p, off], [off, 2 * c - 2 * b * self.k_d]])

    def violations(self) -> list[str]:
        out = []
        P = np.array(self.P, dtype=float)
        if not np.allclose(P, P.T) or np.min(np.linalg.eigvalsh(P)) <= 0:
            out.append("P must be symmetric positive definite")
        a, b, c = self.abc
        if not a / c >= self.k_c / self.b_c:
            out.append(f"a/c >= k_c/b_c fails: {a / c:.6g} < {self.k_c / self.b_c:.6g}")
        lhs = 4 * b * c * self.k_p * self.k_d - 4 * c**2 * self.k_p
        rhs = (a - b * self.k_p - c * self.k_d) ** 2
        if not lhs > rhs:
            out.append(f"determinant condition 4bc*k_p*k_d - 4c^2*k_p > (a - b*k_p - c*k_d)^2 fails: {lhs:.6g} <= {rhs:.6g}")
        if not self.k_p > 1 - (b / c) * self.k_d:
            out.append(f"trace condition k_p > 1 - (b/c)*k_d fails: {self.k_p:.6g} <= {1 - (b / c) * self.k_d:.6g}")
        if not 0 < self.e1 < self.e2 < 1:
            out.append("0 < e1 < e2 < 1 fails")
        if not 0 < self.rho_c_scale:
            out.append("rho_c_scale must be positive")
        return out

    def gain_violations(self) -> list[str]:
        """Only the gain conditions; the mis-gained scenarios bypass them deliberately."""
        return [v for v in self.violations() if "determinant" in v or "trace" in v]


def arm_flow_selections(p: ArmParams) -> Callable:
    """Plant vector field with the regularized contact force; two selections at x1 = 0."""

    def F(x, u, w):
        uc = float(u[0])
        if x[0] > 0:
            return [np.array([x[1], uc - p.k_c * x[0] - p.b_c * x[1]])]
        if x[0] < 0:
            return [np.array([x[1], uc])]
        return [np.array([x[1], uc]), np.array([x[1], uc - p.b_c * x[1]])]

    return F


def robot_arm(p: ArmParams | None = None, check_gains: bool = True) -> SystemBundle:
    p = p or ArmParams()
    bad = p.violations() if check_gains else [v for v in p.violations() if v not in p.gain_violations()]
    if bad:
        raise ValueError("invalid robot-arm parameters: " + "; ".join(bad))
    P = np.array(p.P, dtype=float)
    Q = p.Q()
    vb = p.v_bar
    k = 4  # (x1, x2, u_c, w_c)
    C = ConstraintSet(
        k,
        (
            (affine(_unit(k, 0), 0.0, "x1<=0"),),
            (affine(_unit(k, 0, -1), 0.0, "x1>=0"), affine(_unit(k, 1), -vb, "x2<=v_bar")),
        ),
        "C_arm",
    )
    kd = 3  # (x1, x2, w_d)
    D = ConstraintSet.of(kd, affine(_unit(kd, 0, -1), 0.0, "x1>=0"), affine(_unit(kd, 1, -1), vb, "x2>=v_bar"), name="D_arm")

    def G(x, u, w):
        return [np.array([x[0], -w[0] * x[1]])]

    sys = HybridSystemUW(
        n=2,
        C=C,
        F=SetValuedMap(arm_flow_selections(p)),
        D=D,
        G=SetValuedMap(G),
        U_c=Box.of((-p.f_max, p.f_max)),
        U_d=Box.point0(),
        W_c=Box.of((0.0, 0.0)),
        W_d=Box.of((p.e1, p.e2)),
        name="robot-arm",
    )

    def V(z):
        z = np.asarray(z, dtype=float)
        return 0.5 * (P[0, 0] * z[0] ** 2 + 2 * P[0, 1] * z[0] * z[1] + P[1, 1] * z[1] ** 2)

    def gradV(z):
        z = np.asarray(z, dtype=float)
        return np.array([P[0, 0] * z[0] + P[0, 1] * z[1], P[0, 1] * z[0] + P[1, 1] * z[1]])

    def rho_c(z):
        z = np.asarray(z, dtype=float)
        return -p.rho_c_scale * (Q[0, 0] * z[0] ** 2 + 2 * Q[0, 1] * z[0] * z[1] + Q[1, 1] * z[1] ** 2)

    rho_d_val = (1 - p.e2**2) * p.abc[1] * vb**2 / 2
    cert = RCLFCertificate(V, gradV, p.r, p.r_star, rho_c, lambda z: rho_d_val, 0.5)
    kappa = FeedbackPair(
        lambda x: np.array([-p.k_p * np.asarray(x)[0] - p.k_d * np.asarray(x)[1]]),
        lambda x: np.empty(0),
        "linear",
    )
    return SystemBundle("robot-arm", sys, cert, {"linear": kappa}, "linear", ((-0.6, 0.6), (-0.9, 0.9)), params=p)


# planar example ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PlanarParams:
    gamma_range: tuple[float, float] = (3.0, 4.0)
    u_d_range: tuple[float, float] = (math.pi / 4, math.pi / 2)
    w_c_range: tuple[float, float] = (0.0, 1.0)
    w_d_range: tuple[float, float] = (-1.1, 1.1)
    u_c_bound: float = 3.0
    kappa_d: float = math.pi / 3

    def violations(self) -> list[str]:
        lo, hi = self.u_d_range
        return [] if lo <= self.kappa_d <= hi else [f"kappa_d={self.kappa_d} outside u_d range {self.u_d_range}"]


def rotation(s: float) -> np.ndarray:
    return np.array([[math.cos(s), math.sin(s)], [-math.sin(s), math.cos(s)]])


def planar_system(p: PlanarParams | None = None) -> SystemBundle:
    p = p or PlanarParams()
    bad = p.violations()
    if bad:
        raise ValueError("invalid planar parameters: " + "; ".join(bad))

    def nrm2(z):
        z = np.asarray(z, dtype=float)
        return z[0] ** 2 + z[1] ** 2

    def grad_outer(z):
        z = np.asarray(z, dtype=float)
        return np.array([-2 * z[0], -2 * z[1]] + [0 * z[0]] * (z.shape[0] - 2))

    outer_ring = ScalarConstraint(lambda z: 1.0 - nrm2(z), grad_outer, "|x|>=1", 1.0, frozenset({"x"}))
    k = 4  # (x1, x2, u_c, w_c)
    C = ConstraintSet.of(
        k,
        outer_ring,
        ScalarConstraint(lambda z: np.asarray(z)[2] - np.abs(np.asarray(z)[0]), None, "u<=|x1|", 1.0, frozenset({"x", "u"})),
        ScalarConstraint(lambda z: -np.asarray(z)[2] - np.abs(np.asarray(z)[0]), None, "-u<=|x1|", 1.0, frozenset({"x", "u"})),
        ScalarConstraint(lambda z: (nrm2(z) - 2) * np.asarray(z)[0] ** 2 - np.asarray(z)[2] * np.asarray(z)[0], None, "lower", 1.0, frozenset({"x", "u"})),
        ScalarConstraint(lambda z: np.asarray(z)[2] * np.asarray(z)[0] - (nrm2(z) - 1) * np.asarray(z)[0] ** 2, None, "upper", 1.0, frozenset({"x", "u"})),
        name="C_planar",
    )
    D = ConstraintSet.of(
        k,
        affine(_unit(k, 0), 0.0, "x1<=0"),
        affine(_unit(k, 0, -1), 0.0, "x1>=0"),
        outer_ring,
        name="D_planar",
    )
    g_lo, g_hi = p.gamma_range

    def F(x, u, w):
        s = float(u[0]) * float(w[0])
        return [np.array([(x[0] ** 2 - gam) * s, x[0] * x[1] * s]) for gam in (g_lo, g_hi)]

    def G(x, u, w):
        R = rotation(float(u[0]) * float(w[0]))
        return [-(R @ x), R @ x]

    sys = HybridSystemUW(
        n=2,
        C=C,
        F=SetValuedMap(F, convex=True),
        D=D,
        G=SetValuedMap(G, convex=False),
        U_c=Box.of((-p.u_c_bound, p.u_c_bound)),
        U_d=Box.of(p.u_d_range),
        W_c=Box.of(p.w_c_range),
        W_d=Box.of(p.w_d_range),
        name="planar",
    )
    K = ConstraintSet.of(
        2,
        ScalarConstraint(lambda z: 1.0 - nrm2(z), lambda z: -2 * np.asarray(z, float), "|x|>=1", 1.0, frozenset({"x"})),
        ScalarConstraint(lambda z: nrm2(z) - 2.0, lambda z: 2 * np.asarray(z, float), "|x|<=sqrt2", 2.0, frozenset({"x"})),
        name="annulus",
    )
    fb = FeedbackPair(
        lambda x: np.array([(nrm2(x) - 1.5) * np.asarray(x)[0]]),
        lambda x: np.array([p.kappa_d + 0 * np.asarray(x, float)[0]]),
        "annulus",
    )
    return SystemBundle("planar", sys, None, {"annulus": fb}, "annulus", ((-1.5, 1.5), (-1.5, 1.5)), K=K, params=p)


REGISTRY: dict[str, Callable[..., SystemBundle]] = {
    "bouncing-ball": bouncing_ball,
    "robot-arm": robot_arm,
    "planar": planar_system,
}

PARAM_TYPES = {"bouncing-ball": BallParams, "robot-arm": ArmParams, "planar": PlanarParams}


def load_system(name: str, overrides: dict | None = None) -> SystemBundle:
    """Build a named system, applying parameter overrides by field name."""
    if name not in REGISTRY:
        raise KeyError(f"unknown system {name!r}; choose from {sorted(REGISTRY)}")
    params = PARAM_TYPES[name]()
    if overrides:
        known = set(params.__dataclass_fields__)
        unknown = set(overrides) - known
        if unknown:
            raise KeyError(f"unknown parameters for {name}: {sorted(unknown)}")
        conv = {k: (tuple(map(tuple, v)) if isinstance(v, list) and v and isinstance(v[0], list) else tuple(v) if isinstance(v, list) else v) for k, v in overrides.items()}
        params = replace(params, **conv)
    return REGISTRY[name](params)
