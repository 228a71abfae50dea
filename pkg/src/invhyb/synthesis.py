"""Regulation maps and pointwise minimum-norm feedback selection."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import lsq_linear
from scipy.spatial import ConvexHull, QhullError

from .core import Box, FeedbackPair, HybridSystemUW, IntervalSet, InputSet, _bisect_edge, merge_intervals, phi_w, psi_u
from .rclf import RCLFCertificate, VerificationReport, disturbance_points, regions, theta_c, theta_d

ROOT_XTOL = 1e-13
SCAN_SAMPLES = 129


class EmptyRegulationError(ValueError):
    pass


class CertificateNotVerified(RuntimeError):
    pass


@dataclass(frozen=True)
class RegulationSample:
    """Closure of the regulation map at one state.

    ``kind`` is ``interval`` (one closed interval, or the single point of R^0),
    ``union`` (several intervals), ``hull`` (vertices of a polytope),
    ``empty``, or ``unbounded`` (the state lies outside the band where Γ is
    finite, so every admissible input qualifies).
    """

    x: np.ndarray
    kind: str
    intervals: tuple[tuple[float, float], ...] = ()
    hull_vertices: np.ndarray | None = None
    base: InputSet | None = None
    box: Box | None = None
    gamma_values: tuple[tuple[float, float], ...] = ()
    dim: int = 1


class Regulator:
    """Γ_c, Γ_d and regulation sets for one system and certificate."""

    def __init__(self, sys: HybridSystemUW, cert: RCLFCertificate, w_interior: int = 0):
        self.sys = sys
        self.cert = cert
        self.R = regions(sys, cert)
        self.w_interior = w_interior

    # Γ --------------------------------------------------------------------
    def gamma_c(self, x, u) -> float:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float).reshape(-1)
        if not self.R.M_c.contains(x):
            return -np.inf
        Phi = phi_w(self.sys, x, u, "flow")
        if Phi.is_empty():
            return -np.inf
        g = np.asarray(self.cert.gradV(x), dtype=float)
        sup = max(float(g @ xi) for w in disturbance_points(Phi, self.w_interior) for xi in self.sys.F(x, u, w))
        return sup + self.cert.sigma * self.cert.rho_c_at(x)

    def gamma_d(self, x, u) -> float:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float).reshape(-1)
        if not self.R.M_d.contains(x):
            return -np.inf
        Phi = phi_w(self.sys, x, u, "jump")
        if Phi.is_empty():
            return -np.inf
        sup = max(float(self.cert.V(xi)) for w in disturbance_points(Phi, self.w_interior) for xi in self.sys.G(x, u, w))
        return sup + self.cert.sigma * self.cert.rho_d_at(x) - self.cert.r

    # regulation sets --------------------------------------------------------
    def base_set(self, x, which: str) -> InputSet:
        if which == "flow_Psi":
            return psi_u(self.sys, x, "flow")
        if which == "flow_Theta":
            return theta_c(self.sys, x)
        if which == "jump":
            return theta_d(self.sys, x, self.w_interior)
        raise ValueError(f"unknown regulation map {which!r}")

    def regulation_set(self, x, which: str, n_scan: int = SCAN_SAMPLES) -> RegulationSample:
        x = np.asarray(x, dtype=float)
        flow = which.startswith("flow")
        M = self.R.M_c if flow else self.R.M_d
        U = self.sys.U_c if flow else self.sys.U_d
        gamma = self.gamma_c if flow else self.gamma_d
        base = self.base_set(x, which)
        if not M.contains(x):
            return RegulationSample(x, "unbounded", base=base, box=U, dim=U.dim)
        if base.is_empty():
            return RegulationSample(x, "empty", base=base, box=U, dim=U.dim)
        if U.dim == 0:
            g = gamma(x, np.empty(0))
            kind = "interval" if g < 0 else "empty"
            return RegulationSample(x, kind, ((0.0, 0.0),) if g < 0 else (), base=base, box=U, gamma_values=((0.0, g),), dim=0)
        if U.dim == 1 and isinstance(base, IntervalSet):
            pieces = []
            scanned = []
            for a, b in base.intervals:
                us = np.linspace(a, b, n_scan) if b > a else np.array([a])
                gs = np.array([gamma(x, [u]) for u in us])
                scanned.extend(zip(us.tolist(), gs.tolist()))
                neg = gs < 0
                i = 0
                while i < len(us):
                    if not neg[i]:
                        i += 1
                        continue
                    k = i
                    while k + 1 < len(us) and neg[k + 1]:
                        k += 1
                    pred = lambda v: gamma(x, [v]) < 0  # noqa: E731
                    lo = us[i] if i == 0 else _bisect_edge(pred, us[i - 1], us[i], ROOT_XTOL)
                    hi = us[k] if k == len(us) - 1 else _bisect_edge(pred, us[k + 1], us[k], ROOT_XTOL)
                    pieces.append((float(lo), float(hi)))
                    i = k + 1
            pieces = list(merge_intervals(pieces))
            kind = "empty" if not pieces else ("interval" if len(pieces) == 1 else "union")
            return RegulationSample(x, kind, tuple(pieces), base=base, box=U, gamma_values=tuple(scanned))
        # several inputs: convex hull of the grid points with Γ < 0
        pts = [u for u in base.grid(max(5, int(round(n_scan ** (1 / U.dim))))) if gamma(x, u) < 0]
        if not pts:
            return RegulationSample(x, "empty", base=base, box=U, dim=U.dim)
        P = np.array(pts)
        try:
            hull = ConvexHull(P)
            verts = P[hull.vertices]
        except (QhullError, ValueError):
            verts = P
        return RegulationSample(x, "hull", hull_vertices=verts, base=base, box=U, dim=U.dim)


def project_origin_onto_hull(V: np.ndarray) -> np.ndarray:
    """Closest point to the origin in conv(rows of V).

    Nonnegative least squares with a heavy simplex row, solved by bounded
    variable least squares (scipy 1.15's ``nnls`` can stop at a wrong vertex).
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    big = 1e4 * (1.0 + np.abs(V).max())
    A = np.vstack([V.T, big * np.ones((1, V.shape[0]))])
    b = np.r_[np.zeros(V.shape[1]), big]
    lam = lsq_linear(A, b, bounds=(0.0, np.inf), method="bvls", tol=1e-14).x
    lam = lam / lam.sum()
    return lam @ V


def min_norm_select(sample: RegulationSample) -> np.ndarray:
    """Smallest-norm element of the closed regulation set."""
    if sample.kind == "empty":
        raise EmptyRegulationError(f"regulation map empty at x={np.asarray(sample.x).tolist()}")
    if sample.kind == "unbounded":
        if sample.base is not None and not sample.base.is_empty():
            return sample.base.min_norm()
        return sample.box.clamp(np.zeros(sample.box.dim)) if sample.box is not None else np.empty(0)
    if sample.kind in ("interval", "union"):
        if sample.dim == 0:
            return np.empty(0)
        return IntervalSet(sample.intervals).min_norm()
    return project_origin_onto_hull(sample.hull_vertices)


# module-level conveniences mirroring the Regulator methods
def gamma_c(sys, cert, x, u) -> float:
    return Regulator(sys, cert).gamma_c(x, u)


def gamma_d(sys, cert, x, u) -> float:
    return Regulator(sys, cert).gamma_d(x, u)


def regulation_set(sys, cert, x, which: str) -> RegulationSample:
    return Regulator(sys, cert).regulation_set(x, which)


@dataclass(frozen=True)
class SynthesisConfig:
    which_theorem: str = "invariance"  # uses Θ_c; "pre-invariance" uses Ψ_c
    reports: Sequence[VerificationReport] | None = None
    force: bool = False
    w_interior: int = 0


@dataclass
class SynthesizedFeedback:
    feedback: FeedbackPair
    descriptor: dict = field(default_factory=dict)


def verification_digest(reports: Sequence[VerificationReport] | None) -> str:
    payload = json.dumps([r.to_dict() for r in reports] if reports else [], sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def synthesize(sys: HybridSystemUW, cert: RCLFCertificate, cfg: SynthesisConfig | None = None) -> SynthesizedFeedback:
    """Pointwise minimum-norm feedback pair from a verified certificate.

    Inside M_c and M_d the law picks the smallest element of the closed
    regulation set; elsewhere it picks the smallest admissible input.
    """
    cfg = cfg or SynthesisConfig()
    if cfg.reports is not None and not cfg.force:
        failed = [r.condition for r in cfg.reports if r.required and not r.passed]
        if failed:
            raise CertificateNotVerified(f"certificate checks failed: {failed}")
    reg = Regulator(sys, cert, cfg.w_interior)
    flow_map = "flow_Theta" if cfg.which_theorem == "invariance" else "flow_Psi"

    def pick(x, which: str, U: Box) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if U.dim == 0:
            return np.empty(0)
        s = reg.regulation_set(x, which)
        if s.kind == "unbounded" and (s.base is None or s.base.is_empty()):
            return U.clamp(np.zeros(U.dim))
        return min_norm_select(s)

    fb = FeedbackPair(lambda x: pick(x, flow_map, sys.U_c), lambda x: pick(x, "jump", sys.U_d), "min-norm")
    desc = {
        "method": "pointwise-min-norm",
        "sigma": cert.sigma,
        "which_theorem": cfg.which_theorem,
        "flow_map": flow_map,
        "verification_digest": verification_digest(cfg.reports),
    }
    return SynthesizedFeedback(fb, desc)


def lipschitz_probe(kappa, points: np.ndarray) -> float:
    """Largest difference quotient of ``kappa`` between consecutive points."""
    P = np.asarray(points, dtype=float)
    vals = np.array([np.asarray(kappa(p), dtype=float).reshape(-1) for p in P])
    dx = np.linalg.norm(np.diff(P, axis=0), axis=1)
    du = np.linalg.norm(np.diff(vals, axis=0), axis=1)
    ok = dx > 0
    return float(np.max(du[ok] / dx[ok])) if np.any(ok) else 0.0
