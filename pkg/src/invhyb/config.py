"""Structured-text run configuration and user-defined systems.

Files are TOML (``.toml``) or YAML (``.yaml``/``.yml``). A configuration
either names a built-in system (with optional parameter overrides) or
describes one under ``[custom]`` with constraint and map expressions.

Expressions use a small arithmetic grammar over the variables
``x1..xn``, ``u1..um`` and ``w1..wd``: ``+ - * /``, ``**`` (or ``^``), unary
minus, numeric literals, ``pi``, ``e`` and the functions ``min max sqrt abs
exp log sin cos tan atan2``. Anything else is rejected before evaluation.
"""

from __future__ import annotations

import ast
import hashlib
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from .core import Box, FeedbackPair, HybridSystemUW, SetValuedMap
from .rclf import RCLFCertificate
from .sets import ConstraintSet, ScalarConstraint
from .systems import SystemBundle, load_system


class ConfigError(ValueError):
    pass


# expressions ------------------------------------------------------------------------------

_FUNCS: dict[str, Callable] = {
    "sqrt": np.sqrt,
    "abs": np.abs,
    "exp": np.exp,
    "log": np.log,
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "atan2": np.arctan2,
    "min": np.minimum,
    "max": np.maximum,
}
_CONSTS = {"pi": math.pi, "e": math.e}
_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)


@dataclass(frozen=True)
class Expression:
    """A parsed, validated expression evaluated against ``z = (x, u, w)``."""

    source: str
    names: frozenset
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, z):
        return self.fn(z)


def _check(node: ast.AST, allowed: dict[str, int]) -> set[str]:
    used: set[str] = set()
    callees = {id(c.func) for c in ast.walk(node) if isinstance(c, ast.Call)}
    for sub in ast.walk(node):
        if isinstance(sub, (ast.Expression, ast.Load)) or isinstance(sub, _BINOPS) or isinstance(sub, (ast.USub, ast.UAdd)):
            continue
        if isinstance(sub, ast.BinOp):
            if not isinstance(sub.op, _BINOPS):
                raise ConfigError(f"operator {type(sub.op).__name__} not allowed")
        elif isinstance(sub, ast.UnaryOp):
            if not isinstance(sub.op, (ast.USub, ast.UAdd)):
                raise ConfigError(f"operator {type(sub.op).__name__} not allowed")
        elif isinstance(sub, ast.Constant):
            if not isinstance(sub.value, (int, float)) or isinstance(sub.value, bool):
                raise ConfigError(f"literal {sub.value!r} not allowed")
        elif isinstance(sub, ast.Call):
            if not isinstance(sub.func, ast.Name) or sub.func.id not in _FUNCS or sub.keywords:
                raise ConfigError(f"call not allowed: {ast.unparse(sub)}")
        elif isinstance(sub, ast.Name):
            if id(sub) in callees or sub.id in _CONSTS:
                continue
            if sub.id not in allowed:
                raise ConfigError(f"unknown name {sub.id!r}")
            used.add(sub.id)
        else:
            raise ConfigError(f"syntax not allowed: {type(sub).__name__}")
    return used


def _evaluate(node: ast.AST, env: dict[str, Any]):
    if isinstance(node, ast.Expression):
        return _evaluate(node.body, env)
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        return _CONSTS[node.id] if node.id in _CONSTS else env[node.id]
    if isinstance(node, ast.UnaryOp):
        v = _evaluate(node.operand, env)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.BinOp):
        a, b = _evaluate(node.left, env), _evaluate(node.right, env)
        op = node.op
        if isinstance(op, ast.Add):
            return a + b
        if isinstance(op, ast.Sub):
            return a - b
        if isinstance(op, ast.Mult):
            return a * b
        if isinstance(op, ast.Div):
            return a / b
        return a**b
    if isinstance(node, ast.Call):
        args = [_evaluate(a, env) for a in node.args]
        fn = _FUNCS[node.func.id]
        if node.func.id in ("min", "max"):
            out = args[0]
            for a in args[1:]:
                out = fn(out, a)
            return out
        return fn(*args)
    raise ConfigError(f"cannot evaluate {type(node).__name__}")  # unreachable after _check


def compile_expression(source: str, variables: dict[str, int]) -> Expression:
    """Parse ``source`` and bind each variable name to an index of ``z``."""
    if not isinstance(source, str):
        source = repr(source)
    try:
        tree = ast.parse(source.replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse expression {source!r}: {exc.msg}") from None
    used = _check(tree, variables)

    def fn(z):
        z = np.asarray(z, dtype=float)
        env = {name: z[variables[name]] for name in used}
        val = _evaluate(tree, env)
        return np.broadcast_to(np.asarray(val, dtype=float), z.shape[1:]) + 0.0

    return Expression(source, frozenset(used), fn)


def variable_map(n: int, m: int, d: int) -> dict[str, int]:
    names = {f"x{i + 1}": i for i in range(n)}
    names.update({f"u{i + 1}": n + i for i in range(m)})
    names.update({f"w{i + 1}": n + m + i for i in range(d)})
    return names


def _blocks_used(names: frozenset) -> frozenset:
    return frozenset(s[0] for s in names) or frozenset({"x"})


def _vector_fn(exprs: list[Expression]) -> Callable:
    return lambda z: np.stack([e(z) for e in exprs])


def build_constraint(spec: Any, variables: dict[str, int], label: str) -> ScalarConstraint:
    """A constraint is ``"h"`` or a table ``{h = "...", grad = ["...", ...], scale = 1}``."""
    if isinstance(spec, str):
        spec = {"h": spec}
    if not isinstance(spec, dict) or "h" not in spec:
        raise ConfigError(f"{label}: constraint needs an 'h' expression")
    h = compile_expression(spec["h"], variables)
    grad = None
    if "grad" in spec:
        g = [compile_expression(s, variables) for s in spec["grad"]]
        if len(g) != len(variables):
            raise ConfigError(f"{label}: gradient needs {len(variables)} components, got {len(g)}")
        grad = _vector_fn(g)
    return ScalarConstraint(h, grad, spec.get("name", h.source), float(spec.get("scale", 1.0)), _blocks_used(h.names))


def build_set(spec: Any, dim: int, variables: dict[str, int], label: str) -> ConstraintSet:
    """Clauses as a list of lists of constraints; a flat list is one clause."""
    if spec is None or spec == []:
        return ConstraintSet.empty(dim)
    if spec == "all":
        return ConstraintSet.whole(dim)
    if not isinstance(spec, list):
        raise ConfigError(f"{label}: expected a list of constraints or clauses")
    clauses = spec if spec and isinstance(spec[0], list) else [spec]
    built = tuple(tuple(build_constraint(c, variables, label) for c in cl) for cl in clauses)
    return ConstraintSet(dim, built, label)


def build_map(spec: Any, n: int, variables: dict[str, int], label: str, convex: bool = True) -> SetValuedMap:
    """One selection ``["f1", "f2"]`` or several ``[["..",".."], ["..",".."]]``."""
    if not isinstance(spec, list) or not spec:
        raise ConfigError(f"{label}: expected a non-empty list of expressions")
    sels = spec if isinstance(spec[0], list) else [spec]
    compiled = []
    for sel in sels:
        if len(sel) != n:
            raise ConfigError(f"{label}: each selection needs {n} components")
        compiled.append([compile_expression(s, variables) for s in sel])
    m = sum(1 for k in variables if k[0] == "u")
    d = sum(1 for k in variables if k[0] == "w")

    def fn(x, u, w):
        z = np.concatenate([np.reshape(x, n), np.reshape(u, m), np.reshape(w, d)])
        return [np.array([float(e(z)) for e in sel]) for sel in compiled]

    return SetValuedMap(fn, convex)


def _box(spec: Any, label: str) -> Box:
    if spec is None or spec == []:
        return Box.point0()
    try:
        return Box.of(*[tuple(map(float, iv)) for iv in spec])
    except (TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"{label}: boxes are lists of [lo, hi] pairs ({exc})") from None


def build_custom(spec: dict) -> SystemBundle:
    """Assemble a system bundle from a ``[custom]`` table."""
    try:
        n = int(spec["n"])
    except (KeyError, TypeError, ValueError):
        raise ConfigError("custom system needs an integer 'n'") from None
    inputs = spec.get("inputs", {})
    U_c, U_d = _box(inputs.get("U_c"), "U_c"), _box(inputs.get("U_d"), "U_d")
    W_c, W_d = _box(inputs.get("W_c"), "W_c"), _box(inputs.get("W_d"), "W_d")
    vc = variable_map(n, U_c.dim, W_c.dim)
    vd = variable_map(n, U_d.dim, W_d.dim)
    vx = variable_map(n, 0, 0)
    flow, jump = spec.get("flow", {}), spec.get("jump", {})
    if "map" not in flow or "map" not in jump:
        raise ConfigError("custom system needs flow.map and jump.map")
    C = build_set(flow.get("set", "all"), len(vc), vc, "C")
    D = build_set(jump.get("set", []), len(vd), vd, "D")
    sys_ = HybridSystemUW(
        n=n,
        C=C,
        F=build_map(flow["map"], n, vc, "F"),
        D=D,
        G=build_map(jump["map"], n, vd, "G", convex=bool(jump.get("convex", False))),
        U_c=U_c,
        U_d=U_d,
        W_c=W_c,
        W_d=W_d,
        name=str(spec.get("name", "custom")),
    )
    feedbacks = {}
    for fname, fb in (spec.get("feedback") or {}).items():
        kc = [compile_expression(s, vx) for s in fb.get("kappa_c", [])]
        kd = [compile_expression(s, vx) for s in fb.get("kappa_d", [])]
        if len(kc) != U_c.dim or len(kd) != U_d.dim:
            raise ConfigError(f"feedback {fname}: input dimensions must match U_c and U_d")
        feedbacks[fname] = FeedbackPair(
            (lambda exprs: lambda x: np.array([e(x) for e in exprs]) if exprs else np.empty(0))(kc),
            (lambda exprs: lambda x: np.array([e(x) for e in exprs]) if exprs else np.empty(0))(kd),
            fname,
        )
    cert = None
    if "certificate" in spec:
        c = spec["certificate"]
        V = compile_expression(c["V"], vx)
        gV = [compile_expression(s, vx) for s in c["gradV"]]
        rc = compile_expression(c["rho_c"], vx) if "rho_c" in c else None
        rd = compile_expression(c["rho_d"], vx) if "rho_d" in c else None
        try:
            cert = RCLFCertificate(V, _vector_fn(gV), float(c["r"]), float(c["r_star"]), rc, rd, float(c.get("sigma", 0.5)))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"certificate: {exc}") from None
    K = build_set(spec["K"], n, vx, "K") if "K" in spec else None
    box = tuple(tuple(map(float, iv)) for iv in spec.get("box", [[-1.0, 1.0]] * n))
    default = spec.get("default_feedback", next(iter(feedbacks), ""))
    return SystemBundle(sys_.name, sys_, cert, feedbacks, default, box, K=K)


# run configuration ------------------------------------------------------------------------

def load_file(path: str | Path) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    try:
        if p.suffix in (".yaml", ".yml"):
            data = yaml.safe_load(text) or {}
        else:
            data = tomllib.loads(text)
    except (tomllib.TOMLDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be a table")
    return data


def resolve_system(cfg: dict, name: str | None = None) -> SystemBundle:
    """Build the system named by ``name`` (CLI flag) or by the config."""
    if "custom" in cfg and name in (None, cfg["custom"].get("name", "custom")):
        return build_custom(cfg["custom"])
    sysname = name or cfg.get("system")
    if not sysname:
        raise ConfigError("no system given (use --system or a 'system' key)")
    try:
        return load_system(sysname, cfg.get("params"))
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc).strip('"')) from None


def digest(resolved: dict) -> str:
    """Stable hash of a fully-resolved configuration."""
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()
