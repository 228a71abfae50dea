"""Command-line front end: simulate, verify, synthesize and reproduce runs."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, digest, load_file, resolve_system
from .core import close_loop, project_states
from .experiments import (
    DEFAULT_SEEDS,
    arm_initial_conditions,
    arm_jump_violations,
    ball_metrics,
    ball_sim_config,
    ball_violations,
    level_target,
    planar_initial_conditions,
    run_arm,
    run_planar,
)
from .rclf import (
    certificate_grids,
    closed_loop_grids,
    generic_set_grids,
    verify_clf_flow,
    verify_clf_jump,
    verify_closedloop_lyapunov,
    verify_generic_set,
    verify_invariance_extras,
    verify_rho_positivity,
)
from .sets import MEMBERSHIP_TOL, sample
from .simulator import RNG_ALGORITHM, SimConfig, SimulationError, check_invariance, simulate, summary, to_csv
from .synthesis import CertificateNotVerified, EmptyRegulationError, SynthesisConfig, synthesize
from .systems import REGISTRY

log = logging.getLogger("invhyb")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_SIM = 0, 1, 2, 3
# grid resolutions used when --grid is not given
DEFAULT_GRID = {"bouncing-ball": 0.05, "robot-arm": 0.01, "planar": 0.01}
DEFAULT_TABLE_GRID = 0.25


@dataclass
class RunManifest:
    command: str
    system: str
    config_digest: str
    seed: int
    outputs: list[str] = field(default_factory=list)
    tool_version: str = __version__
    rng: str = f"{RNG_ALGORITHM} (numpy {np.__version__})"


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if is_dataclass(o):
        return asdict(o)
    return str(o)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def parse_vector(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"cannot parse vector {text!r}; use comma-separated numbers") from None


class Context:
    """Resolved configuration shared by the subcommands."""

    def __init__(self, args):
        self.args = args
        self.file_cfg = load_file(args.config) if args.config else {}
        sysname = getattr(args, "system", None)
        self.bundle = resolve_system(self.file_cfg, sysname)
        self.name = self.bundle.name
        run = self.file_cfg.get("run", {})
        self.seed = args.seed if args.seed is not None else int(run.get("seed", 0))
        self.tol = args.tol if args.tol is not None else float(run.get("tol", MEMBERSHIP_TOL))
        self.grid = args.grid if args.grid is not None else run.get("grid")
        self.out = Path(args.out)

    def resolved(self, **extra) -> dict:
        params = self.bundle.params
        return {
            "command": self.args.command,
            "system": self.name,
            "params": asdict(params) if is_dataclass(params) else None,
            "file": self.file_cfg,
            "seed": self.seed,
            "tol": self.tol,
            "grid": self.grid,
            **extra,
        }

    def finish(self, command: str, outputs: dict[str, str], **extra) -> RunManifest:
        """Write every output plus the manifest, each atomically."""
        paths = []
        for name, text in outputs.items():
            p = self.out / name
            write_atomic(p, text)
            paths.append(str(p))
        m = RunManifest(command, self.name, digest(self.resolved(**extra)), self.seed, paths)
        write_atomic(self.out / f"{command}_manifest.json", dump_json(asdict(m)))
        return m


def _feedback(ctx: Context, name: str | None):
    b = ctx.bundle
    name = name or b.default_feedback
    if name == "synth":
        if b.certificate is None:
            raise ConfigError(f"{b.name} has no certificate to synthesize from")
        return synthesize(b.system, b.certificate, SynthesisConfig(force=True)).feedback
    if name not in b.feedbacks:
        raise ConfigError(f"unknown feedback {name!r} for {b.name}; choose from {sorted(b.feedbacks) + ['synth']}")
    return b.feedbacks[name]


def _targets(ctx: Context):
    b = ctx.bundle
    out = []
    if b.K is not None:
        out.append(("K", b.K))
    if b.certificate is not None:
        out.append(("L_V(r)", level_target(b)))
    return out


# subcommands -------------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    ctx = Context(args)
    sim = ctx.file_cfg.get("simulation", {})
    fb = _feedback(ctx, args.feedback or sim.get("feedback"))
    x0 = parse_vector(args.x0) if args.x0 else sim.get("x0")
    if x0 is None:
        raise ConfigError("no initial state given (use --x0)")
    if len(x0) != ctx.bundle.system.n:
        raise ConfigError(f"x0 has {len(x0)} entries, system has n={ctx.bundle.system.n}")
    T = args.T if args.T is not None else float(sim.get("T", 10.0))
    J = args.J if args.J is not None else int(sim.get("J", 10_000))
    sel = args.jump_selection if args.jump_selection is not None else sim.get("jump_selection", 0)
    sel = sel if sel == "random" else int(sel)
    try:
        cfg = SimConfig(horizon_T=T, horizon_J=J, seed=ctx.seed, tol=ctx.tol, priority=args.priority or sim.get("priority", "JumpFirst"), jump_selection=sel)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    sysW = close_loop(ctx.bundle.system, fb)
    sol = simulate(sysW, x0, cfg)
    checks = [(name, check_invariance(sol, S)) for name, S in _targets(ctx)]
    summ = summary(sol, checks)
    ctx.finish("simulate", {"trajectory.csv": to_csv(sol), "summary.json": dump_json(summ)}, x0=list(x0), T=T, J=J, feedback=fb.name, jump_selection=sel)
    counts = ", ".join(f"D{k}: {v}" for k, v in summ["impact_count_per_jumpset"].items()) or "none"
    print(f"termination={summ['termination']} jumps={summ['jumps']} impacts per jump set: {counts}")
    print(f"invariant={summ['invariant']}")
    if args.require_invariant and summ["invariant"] is False:
        return EXIT_FAIL
    return EXIT_OK


def verification_reports(bundle, res: float, tol: float = MEMBERSHIP_TOL) -> list:
    """Every certificate and closed-loop check that applies to ``bundle``."""
    sys_ = bundle.system
    cert = bundle.certificate
    reports = []
    fb = bundle.feedbacks.get(bundle.default_feedback)
    if cert is not None:
        g = certificate_grids(sys_, cert, bundle.box, res)
        reports += verify_rho_positivity(cert, g["band"], g["level"])
        cands = [fb.kappa_c] if fb is not None else []
        jcands = [fb.kappa_d] if fb is not None else []
        reports.append(verify_clf_flow(sys_, cert, g["M_c"], candidates=cands, tol=tol))
        reports.append(verify_clf_jump(sys_, cert, g["M_d"], candidates=jcands, tol=tol))
        if fb is not None:
            sysW = close_loop(sys_, fb)
            cg = closed_loop_grids(sysW, cert, bundle.box, res)
            reports += verify_closedloop_lyapunov(sysW, cert, cg, tol=tol)
            extras = verify_invariance_extras(sysW, cert, cg)
            if not bundle.extras_required:
                for r in extras:
                    r.required = False
            reports += extras
    if bundle.K is not None and fb is not None:
        sysW = close_loop(sys_, fb)
        reports += verify_generic_set(sysW, bundle.K, generic_set_grids(sysW, bundle.K, bundle.box, res), tol=tol)
    return reports


def cmd_verify(args) -> int:
    ctx = Context(args)
    res = float(ctx.grid or DEFAULT_GRID.get(ctx.name, 0.01))
    t0 = time.perf_counter()
    reports = verification_reports(ctx.bundle, res, ctx.tol)
    log.info("verification took %.2fs", time.perf_counter() - t0)
    payload = [r.to_dict() for r in reports]
    ctx.finish("verify", {"verification.json": dump_json(payload)}, resolution=res)
    for r in reports:
        status = "PASS" if r.passed else ("FAIL" if r.required else "info")
        print(f"{status:5s} {r.condition:10s} worst={r.worst_residual} grid={r.grid_size}")
    return EXIT_FAIL if any(r.required and not r.passed for r in reports) else EXIT_OK


def cmd_synthesize(args) -> int:
    ctx = Context(args)
    b = ctx.bundle
    if b.certificate is None:
        raise ConfigError(f"{b.name} has no certificate to synthesize from")
    reports = None
    if not args.force:
        reports = verification_reports(b, float(DEFAULT_GRID.get(ctx.name, 0.05)), ctx.tol)
    syn = synthesize(b.system, b.certificate, SynthesisConfig(which_theorem=args.theorem, reports=reports, force=args.force))
    res = float(ctx.grid or DEFAULT_TABLE_GRID)
    g = certificate_grids(b.system, b.certificate, b.box, res)
    n = b.system.n
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*[f"x{i + 1}" for i in range(n)], "map", *[f"u_c{i + 1}" for i in range(b.system.U_c.dim)], *[f"u_d{i + 1}" for i in range(b.system.U_d.dim)]])
    for region, which in (("M_c", "flow"), ("M_d", "jump")):
        for x in g[region].points:
            uc = syn.feedback.kappa_c(x) if which == "flow" else [""] * b.system.U_c.dim
            ud = syn.feedback.kappa_d(x) if which == "jump" else [""] * b.system.U_d.dim
            w.writerow([*map(repr, map(float, x)), which, *[repr(float(v)) if v != "" else "" for v in uc], *[repr(float(v)) if v != "" else "" for v in ud]])
    ctx.finish("synthesize", {"feedback_table.csv": buf.getvalue(), "descriptor.json": dump_json(syn.descriptor)}, theorem=args.theorem, force=args.force, table_resolution=res)
    print(dump_json(syn.descriptor), end="")
    return EXIT_OK


def _reproduce_ball(ctx: Context, seeds, workers: int) -> dict:
    b = ctx.bundle
    sysK = close_loop(b.system, b.feedbacks["bkd"])
    sysM = close_loop(b.system, b.feedbacks["kmd"])

    def one(seed: int) -> dict:
        cfg = ball_sim_config(seed, ctx.args.T or 20.0)
        a = ball_metrics(b, simulate(sysK, (11.0, 0.0), cfg), seed)
        m = ball_metrics(b, simulate(sysM, (11.0, 0.0), cfg), seed)
        return {
            "seed": seed,
            "impacts_kd": a.ground_impacts,
            "impacts_kmd": m.ground_impacts,
            "violations_kd": ball_violations(b, a),
            "violations_kmd": ball_violations(b, m),
        }

    with ThreadPoolExecutor(max_workers=workers) as ex:
        rows = list(ex.map(one, seeds))
    single = len(rows) == 1
    return {
        "seeds": list(seeds),
        "impacts_kd": rows[0]["impacts_kd"] if single else [r["impacts_kd"] for r in rows],
        "impacts_kmd": rows[0]["impacts_kmd"] if single else [r["impacts_kmd"] for r in rows],
        "all_peaks_in_range": all(not r["violations_kd"] and not r["violations_kmd"] for r in rows),
        "runs": rows,
    }


def _reproduce_arm(ctx: Context, workers: int) -> dict:
    b = ctx.bundle
    ics = arm_initial_conditions(b, 6, ctx.seed)
    T = ctx.args.T or 30.0

    def one(i: int) -> dict:
        r = run_arm(b, ics[i], seed=ctx.seed + i, T=T)
        return {"x0": r.x0, "invariant": r.invariant, "max_V": r.max_V, "r": b.certificate.r, "final_norm": r.final_norm, "jumps": len(r.jump_states), "jumps_outside_D": arm_jump_violations(b, r)}

    with ThreadPoolExecutor(max_workers=workers) as ex:
        rows = list(ex.map(one, range(len(ics))))
    return {"solutions": rows, "all_invariant": all(r["invariant"] for r in rows)}


def _reproduce_planar(ctx: Context, workers: int) -> dict:
    b = ctx.bundle
    ics = planar_initial_conditions(10, ctx.seed)

    def one(i: int) -> dict:
        sol, inv = run_planar(b, ics[i], seed=ctx.seed + i, T=ctx.args.T or 10.0)
        nrm = np.linalg.norm(sol.arc.x, axis=1)
        return {"x0": ics[i].tolist(), "invariant": inv.ok, "min_norm": float(nrm.min()), "max_norm": float(nrm.max()), "jumps": sol.jumps}

    with ThreadPoolExecutor(max_workers=workers) as ex:
        rows = list(ex.map(one, range(len(ics))))
    return {"solutions": rows, "all_invariant": all(r["invariant"] for r in rows)}


def cmd_reproduce(args) -> int:
    ctx = Context(args)
    workers = max(1, args.workers)
    if ctx.name == "bouncing-ball":
        seeds = list(range(args.seeds)) if args.seeds else [ctx.seed]
        result = _reproduce_ball(ctx, seeds, workers)
        ok = result["all_peaks_in_range"]
    elif ctx.name == "robot-arm":
        result = _reproduce_arm(ctx, workers)
        ok = result["all_invariant"]
    elif ctx.name == "planar":
        result = _reproduce_planar(ctx, workers)
        ok = result["all_invariant"]
    else:
        raise ConfigError(f"no reproduction recipe for {ctx.name}")
    ctx.finish("reproduce", {"reproduce.json": dump_json(result)}, seeds=args.seeds, T=args.T)
    print(dump_json({k: v for k, v in result.items() if k not in ("runs",)}), end="")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_list_systems(args) -> int:
    for name in sorted(REGISTRY):
        b = REGISTRY[name]()
        cert = "certificate" if b.certificate is not None else "no certificate"
        print(f"{name}: n={b.system.n}, feedbacks={sorted(b.feedbacks)}, {cert}")
    return EXIT_OK


# argument parsing --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or YAML run configuration")
    common.add_argument("--seed", type=int, help="RNG seed")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--tol", type=float, help="membership tolerance (default 1e-9)")
    common.add_argument("--grid", type=float, help="grid resolution per state dimension")
    common.add_argument("--system", help=f"system name: {'|'.join(sorted(REGISTRY))}")

    p = argparse.ArgumentParser(prog="invhyb", description="Hybrid inclusions with inputs and disturbances: simulation, certificate checks and feedback synthesis.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate a closed loop")
    s.add_argument("--feedback", help="registered feedback name, or 'synth'")
    s.add_argument("--x0", help="initial state, comma-separated")
    s.add_argument("--T", type=float, help="flow-time horizon")
    s.add_argument("--J", type=int, help="jump horizon")
    s.add_argument("--priority", choices=["JumpFirst", "FlowFirst"])
    s.add_argument("--jump-selection", help="jump map selection index or 'random'")
    s.add_argument("--require-invariant", action="store_true", help="exit 1 if the run leaves its target set")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", parents=[common], help="check certificate conditions on grids")
    v.set_defaults(func=cmd_verify)

    y = sub.add_parser("synthesize", parents=[common], help="build the minimum-norm feedback table")
    y.add_argument("--theorem", choices=["invariance", "pre-invariance"], default="invariance")
    y.add_argument("--force", action="store_true", help="skip the verification precondition")
    y.set_defaults(func=cmd_synthesize)

    r = sub.add_parser("reproduce", parents=[common], help="rerun the reference experiments")
    r.add_argument("--seeds", type=int, help="bouncing ball: run seeds 0..N-1 instead of --seed")
    r.add_argument("--T", type=float, help="override the experiment horizon")
    r.add_argument("--workers", type=int, default=4)
    r.set_defaults(func=cmd_reproduce)

    ls = sub.add_parser("list-systems", help="list built-in systems")
    ls.set_defaults(func=cmd_list_systems)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("INVHYB_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "reproduce" and not getattr(args, "system", None) and not getattr(args, "config", None):
        print("error: reproduce needs --system", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, CertificateNotVerified) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, EmptyRegulationError) as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIM


if __name__ == "__main__":
    sys.exit(main())
