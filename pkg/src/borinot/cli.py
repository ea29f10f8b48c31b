"""Command line entry point.

Subcommands: ``model validate``, ``solve``, ``mpc``, ``jump`` and
``thrustmap fit|eval``.  Every run writes its outputs plus a
``manifest_<command>.json`` into ``--out-dir``.  Exit codes: 1 solver
non-convergence or aborted experiment, 2 configuration error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger("borinot")

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
LOG_ENV = "BORINOT_LOG_LEVEL"


class ConfigError(Exception):
    pass


class SolverFailure(Exception):
    pass


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict:
    import numba

    try:
        from importlib.metadata import version
        pkg = version("artifact")
    except Exception:
        pkg = "unknown"
    return {"artifact": pkg, "python": platform.python_version(), "numpy": np.__version__,
            "numba": numba.__version__}


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


@dataclass
class RunManifest:
    command: list
    seed: int
    config_hashes: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    versions: dict = field(default_factory=_versions)
    status: str = "ok"

    def add_input(self, label: str, path) -> None:
        if path is not None and Path(path).is_file():
            self.config_hashes[label] = {"path": str(path), "sha256": _sha256(path)}

    def write(self, out_dir: Path, name: str = "manifest") -> Path:
        path = out_dir / f"{name}.json"
        doc = {"command": self.command, "seed": self.seed, "config_hashes": self.config_hashes,
               "artifacts": [str(a) for a in self.artifacts], "versions": self.versions,
               "status": self.status}
        _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return doc


def _print_summary(scalars: dict) -> None:
    width = max((len(k) for k in scalars), default=0)
    for k, v in scalars.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        elif isinstance(v, (list, tuple, np.ndarray)):
            v = " ".join(f"{float(x):.6g}" for x in np.ravel(v))
        print(f"{k:<{width}}  {v}")


def _model(args):
    from .model import load_model

    if getattr(args, "model", None):
        return load_model(Path(args.model))
    return None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_model_validate(args, cfg, manifest) -> int:
    from .model import hover_throttle, load_model, reference_path, twr

    path = Path(args.path) if args.path else reference_path()
    manifest.add_input("model", path)
    model = load_model(path)
    print(f"mass {model.total_mass:.3f} kg, TWR {twr(model):.2f}, "
          f"hover throttle {100.0 * hover_throttle(model):.1f}%")
    return EXIT_OK


def cmd_solve(args, cfg, manifest) -> int:
    from .mission import load_mission, mission_path, solve_offline
    from .model import load_reference

    mission = load_mission(args.mission)
    manifest.add_input("mission", args.mission if Path(args.mission).is_file() else mission_path(args.mission))
    manifest.add_input("model", args.model)
    model = _model(args) or load_reference(mission.model)
    rail = solve_offline(mission, model)
    path = args.out_dir / f"rail_{mission.name}.csv"
    rail.to_csv(path)
    manifest.artifacts.append(path)
    _print_summary({"nodes": len(rail.xs), "duration": rail.duration, "converged": rail.converged,
                    "iterations": len(rail.cost_trace), "final_cost": float(rail.cost_trace[-1]),
                    "message": rail.message})
    if not rail.converged:
        raise SolverFailure(f"offline solve did not converge: {rail.message}; "
                            f"cost trace {[round(float(c), 6) for c in rail.cost_trace[-5:]]}")
    return EXIT_OK


def cmd_mpc(args, cfg, manifest) -> int:
    from .mission import Rail, load_mission, mission_path
    from .model import load_reference
    from .sim import PlantConfig, run_closed_loop, run_ee_hold
    from .tracking import TrackingGains

    mission = load_mission(args.mission)
    manifest.add_input("mission", args.mission if Path(args.mission).is_file() else mission_path(args.mission))
    manifest.add_input("model", args.model)
    model = _model(args) or load_reference(mission.model)
    plant = PlantConfig.from_dict(cfg.get("plant", {}))
    gains = TrackingGains.from_dict(cfg["gains"]) if "gains" in cfg else None
    rail = None
    if args.rail:
        manifest.add_input("rail", args.rail)
        rail = Rail.from_csv(args.rail, model.nx)
    has_window = any(p.kind == "task" and p.ee_position for p in mission.phases)
    run = run_ee_hold if has_window else run_closed_loop
    metrics = run(mission, model, plant, rail=rail, gains=gains, seed=args.seed, duration=args.duration)
    manifest.artifacts.extend(metrics.save(args.out_dir, "mpc", mission.name))
    _print_summary({"median_mpc_ms": 1e3 * float(np.median(metrics.info["solve_times"])),
                    **metrics.summary()})
    if metrics.scalars["aborted"]:
        raise SolverFailure(f"experiment aborted: {metrics.info['abort_reason']}")
    return EXIT_OK


def cmd_jump(args, cfg, manifest) -> int:
    from .sim import ContactWorld, JumpConfig, run_jump

    world = ContactWorld(**cfg.get("world", {}))
    jcfg = JumpConfig(**cfg.get("jump", {}))
    model = _model(args)
    manifest.add_input("model", args.model)
    for beta in args.beta:
        metrics = run_jump(beta, world, model, jcfg)
        manifest.artifacts.extend(metrics.save(args.out_dir, "jump", f"beta{beta:g}"))
        print(f"# beta {beta:g}")
        _print_summary(metrics.summary())
    return EXIT_OK


def cmd_thrustmap_fit(args, cfg, manifest) -> int:
    from . import actuation as A

    manifest.add_input("bench", args.data)
    samples = A.read_bench_csv(args.data)
    act = A.Actuation(A.fit_thrust_surface(samples), A.fit_current_curve(samples))
    path = args.out_dir / "thrust_map.json"
    act.save(path)
    manifest.artifacts.append(path)
    print(f"thrust RMSE {act.thrust_map.rmse:.3e} N over {len(samples)} samples")
    print(f"current RMSE {act.current_curve.rmse:.3e} A")
    return EXIT_OK


def cmd_thrustmap_eval(args, cfg, manifest) -> int:
    from . import actuation as A

    manifest.add_input("map", args.map)
    act = A.Actuation.load(args.map)
    rows = []
    for t in args.thrust:
        c, sat = A.command_for_thrust(act.thrust_map, t, args.voltage)
        rows.append((t, args.voltage, c, float(act.thrust_map.thrust(c, args.voltage)), int(sat)))
    path = args.out_dir / "thrust_commands.csv"
    np.savetxt(path, np.array(rows, float), delimiter=",", header="thrust,voltage,command,achieved,saturated",
               comments="", fmt="%.17g")
    manifest.artifacts.append(path)
    for t, v, c, got, sat in rows:
        print(f"{t:.4g} N at {v:.3g} V -> command {c:.6f}{' (saturated)' if sat else ''}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands accept the flags too, without overriding values given before them
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    common.add_argument("--out-dir", type=Path, default=d(Path("runs")), help="output directory")
    common.add_argument("--config", type=Path, default=d(None),
                        help="JSON with plant/gains/world/jump overrides")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(True)
    p = argparse.ArgumentParser(prog="borinot", description=__doc__.split("\n")[0],
                                parents=[_global_flags(False)])
    sub = p.add_subparsers(dest="command", required=True)

    model = sub.add_parser("model", help="model utilities")
    msub = model.add_subparsers(dest="action", required=True)
    v = msub.add_parser("validate", parents=[common], help="load a model and print its summary")
    v.add_argument("path", nargs="?", help="model JSON (default: bundled reference)")
    v.set_defaults(func=cmd_model_validate)

    s = sub.add_parser("solve", parents=[common], help="solve a mission offline and write its rail")
    s.add_argument("mission", help="mission JSON path or bundled mission name")
    s.add_argument("--model", help="model JSON (default: the mission's model)")
    s.set_defaults(func=cmd_solve)

    m = sub.add_parser("mpc", parents=[common], help="closed-loop Rail-MPC experiment")
    m.add_argument("mission")
    m.add_argument("--model")
    m.add_argument("--rail", help="rail CSV from `solve` (default: solve offline first)")
    m.add_argument("--duration", type=float, help="simulated seconds (default: mission sim.duration)")
    m.set_defaults(func=cmd_mpc)

    j = sub.add_parser("jump", parents=[common], help="jump-and-fly on the vertical rail")
    j.add_argument("--beta", type=float, action="append", required=True,
                   help="thrust fraction of the weight; repeat for a sweep")
    j.add_argument("--model")
    j.set_defaults(func=cmd_jump)

    t = sub.add_parser("thrustmap", help="thrust map identification")
    tsub = t.add_subparsers(dest="action", required=True)
    f = tsub.add_parser("fit", parents=[common], help="fit a thrust map to bench CSV data")
    f.add_argument("data", type=Path)
    f.set_defaults(func=cmd_thrustmap_fit)
    e = tsub.add_parser("eval", parents=[common], help="commands for requested thrusts")
    e.add_argument("map", type=Path)
    e.add_argument("--thrust", type=float, action="append", required=True)
    e.add_argument("--voltage", type=float, default=25.2)
    e.set_defaults(func=cmd_thrustmap_eval)
    return p


def main(argv=None) -> int:
    from .mission import MissionError
    from .model import ModelError

    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    manifest = RunManifest(command=["borinot", *argv], seed=args.seed)
    try:
        cfg = _load_config(args.config)
        manifest.add_input("config", args.config)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        code = args.func(args, cfg, manifest)
    except SolverFailure as e:
        print(f"error: {e}", file=sys.stderr)
        manifest.status, code = "solver-failure", EXIT_SOLVER
    except (ConfigError, ModelError, MissionError, ValueError, TypeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    try:
        manifest.write(args.out_dir, "manifest_" + "_".join(
            a for a in (args.command, getattr(args, "action", None)) if a))
    except OSError as e:
        print(f"error: cannot write manifest: {e}", file=sys.stderr)
        return EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
