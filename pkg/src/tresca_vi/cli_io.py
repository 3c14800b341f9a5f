"""JSON configuration, experiment dispatch and CSV output.

Usage: tresca-vi <command> --config cfg.json [--out dir] [--seed n]
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import verification as V
from .control_opt import optimize_control
from .mesh_fem import ConvergenceError, build_mesh
from .state_solver import DIRICHLET, ROBIN, ControlField, ProblemSpec, solve_parabolic_vi

log = logging.getLogger(__name__)

COMMANDS = ("solve", "verify", "sweep-h", "sweep-eps", "optimize", "converge-control")

REPORT_COLUMNS = ("config_hash", "seed", "kind", "name", "index", "parameter", "value",
                  "passed", "margin", "slope", "details")
FIELD_COLUMNS = ("config_hash", "seed", "node", "time", "value")

DEFAULTS = {
    "dim": 1,
    "n": 16,
    "n_steps": 32,
    "T": 1.0,
    "c0": 1.0,
    "q": 0.5,
    "b": 1.0,
    "u_b": None,  # defaults to b
    "bc": DIRICHLET,
    "h": 10.0,
    "epsilon": 1e-8,
    "newton_tol": 1e-11,
    "newton_max_iter": 50,
    "control": {"kind": "zero"},
    "M_cost": 1.0,
    "grad_tol": 1e-6,
    "max_iter": 500,
    "mu_list": [0.25, 0.5, 0.75],
    "h_list": [1, 4, 16, 64, 256, 1024],
    "eps_list": [1e-1, 1e-2, 1e-3, 1e-4],
    "n_random": 5,
    "seed": 0,
    "output_dir": "out",
}


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class RunConfig:
    spec: ProblemSpec
    control: dict
    M_cost: float
    grad_tol: float
    max_iter: int
    mu_list: list
    h_list: list
    eps_list: list
    n_random: int
    seed: int
    output_dir: Path
    base_dir: Path = Path(".")
    raw: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _number(raw, key, kind=float, positive=False, nonneg=False):
    v = raw[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(key, f"expected a number, got {v!r}")
    if kind is int and int(v) != v:
        raise ConfigError(key, f"expected an integer, got {v!r}")
    v = kind(v)
    if positive and not v > 0:
        raise ConfigError(key, "must be positive")
    if nonneg and v < 0:
        raise ConfigError(key, "must be nonnegative")
    return v


def _nodal(raw, key):
    v = raw[key]
    if isinstance(v, list):
        try:
            return np.asarray(v, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(key, "expected a list of numbers") from None
    return _number(raw, key)


def _num_list(raw, key):
    v = raw[key]
    if not isinstance(v, list) or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in v
    ):
        raise ConfigError(key, "expected a list of numbers")
    return [float(x) for x in v]


def parse_config(data: dict, base_dir: Path = Path(".")) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = sorted(set(data) - set(DEFAULTS))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    raw = {**DEFAULTS, **data}
    if raw["u_b"] is None:
        raw["u_b"] = raw["b"]
    if raw["bc"] not in (DIRICHLET, ROBIN):
        raise ConfigError("bc", f"must be '{DIRICHLET}' or '{ROBIN}'")
    q = _nodal(raw, "q")
    if np.any(np.asarray(q) < 0):
        raise ConfigError("q", "q must be nonnegative")
    kw = dict(
        dim=_number(raw, "dim", int), n=_number(raw, "n", int, positive=True),
        n_steps=_number(raw, "n_steps", int, positive=True), T=_number(raw, "T", positive=True),
        c0=_number(raw, "c0", nonneg=True), q=q, b=_nodal(raw, "b"), u_b=_nodal(raw, "u_b"),
        bc_mode=raw["bc"], h=_number(raw, "h", positive=True),
        epsilon=_number(raw, "epsilon", positive=True),
        newton_tol=_number(raw, "newton_tol", positive=True),
        newton_max_iter=_number(raw, "newton_max_iter", int, positive=True),
    )
    if kw["dim"] not in (1, 2):
        raise ConfigError("dim", "must be 1 or 2")
    nn = (kw["n"] + 1) ** kw["dim"]
    for key in ("q", "b", "u_b"):
        if isinstance(kw[key], np.ndarray) and kw[key].shape != (nn,):
            raise ConfigError(key, f"expected {nn} nodal values, got {kw[key].size}")
    try:
        spec = ProblemSpec(**kw)
    except ValueError as exc:
        msg = str(exc)
        name = next((k for k in ("u_b", "c0", "h", "q") if msg.startswith(k)), "problem")
        raise ConfigError(name, msg) from None
    control = raw["control"]
    if not isinstance(control, dict) or control.get("kind") not in (
        "zero", "constant", "random", "file"
    ):
        raise ConfigError("control", "kind must be zero, constant, random or file")
    if control["kind"] == "file":
        path = base_dir / str(control.get("path", ""))
        if not path.is_file():
            raise FileNotFoundError(f"control file not found: {path}")
    cfg = RunConfig(
        spec=spec, control=control,
        M_cost=_number(raw, "M_cost", positive=True),
        grad_tol=_number(raw, "grad_tol", positive=True),
        max_iter=_number(raw, "max_iter", int, positive=True),
        mu_list=_num_list(raw, "mu_list"), h_list=_num_list(raw, "h_list"),
        eps_list=_num_list(raw, "eps_list"),
        n_random=_number(raw, "n_random", int, positive=True),
        seed=_number(raw, "seed", int, nonneg=True),
        output_dir=Path(str(raw["output_dir"])), base_dir=base_dir,
    )
    if any(not 0 <= m <= 1 for m in cfg.mu_list):
        raise ConfigError("mu_list", "values must lie in [0, 1]")
    cfg.raw = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in raw.items()
               if k not in ("seed", "output_dir")}
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<json>", f"parse error at line {exc.lineno}, column {exc.colno}: "
                                    f"{exc.msg}") from None
    return parse_config(data, path.parent)


def build_control(cfg: RunConfig, seed: int | None = None) -> ControlField:
    spec, c = cfg.spec, cfg.control
    kind = c["kind"]
    if kind == "zero":
        return ControlField.zeros(spec)
    if kind == "constant":
        return ControlField.constant(spec, float(c.get("value", 0.0)))
    if kind == "random":
        rng = np.random.default_rng(c.get("seed", cfg.seed if seed is None else seed))
        return ControlField.random(spec, rng, float(c.get("low", -1.0)), float(c.get("high", 1.0)))
    path = cfg.base_dir / c["path"]
    vals = np.load(path) if path.suffix == ".npy" else np.loadtxt(path, delimiter=",", ndmin=2)
    g = ControlField(np.asarray(vals, float))
    g.check(spec)
    return g


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    if isinstance(v, (list, tuple)):
        return "[" + " ".join(_fmt(x) for x in v) + "]"
    if isinstance(v, dict):
        return ";".join(f"{k}={_fmt(v[k])}" for k in sorted(v))
    return str(v)


def write_csv(rows, path, columns=REPORT_COLUMNS):
    """Header plus one line per row dict; missing keys are left empty."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([_fmt(r.get(c)) for c in columns])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def check_rows(reports, cfg_hash, seed):
    rows = []
    for i, r in enumerate(reports):
        rows.append(dict(config_hash=cfg_hash, seed=seed, kind="check", name=r.name, index=i,
                         passed=r.passed, margin=r.margin, details=r.details))
    return rows


def sweep_rows(rep, cfg_hash, seed):
    rows = []
    for i, (p, e) in enumerate(zip(rep.values, rep.errors)):
        rows.append(dict(config_hash=cfg_hash, seed=seed, kind="sweep_point", name=rep.name,
                         index=i, parameter=p, value=e))
    rows.append(dict(config_hash=cfg_hash, seed=seed, kind="sweep_summary", name=rep.name,
                     index=len(rep.values), passed=rep.passed, margin=rep.margin,
                     slope=rep.slope, details={"monotone_decrease": rep.monotone_decrease,
                                               **rep.details}))
    return rows


def field_rows(values, times, cfg_hash, seed):
    rows = []
    for k, t in enumerate(times):
        for i, v in enumerate(values[k]):
            rows.append(dict(config_hash=cfg_hash, seed=seed, node=i, time=float(t), value=v))
    return rows


def _nonneg_data(spec):
    return bool(np.all(spec.b >= 0) and np.all(spec.u_b >= 0))


def _robin_ready(spec):
    return bool(np.ptp(spec.b) == 0 and spec.b[0] > 0 and np.array_equal(spec.u_b, spec.b))


def run_battery(cfg: RunConfig, seed: int):
    """Seeded property battery for the configured data in both boundary modes."""
    rng = np.random.default_rng(seed)
    spec = cfg.spec
    specs = [spec]
    twin = V._dirichlet_twin(spec)
    if spec.bc_mode == DIRICHLET:
        specs.append(spec.replace(bc_mode=ROBIN))
    elif twin is not None:
        specs.append(twin)
    g2n = spec.mesh.gamma2_nodes
    out = []
    for s in specs:
        for _ in range(cfg.n_random):
            p1 = ControlField.random(s, rng, 0.0, 1.0)
            p2 = ControlField.random(s, rng, 0.0, 1.0)
            a = ControlField.random(s, rng, -1.0, 1.0)
            b = ControlField.random(s, rng, -1.0, 1.0)
            below = ControlField(a.values - rng.uniform(0.0, 1.0, a.values.shape))
            out.append(V.check_state_residual(s, a, seed))
            if _nonneg_data(s) and np.all(s.q[g2n] > 0):
                out.append(V.check_positivity(s, p1, seed))
            out.append(V.check_comparison_and_squeeze(s, a, below, cfg.mu_list, seed))
            out.append(V.check_comparison_and_squeeze(s, a, b, cfg.mu_list, seed))
            if _nonneg_data(s):
                out.append(V.check_monotony(s, p1, p2, cfg.mu_list, seed))
                out.append(V.check_energy_estimate(s, p1, p2, 0.5, seed))
            out.append(V.check_lipschitz(s, a, b, seed))
            if s.bc_mode == ROBIN and _robin_ready(s):
                gneg = ControlField(-0.5 * rng.uniform(0.0, 1.0, a.values.shape))
                out.append(V.check_robin_bounds(s, gneg, g2=2.0 * gneg, seed=seed))
    if _nonneg_data(spec) and (twin is not None or spec.bc_mode == ROBIN):
        out.append(V.check_convexity(spec, cfg.M_cost, cfg.n_random, seed))
    coarse = _coarsen(spec, min(spec.n, 4 if spec.dim == 1 else 2), min(spec.n_steps, 4))
    for _ in range(2):
        g = ControlField.random(coarse, rng, -1.0, 1.0)
        out.append(V.check_gradient(coarse, cfg.M_cost, g, seed))
    return out


def _coarsen(spec: ProblemSpec, n: int, n_steps: int) -> ProblemSpec:
    """Same problem on a coarser grid; nodal data is sampled at the nearest fine node."""
    fine = spec.mesh.nodes
    crs = build_mesh(spec.dim, n).nodes
    idx = [int(np.argmin(np.sum((fine - x) ** 2, axis=1))) for x in crs]
    return spec.replace(n=n, n_steps=n_steps,
                        q=spec.q[idx], b=spec.b[idx], u_b=spec.u_b[idx])


def run_command(command: str, cfg: RunConfig, out_dir=None, seed=None) -> int:
    if command not in COMMANDS:
        print(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}",
              file=sys.stderr)
        return 2
    seed = cfg.seed if seed is None else int(seed)
    out = Path(out_dir) if out_dir is not None else cfg.output_dir
    h = cfg.config_hash
    spec = cfg.spec
    stem = command.replace("-", "_")
    if command == "solve":
        g = build_control(cfg, seed)
        traj, rep = solve_parabolic_vi(spec, g)
        write_csv(field_rows(traj.values, spec.times, h, seed), out / "state.csv", FIELD_COLUMNS)
        return 0
    if command == "verify":
        reports = run_battery(cfg, seed)
        write_csv(check_rows(reports, h, seed), out / "verify.csv")
        failed = [r for r in reports if not r.passed]
        for r in failed:
            print(f"FAIL {r.name} margin={r.margin!r}", file=sys.stderr)
        return 1 if failed else 0
    if command in ("sweep-h", "sweep-eps"):
        g = build_control(cfg, seed)
        if command == "sweep-h":
            rep = V.sweep_h(spec, g, cfg.h_list)
        else:
            rep = V.sweep_eps(spec, g, cfg.eps_list)
        write_csv(sweep_rows(rep, h, seed), out / f"{stem}.csv")
        return 0 if rep.passed else 1
    if command == "optimize":
        g0 = build_control(cfg, seed)
        g, traj, rep = optimize_control(spec, cfg.M_cost, g0, cfg.grad_tol, cfg.max_iter)
        times = spec.times
        write_csv(field_rows(g.values, times[1:], h, seed), out / "control.csv", FIELD_COLUMNS)
        write_csv(field_rows(traj.values, times, h, seed), out / "state.csv", FIELD_COLUMNS)
        rows = [dict(config_hash=h, seed=seed, kind="cost", name="cost_history", index=i,
                     value=c) for i, c in enumerate(rep.cost_history)]
        rows.append(dict(config_hash=h, seed=seed, kind="summary", name="optimize",
                         index=len(rows), passed=rep.converged, value=rep.final_cost,
                         margin=cfg.grad_tol - rep.final_gradient_norm,
                         details={"iterations": rep.iterations,
                                  "final_gradient_norm": rep.final_gradient_norm,
                                  "backtracks": rep.line_search_backtracks}))
        write_csv(rows, out / "optimize.csv")
        return 0 if rep.converged else 1
    rep = V.control_convergence_study(spec, cfg.M_cost, cfg.h_list, cfg.grad_tol, cfg.max_iter)
    write_csv(sweep_rows(rep, h, seed), out / "converge_control.csv")
    return 0 if rep.passed else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tresca-vi",
        description="Parabolic variational inequalities with Tresca friction: "
                    "solve, verify, sweep and optimize.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON configuration file")
    parser.add_argument("--out", default=None, help="output directory (overrides config)")
    parser.add_argument("--seed", type=int, default=None, help="seed override")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return run_command(args.command, cfg, args.out, args.seed)
    except (ConfigError, FileNotFoundError, ConvergenceError, ValueError, RuntimeError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
