"""Command-line front end.

Subcommands: ``analyze`` (random-policy closed form), ``solve`` (relative
value iteration), ``simulate``, ``sweep`` and ``policy-map``.  Every
command writes CSV files whose first line is a ``#`` comment recording the
version, seed and parameters.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import yaml

from . import __version__
from .analytic import NonObservableSourceError, random_policy_aoi, truncated_chain_aoi
from .mdp import StateSpace, StateSpaceTooLargeError, relative_value_iteration
from .model import SourceSpec, SystemSpec, SystemState, validate
from .pomdp import collapse_to_stationary
from .sim import SCENARIOS, PolicyHandle, build_scenario, policy_map, replicate, scenario_motivating, simulate
from .sim.policies import IncompatiblePolicyError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
OUT_ENV = "AOISCHED_OUT"

POLICY_ALIASES = {"ml": "ml-detect", "qmdp": "qmdp-detect"}
OBSERVABILITY = {"detect": "detectable", "reveal": "detectable-reveal", "undetect": "undetectable"}


class ConfigError(ValueError):
    pass


class NoConvergenceError(ArithmeticError):
    pass


# -- inputs -------------------------------------------------------------------


def load_spec_file(path: str | Path) -> SystemSpec:
    """Read a YAML scenario with ``sensors.count``, ``sensors.channel`` and ``sources[i]``."""
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read spec file {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"spec file {path} is not valid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("spec file must be a mapping")
    sensors = doc.get("sensors")
    if not isinstance(sensors, dict) or "count" not in sensors or "channel" not in sensors:
        raise ConfigError("sensors.count and sensors.channel are required")
    count = sensors["count"]
    channel = np.asarray(sensors["channel"], dtype=float)
    if not isinstance(count, int) or count < 1:
        raise ConfigError("sensors.count must be a positive integer")
    if channel.shape != (count,):
        raise ConfigError(f"sensors.channel must list {count} values")
    raw = doc.get("sources")
    if not isinstance(raw, list) or not raw:
        raise ConfigError("sources must be a nonempty list")
    sources = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict) or "transition" not in item or "obs_prob" not in item:
            raise ConfigError(f"sources[{i}] needs transition and obs_prob")
        try:
            sources.append(SourceSpec(item["transition"], item["obs_prob"]))
        except ValueError as exc:
            raise ConfigError(f"sources[{i}]: {exc}") from None
    try:
        spec = SystemSpec(channel, tuple(sources))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    problems = validate(spec)
    if problems:
        raise ConfigError("\n".join(problems))
    return spec


def resolve_spec(args: argparse.Namespace) -> tuple[SystemSpec, str]:
    if args.spec:
        return load_spec_file(args.spec), Path(args.spec).stem
    if not args.scenario:
        raise ConfigError("either --scenario or --spec is required")
    try:
        return build_scenario(args.scenario, p=args.p, alpha=args.alpha, gamma=args.gamma), args.scenario
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def initial_state(args: argparse.Namespace, spec: SystemSpec) -> SystemState | None:
    if not args.deterministic_init:
        return None
    if args.scenario == "motivating" and not args.spec:
        return scenario_motivating()[1]
    return SystemState((0,) * spec.num_sources, (1,) * spec.num_sources)


def solver_options(args: argparse.Namespace, spec: SystemSpec) -> dict:
    """Reference state and aperiodicity weight for value iteration.

    The motivating scenario is periodic and its source configurations form
    several closed classes, so it is solved from its initial configuration
    with a damped operator unless told otherwise.
    """
    motivating = args.scenario == "motivating" and not args.spec
    aperiodicity = args.aperiodicity
    if aperiodicity is None:
        aperiodicity = 0.5 if motivating else 1.0
    if not 0.0 < aperiodicity <= 1.0:
        raise ConfigError("--aperiodicity must lie in (0, 1]")
    reference = None
    if motivating:
        start = scenario_motivating()[1]
        reference = SystemState(start.source_states, (args.Q,) * spec.num_sources)
    return {"reference": reference, "aperiodicity": aperiodicity}


def parse_policy(name: str) -> tuple[str, str, bool]:
    """(kind, observability, myopic) from names like ``qmdp-detect-myopic``."""
    name = POLICY_ALIASES.get(name, name)
    if name in ("random", "myopic", "optimal"):
        return name, "full", False
    parts = name.split("-")
    myopic = parts[-1] == "myopic"
    if myopic:
        parts = parts[:-1]
    if len(parts) == 1 and parts[0] in ("ml", "qmdp"):
        parts.append("detect")
    if len(parts) != 2 or parts[0] not in ("ml", "qmdp") or parts[1] not in OBSERVABILITY:
        raise ConfigError(f"unknown policy {name!r}")
    return parts[0], OBSERVABILITY[parts[1]], myopic


# -- outputs ------------------------------------------------------------------


def out_dir(args: argparse.Namespace) -> Path:
    path = Path(args.out_dir or os.environ.get(OUT_ENV) or ".")
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


def provenance(args: argparse.Namespace) -> str:
    params = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out_dir")}
    return f"# aoisched {__version__} command={args.command} seed={getattr(args, 'seed', None)} params={json.dumps(params)}"


@contextmanager
def csv_writer(path: Path, args: argparse.Namespace, header: Sequence[str]) -> Iterator:
    with open(path, "w", newline="") as fh:
        fh.write(provenance(args) + "\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        yield writer, fh
    print(path)


def read_csv(path: str | Path) -> list[dict[str, str]]:
    """Rows of an emitted CSV file, skipping ``#`` comment lines."""
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


# -- policies -----------------------------------------------------------------


class PolicyFactory:
    """Builds policy handles for one spec, solving each value table at most once."""

    def __init__(self, spec: SystemSpec, args: argparse.Namespace):
        self.spec = spec
        self.args = args
        self._tables: dict[str, object] = {}

    def table(self, collapsed: bool):
        key = "collapsed" if collapsed else "full"
        if key not in self._tables:
            spec = collapse_to_stationary(self.spec) if collapsed else self.spec
            try:
                space = StateSpace(spec, self.args.Q)
            except StateSpaceTooLargeError as exc:
                raise ConfigError(f"exact solve not possible for this scenario: {exc}") from None
            opts = solver_options(self.args, self.spec) if not collapsed else {}
            table, _ = relative_value_iteration(
                spec, self.args.Q, self.args.epsilon, max_iters=self.args.max_iters, space=space, **opts
            )
            if not table.converged:
                raise NoConvergenceError(
                    f"value iteration did not converge in {table.iterations} iterations "
                    f"(bracket {table.span_high - table.span_low:g})"
                )
            self._tables[key] = table
        return self._tables[key]

    def make(self, name: str) -> PolicyHandle:
        kind, obs, myopic = parse_policy(name)
        try:
            ties = getattr(self.args, "ties", None)
            if kind == "random":
                return PolicyHandle.random()
            if kind == "myopic":
                return PolicyHandle.myopic(tie_break=ties)
            if kind == "optimal":
                return PolicyHandle.optimal(self.table(False), tie_break=ties)
            table = None if myopic else self.table(obs == "undetectable")
            return PolicyHandle(
                kind, obs, table, mode=self.args.mode, samples=self.args.samples, tie_break=ties
            )
        except IncompatiblePolicyError as exc:
            raise ConfigError(str(exc)) from None


# -- subcommands --------------------------------------------------------------


def cmd_analyze(args: argparse.Namespace) -> int:
    spec, name = resolve_spec(args)
    try:
        per_source, overall = random_policy_aoi(spec)
    except NonObservableSourceError as exc:
        raise ConfigError(str(exc)) from None
    header = ["source", "analytic_aoi"] + (["oracle_aoi"] if args.oracle_Q else [])
    with csv_writer(out_dir(args) / f"analyze_{name}.csv", args, header) as (w, _):
        for k, value in enumerate(per_source):
            row = [k, fmt(value)]
            if args.oracle_Q:
                row.append(fmt(truncated_chain_aoi(spec, k, args.oracle_Q)))
            w.writerow(row)
        w.writerow(["overall", fmt(overall)] + ([""] if args.oracle_Q else []))
    return EXIT_OK


def cmd_solve(args: argparse.Namespace) -> int:
    spec, name = resolve_spec(args)
    try:
        space = StateSpace(spec, args.Q)
    except StateSpaceTooLargeError as exc:
        raise ConfigError(str(exc)) from None
    table, policy = relative_value_iteration(
        spec, args.Q, args.epsilon, max_iters=args.max_iters, space=space, **solver_options(args, spec)
    )
    directory = out_dir(args)
    tr = table.trace
    with csv_writer(directory / f"solve_{name}_trace.csv", args, ["iteration", "delta_low", "delta_high", "lambda"]) as (w, _):
        for i in range(len(tr["lam"])):
            w.writerow([i + 1, fmt(tr["delta_low"][i]), fmt(tr["delta_high"][i]), fmt(tr["lam"][i])])
    K = spec.num_sources
    states, aoi = space.decode_arrays()
    header = ["index"] + [f"state_{k}" for k in range(K)] + [f"aoi_{k}" for k in range(K)] + ["action"]
    with csv_writer(directory / f"solve_{name}_policy.csv", args, header) as (w, _):
        w.writerows(
            [i, *states[i].tolist(), *aoi[i].tolist(), int(a)] for i, a in enumerate(policy.actions)
        )
    print(f"gain={table.gain!r} iterations={table.iterations} converged={table.converged}", file=sys.stderr)
    if not table.converged:
        print("error: value iteration did not converge", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _burn_in(args: argparse.Namespace) -> int:
    return 0 if args.no_burn_in else args.burn_in


def cmd_simulate(args: argparse.Namespace) -> int:
    spec, name = resolve_spec(args)
    if not args.policy:
        raise ConfigError("at least one --policy is required")
    factory = PolicyFactory(spec, args)
    init = initial_state(args, spec)
    burn_in = _burn_in(args)
    directory = out_dir(args)
    want_trace = args.trace or args.slots <= 1000
    header = ["policy", "mean_aoi", "stderr"] + [f"aoi_{k}" for k in range(spec.num_sources)]
    with csv_writer(directory / f"simulate_{name}.csv", args, header) as (w, fh):
        for pname in args.policy:
            handle = factory.make(pname)
            try:
                result = replicate(spec, handle, args.slots, burn_in, args.runs, args.seed, init)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            w.writerow([pname, fmt(result.mean), fmt(result.stderr), *map(fmt, result.per_source_mean)])
            fh.flush()
            if want_trace:
                write_trace(directory / f"trace_{name}_{pname}.csv", args, spec, handle, burn_in, init)
    return EXIT_OK


def write_trace(path: Path, args, spec: SystemSpec, handle: PolicyHandle, burn_in: int, init) -> None:
    from .sim.engine import child_seed

    _, rows = simulate(spec, handle, args.slots, burn_in, [child_seed(args.seed, 0)], init, trace=True)
    K = spec.num_sources
    header = (
        ["slot"] + [f"state_{k}" for k in range(K)] + [f"aoi_{k}" for k in range(K)]
        + ["action", "channel_ok"] + [f"observed_{k}" for k in range(K)] + ["belief_entropy"]
    )
    with csv_writer(path, args, header) as (w, _):
        for r in rows:
            w.writerow(
                [r["slot"], *r["states"], *r["aoi"], r["action"], int(r["channel_ok"]),
                 *map(int, r["observed"]), fmt(r["belief_entropy"]) if "belief_entropy" in r else ""]
            )


def parse_grid(text: str) -> list[float]:
    """``0.2,0.3,0.5`` or ``start:stop:step`` (inclusive)."""
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            if step <= 0:
                raise ValueError
            n = int(np.floor((stop - start) / step + 1e-9)) + 1
            return [round(start + i * step, 12) for i in range(n)]
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse grid {text!r}") from None


def cmd_sweep(args: argparse.Namespace) -> int:
    if not args.policy:
        raise ConfigError("at least one --policy is required")
    if not args.scenario:
        raise ConfigError("sweep needs a built-in --scenario")
    grid = parse_grid(args.values)
    if not grid:
        raise ConfigError("parameter grid is empty")
    for pname in args.policy:
        if pname != "random-analytic":
            parse_policy(pname)
    burn_in = _burn_in(args)
    path = out_dir(args) / f"sweep_{args.scenario}_{args.param}.csv"
    with csv_writer(path, args, [args.param, "policy", "mean_aoi", "stderr"]) as (w, fh):
        for value in grid:
            setattr(args, args.param, value)
            spec, _ = resolve_spec(args)
            factory = PolicyFactory(spec, args)
            for pname in args.policy:
                if pname == "random-analytic":
                    w.writerow([fmt(value), pname, fmt(random_policy_aoi(spec)[1]), fmt(0.0)])
                else:
                    handle = factory.make(pname)
                    result = replicate(spec, handle, args.slots, burn_in, args.runs, args.seed)
                    w.writerow([fmt(value), pname, fmt(result.mean), fmt(result.stderr)])
                fh.flush()
    return EXIT_OK


def _policy_from_dump(path: str, spec: SystemSpec, states: tuple[int, ...], grid: list[int]) -> np.ndarray:
    rows = read_csv(path)
    K = spec.num_sources
    lookup = {}
    for r in rows:
        key = tuple(int(r[f"state_{k}"]) for k in range(K)) + tuple(int(r[f"aoi_{k}"]) for k in range(K))
        lookup[key] = int(r["action"])
    Q = max(int(r["aoi_0"]) for r in rows)
    out = np.empty((len(grid), len(grid)), dtype=np.int64)
    for i, d1 in enumerate(grid):
        for j, d2 in enumerate(grid):
            out[i, j] = lookup[states + (min(d1, Q), min(d2, Q))]
    return out


def cmd_policy_map(args: argparse.Namespace) -> int:
    spec, name = resolve_spec(args)
    if spec.num_sources != 2:
        raise ConfigError(f"policy maps need 2 sources, scenario has {spec.num_sources}")
    states = tuple(int(s) for s in args.states.split(","))
    grid = list(range(1, args.aoi_max + 1))
    try:
        if args.policy_file:
            actions = _policy_from_dump(args.policy_file, spec, states, grid)
        else:
            handle = PolicyFactory(spec, args).make(args.policy)
            actions = policy_map(spec, handle, states, grid)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"cannot build policy map: {exc}") from None
    label = "file" if args.policy_file else args.policy
    with csv_writer(out_dir(args) / f"policy_map_{name}_{label}.csv", args, ["aoi_0", "aoi_1", "action"]) as (w, _):
        for i, d1 in enumerate(grid):
            for j, d2 in enumerate(grid):
                w.writerow([d1, d2, int(actions[i, j])])
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aoisched", description="AoI sensor scheduling toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--scenario", choices=SCENARIOS)
    src.add_argument("--spec", help="YAML scenario file")
    common.add_argument("--p", type=float)
    common.add_argument("--alpha", type=float)
    common.add_argument("--gamma", type=float)
    common.add_argument("--out-dir", help=f"output directory (default: ${OUT_ENV} or .)")

    solver = argparse.ArgumentParser(add_help=False)
    solver.add_argument("--Q", type=int, default=20, help="AoI truncation")
    solver.add_argument("--epsilon", type=float, default=1e-6)
    solver.add_argument("--max-iters", type=int, default=100_000)
    solver.add_argument(
        "--aperiodicity", type=float,
        help="damping weight in (0, 1] (default: 0.5 for motivating, 1 otherwise)",
    )

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--policy", action="append", default=[], help="repeatable")
    sim.add_argument("--slots", type=int, default=100_000)
    sim.add_argument("--burn-in", type=int, default=10_000)
    sim.add_argument("--no-burn-in", action="store_true")
    sim.add_argument("--runs", type=int, default=10)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--mode", choices=("exact", "sampled"), default="exact")
    sim.add_argument("--samples", type=int, default=1024)
    sim.add_argument(
        "--ties", choices=("lowest", "random"),
        help="tie-break rule (default: random for ml/qmdp, lowest otherwise)",
    )

    p = sub.add_parser("analyze", parents=[common], help="random-policy AoI in closed form")
    p.add_argument("--oracle-Q", type=int, default=0, help="also solve the truncated chain at this Q")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("solve", parents=[common, solver], help="relative value iteration")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", parents=[common, solver, sim], help="Monte-Carlo evaluation")
    p.add_argument("--deterministic-init", action="store_true")
    p.add_argument("--trace", action="store_true", help="write the per-slot trace of the first run")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", parents=[common, solver, sim], help="parameter sweep")
    p.add_argument("--param", choices=("p", "alpha", "gamma"), required=True)
    p.add_argument("--values", required=True, help="comma list or start:stop:step")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("policy-map", parents=[common, solver], help="action grid over two AoIs")
    p.add_argument("--policy", default="optimal")
    p.add_argument("--policy-file", help="policy CSV written by solve")
    p.add_argument("--states", default="0,0", help="fixed source states")
    p.add_argument("--aoi-max", type=int, default=20)
    p.add_argument("--mode", default="exact")
    p.add_argument("--samples", type=int, default=1024)
    p.set_defaults(func=cmd_policy_map)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, IncompatiblePolicyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
