"""Command line entry point ``plan``.

Subcommands::

    plan classical --tasks DIR --budget 10000 --algos iw1,iw2,ihiw11 --out report.csv
    plan pixel --map small --algo pi_hiw --tiles 2x2 --quant 256 --steps 200000
    plan widthmath --n 128 --d 256 --w 2

``--config FILE`` reads an INI file whose ``[DEFAULT]`` section and the
section named after the subcommand override command line flags. The seed
falls back to the ``PLAN_SEED`` environment variable, then to 0.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .guidance import AgentConfig, gridworld_agent, last_mean_at_least
from .hierarchy import ihiw
from .search import SearchBudget, count_based_riw, iw_search
from .simulator import GridworldEnv, load_map
from .strips import TaskError, atom_feature_map, load_task, split_single_goal, strips_env
from .widthmath import WidthParamError, WidthParams, summary

log = logging.getLogger("widthplan")

# ---------------------------------------------------------------- classical suite

_ALGO = re.compile(r"^(iw|count_riw)(\d)$|^(ihiw)(\d)(\d)$")


@dataclass(frozen=True)
class Algorithm:
    name: str
    run: Callable  # (env, feature_map, budget, seed) -> SearchResult


def parse_algorithm(token: str) -> Algorithm:
    """``iw1``, ``iw2``, ``count_riw1`` or ``ihiw11`` (w_h then w_l)."""
    m = _ALGO.match(token.strip())
    if m is None:
        raise ValueError(f"unknown algorithm {token!r}; use iwW, count_riwW or ihiwHL")
    if m.group(1) == "iw":
        w = int(m.group(2))
        return Algorithm(token, lambda env, fm, b, seed: iw_search(env, fm, w, b))
    if m.group(1) == "count_riw":
        w = int(m.group(2))
        return Algorithm(token, lambda env, fm, b, seed: count_based_riw(env, fm, w, b, seed=seed))
    wh, wl = int(m.group(4)), int(m.group(5))
    return Algorithm(token, lambda env, fm, b, seed: ihiw(env, fm, wh, wl, b, seed=seed))


@dataclass
class CoverageRow:
    instance: str
    results: dict = field(default_factory=dict)  # algo -> (solved, expanded, generated, time_ms)
    error: str = ""


@dataclass
class CoverageReport:
    algorithms: list
    budget: int
    rows: list = field(default_factory=list)
    timing: bool = True

    def aggregates(self) -> dict:
        """Coverage in percent; node and time means over solved instances only."""
        out = {}
        for a in self.algorithms:
            done = [r.results[a] for r in self.rows if a in r.results]
            solved = [x for x in done if x[0]]
            entry = {
                "instances": len(done),
                "solved": len(solved),
                "coverage": None if not done else round(100.0 * len(solved) / len(done), 1),
                "mean_nodes": None if not solved else round(sum(x[2] for x in solved) / len(solved), 1),
            }
            if self.timing:
                entry["mean_time_ms"] = None if not solved else round(sum(x[3] for x in solved) / len(solved), 3)
            out[a] = entry
        return out

    def columns(self) -> list[str]:
        cols = ["instance"]
        for a in self.algorithms:
            cols += [f"{a}_solved", f"{a}_expanded", f"{a}_nodes"]
            if self.timing:
                cols.append(f"{a}_time_ms")
        return cols + ["error"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        for r in self.rows:
            line = [r.instance]
            for a in self.algorithms:
                if a in r.results:
                    solved, expanded, generated, ms = r.results[a]
                    line += [int(solved), expanded, generated] + ([f"{ms:.3f}"] if self.timing else [])
                else:
                    line += [""] * (4 if self.timing else 3)
            w.writerow(line + [r.error])
        return buf.getvalue()

    def to_json(self) -> str:
        rows = []
        for r in self.rows:
            entry = {"instance": r.instance}
            if r.error:
                entry["error"] = r.error
            for a, (solved, expanded, generated, ms) in r.results.items():
                res = {"solved": solved, "expanded": expanded, "nodes": generated}
                if self.timing:
                    res["time_ms"] = round(ms, 3)
                entry[a] = res
            rows.append(entry)
        doc = {"budget": self.budget, "algorithms": self.algorithms, "rows": rows, "aggregates": self.aggregates()}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def summary_lines(self) -> list[str]:
        lines = []
        for a, agg in self.aggregates().items():
            cov = "n/a" if agg["coverage"] is None else f"{agg['coverage']:.1f}%"
            nodes = "n/a" if agg["mean_nodes"] is None else f"{agg['mean_nodes']:.1f}"
            lines.append(f"{a:>12}  coverage {cov:>7}  ({agg['solved']}/{agg['instances']})  mean nodes {nodes}")
        return lines


def task_files(path: str | Path) -> list[Path]:
    p = Path(path)
    if p.is_file():
        return [p]
    return sorted(p.glob("*.task"))


def bundled_tasks_dir() -> Path:
    return Path(__file__).parent / "data" / "tasks"


def run_classical_suite(
    files: list,
    algorithms: list[Algorithm],
    budget: int = 10_000,
    seed: int = 0,
    timing: bool = True,
) -> CoverageReport:
    """Split every task into single-goal instances and run each algorithm on
    each instance with the node budget. Tasks that fail to parse become error
    rows."""
    report = CoverageReport([a.name for a in algorithms], budget, timing=timing)
    for path in files:
        path = Path(path)
        try:
            task = load_task(path)
        except (TaskError, OSError, UnicodeDecodeError) as exc:
            log.warning("skipping %s: %s", path.name, exc)
            report.rows.append(CoverageRow(path.stem, error=str(exc)))
            continue
        for inst in split_single_goal(task):
            row = CoverageRow(inst.name)
            env, fm = strips_env(inst), atom_feature_map(inst)
            for algo in algorithms:
                t0 = time.perf_counter()
                res = algo.run(env, fm, SearchBudget(max_generated_nodes=budget), seed)
                ms = (time.perf_counter() - t0) * 1000.0
                row.results[algo.name] = (bool(res.solved), res.expanded_count, res.generated_count, ms)
            report.rows.append(row)
    return report


# ---------------------------------------------------------------- pixel runs


def parse_tiles(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
    if m is None:
        raise argparse.ArgumentTypeError(f"tiles must look like 2x2, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def parse_wh(text: str) -> int | None:
    if str(text).lower() == "n":
        return None
    return int(text)


def run_pixel_experiment(args, out) -> list:
    layout = load_map(args.map)
    env = GridworldEnv(layout, max_steps=args.max_episode_steps)
    cfg = AgentConfig(
        algo=args.algo,
        tiles=args.tiles,
        hl_quant=args.quant,
        ll_quant=args.ll_quant,
        w_h=args.w_h,
        gamma=args.gamma,
        tau_rewards=args.tau_rewards,
        tau_counts=args.tau_counts,
        tau_high=args.tau_high,
        budget_per_step=args.budget_per_step,
        memory_cap=args.memory_cap,
        lr=args.lr,
        l2=args.l2,
    )
    agent = gridworld_agent(env, cfg, seed=args.seed)
    stop = last_mean_at_least(args.window, args.stop_mean) if args.stop_mean is not None else None
    history = []
    for m in agent.train(args.steps, stop=stop, learn=not args.no_learning):
        history.append(m)
        out.write(m.to_json() + "\n")
        out.flush()
    return history


# ---------------------------------------------------------------- argument parsing


def _env_seed() -> int:
    raw = os.environ.get("PLAN_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"PLAN_SEED must be an integer, got {raw!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plan", description="Width-based planning experiments.")
    parser.add_argument("--config", help="INI file overriding flags ([DEFAULT] and a section per subcommand)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    c = sub.add_parser("classical", help="coverage suite over grounded STRIPS tasks")
    c.add_argument("--tasks", default=str(bundled_tasks_dir()), help="directory of .task files or one file")
    c.add_argument("--budget", type=int, default=10_000, help="generated-node budget per instance")
    c.add_argument("--algos", default="iw1,iw2,ihiw11")
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--out", help="CSV report path (JSON written next to it)")
    c.add_argument("--no-timing", action="store_true", help="omit wall-clock columns for byte-stable reports")

    p = sub.add_parser("pixel", help="gridworld replanning and learning run")
    p.add_argument("--map", default="small", help="map file or bundled name (small, large)")
    p.add_argument("--algo", default="pi_hiw", choices=["pi_iw", "pi_iw_plus", "pi_hiw"])
    p.add_argument("--tiles", type=parse_tiles, default=(2, 2))
    p.add_argument("--quant", type=int, default=256, help="levels per high-level tile")
    p.add_argument("--ll-quant", type=int, default=8, help="levels per low-level cell feature")
    p.add_argument("--w-h", type=parse_wh, default=1, help="high-level width, or n for all features")
    p.add_argument("--steps", type=int, default=200_000, help="environment step budget")
    p.add_argument("--max-episode-steps", type=int, default=200)
    p.add_argument("--budget-per-step", type=int, default=100)
    p.add_argument("--memory-cap", type=int, default=500)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--tau-rewards", type=float, default=1e-4)
    p.add_argument("--tau-counts", type=float, default=1.0)
    p.add_argument("--tau-high", type=float, default=0.005)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--stop-mean", type=float, default=None, help="stop once the windowed mean return reaches this")
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--no-learning", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--metrics", help="JSON-lines output (default stdout)")

    w = sub.add_parser("widthmath", help="N(n, d, w) and related bounds")
    w.add_argument("--n", type=int, required=True)
    w.add_argument("--d", type=int, required=True)
    w.add_argument("--w", type=int, required=True)
    w.add_argument("--b", type=int, default=1, help="branching factor for the visited-states bound")
    return parser


def apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace, path: str) -> None:
    """Override parsed flags with values from an INI file."""
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise SystemExit(f"cannot read config file {path}")
    section = cp[args.command] if cp.has_section(args.command) else cp.defaults()
    own = set(cp.options(args.command)) - set(cp.defaults()) if cp.has_section(args.command) else set()
    sub = next(a for a in parser._subparsers._group_actions if a.dest == "command").choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    for key, raw in section.items():
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None:
            # shared [DEFAULT] keys may belong to another subcommand
            if key not in own and key in cp.defaults():
                continue
            raise SystemExit(f"{path}: unknown option {key!r} for {args.command}")
        if isinstance(action, argparse._StoreTrueAction):
            value = cp.BOOLEAN_STATES.get(raw.lower())
            if value is None:
                raise SystemExit(f"{path}: {key} expects a boolean")
        elif action.type is not None:
            try:
                value = action.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise SystemExit(f"{path}: bad value for {key}: {exc}")
        else:
            value = raw
        if action.choices is not None and value not in action.choices:
            raise SystemExit(f"{path}: {key} must be one of {sorted(action.choices)}")
        setattr(args, dest, value)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        apply_config(parser, args, args.config)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "seed", 0) is None:
        args.seed = _env_seed()

    if args.command == "widthmath":
        try:
            p = WidthParams(args.n, args.d, args.w, args.b)
        except WidthParamError as exc:
            parser.error(str(exc))
        print(json.dumps(summary(p), indent=2, sort_keys=True))
        return 0

    if args.command == "classical":
        try:
            algos = [parse_algorithm(t) for t in args.algos.split(",") if t.strip()]
        except ValueError as exc:
            parser.error(str(exc))
        files = task_files(args.tasks)
        report = run_classical_suite(files, algos, args.budget, args.seed, timing=not args.no_timing)
        if args.out:
            out = Path(args.out)
            out.write_text(report.to_csv(), encoding="utf-8")
            out.with_suffix(".json").write_text(report.to_json(), encoding="utf-8")
        else:
            sys.stdout.write(report.to_csv())
        for line in report.summary_lines():
            print(line, file=sys.stderr if not args.out else sys.stdout)
        return 0

    if args.command == "pixel":
        if args.metrics:
            with open(args.metrics, "w", encoding="utf-8") as fh:
                history = run_pixel_experiment(args, fh)
        else:
            history = run_pixel_experiment(args, sys.stdout)
        if history:
            tail = history[-args.window:]
            mean = sum(m.episode_return for m in tail) / len(tail)
            log.info("%d episodes, %d steps, mean return over last %d: %.3f", len(history), history[-1].steps, len(tail), mean)
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
