"""Command line entry point: run, batch, stats and map."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .episode import compute_localization_stats, prior_map, run_batch, run_episode
from .scenario import ScenarioError, load_scenario


def _scenario(args: argparse.Namespace):
    return load_scenario(args.scenario, getattr(args, "override", None) or [])


def cmd_run(args: argparse.Namespace) -> int:
    sc = _scenario(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report, _ = run_episode(sc, args.seed, log_path=out / "log.jsonl")
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    (out / "timing.json").write_text(json.dumps({"wall_clock": round(report.wall_clock, 3)}) + "\n")
    print(f"seed {report.seed}: {report.final_state} after {report.sim_duration:.2f} s")
    return 0 if report.success else 1


def cmd_batch(args: argparse.Namespace) -> int:
    sc = _scenario(args)

    def show(r):
        print(f"seed {r.seed}: {r.final_state}", flush=True)

    summary = run_batch(sc, args.runs, args.base_seed, out_dir=args.out, progress=show)
    print(f"success {summary.success_label} ({summary.rate:.0%})")
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    stats = compute_localization_stats(args.log)
    print(stats.table())
    return 0


def cmd_map(args: argparse.Namespace) -> int:
    sc = _scenario(args)
    grid, _ = prior_map(sc)
    grid.dump(args.out)
    print(f"wrote {args.out}: {grid.dims} voxels at {grid.voxel_size} m")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aerograsp", description="Aerial grasping mission simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one episode")
    r.add_argument("--scenario", required=True)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--override", action="append", metavar="KEY=JSON")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("batch", help="run seeded episodes and summarise")
    b.add_argument("--scenario", required=True)
    b.add_argument("--runs", type=int, required=True)
    b.add_argument("--base-seed", type=int, default=0)
    b.add_argument("--override", action="append", metavar="KEY=JSON")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_batch)

    s = sub.add_parser("stats", help="localization error table of an episode log")
    s.add_argument("--log", required=True)
    s.set_defaults(func=cmd_stats)

    m = sub.add_parser("map", help="survey the static world and write the occupancy grid")
    m.add_argument("--scenario", required=True)
    m.add_argument("--override", action="append", metavar="KEY=JSON")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_map)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
