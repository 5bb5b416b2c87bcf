"""Command-line entry points: run, serve, plot, bench.

``run`` plays a scenario file (or a canonical scenario name) to completion
and writes metrics CSVs; its exit code reflects the scenario outcome so
batch drivers can rely on it.  ``serve`` exposes the same loop live over a
WebSocket.  ``plot`` turns a metrics CSV into an SVG.  ``bench`` reports
per-frame latency percentiles of the pipeline stages.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .harness import CAMERA_PERIOD, HarnessError, SimLoop, run_scenario
from .scenario import ScenarioError, load_scenario


def _cmd_run(args) -> int:
    scenario = load_scenario(args.scenario)
    result = run_scenario(scenario, out_dir=args.out, seed=args.seed)
    summary = dict(result.summary)
    stage = summary.pop("stage_seconds", {})
    print(f"scenario {result.name!r} ({result.mode}): {result.outcome} "
          f"after {result.ticks} ticks")
    for key in sorted(summary):
        print(f"  {key}: {summary[key]}")
    frames = max(result.summary.get("frames", 0), 1)
    for key in sorted(stage):
        print(f"  {key}_ms_per_frame: {1e3 * stage[key] / frames:.2f}")
    if args.out:
        with open(os.path.join(args.out, "summary.json"), "w") as f:
            json.dump({"name": result.name, "mode": result.mode,
                       "success": result.success, "outcome": result.outcome,
                       "ticks": result.ticks, "summary": result.summary},
                      f, indent=2, sort_keys=True)
        if not args.headless:
            from .plotting import plot_csv
            for csv_path in (result.tracking_csv, result.trajectory_csv):
                if csv_path:
                    plot_csv(csv_path, os.path.splitext(csv_path)[0] + ".svg")
    return 0 if result.success else 1


def _cmd_serve(args) -> int:
    from .server import serve
    scenario = load_scenario(args.scenario)
    serve(scenario, port=args.port, seed=args.seed, host=args.host)
    return 0


def _cmd_plot(args) -> int:
    from .plotting import plot_csv
    out = args.out or os.path.splitext(args.csv)[0] + ".svg"
    plot_csv(args.csv, out)
    print(out)
    return 0


def _cmd_bench(args) -> int:
    scenario = load_scenario(args.scenario)
    loop = SimLoop(scenario, seed=args.seed)
    loop.detect_and_init_tracker()
    ticks = min(args.ticks, scenario.duration)
    samples: dict[str, list[float]] = {k: [] for k in loop.stage_times}
    steps = []
    for _ in range(ticks):
        before = dict(loop.stage_times)
        t0 = time.perf_counter()
        loop.step()
        steps.append(time.perf_counter() - t0)
        if loop.tick % CAMERA_PERIOD == 0:
            for key, value in loop.stage_times.items():
                samples[key].append(value - before[key])
        if loop.done:
            break

    def report(name: str, xs: list[float]) -> None:
        a = 1e3 * np.asarray(xs)
        print(f"  {name:10s} mean {a.mean():7.2f}  p50 {np.percentile(a, 50):7.2f}"
              f"  p95 {np.percentile(a, 95):7.2f}  max {a.max():7.2f}")

    print(f"latency over {len(samples['tracker'])} frames "
          f"({loop.tick} ticks), ms:")
    for key in ("render", "tracker", "observer", "planner"):
        report(key, samples[key])
    report("tick", steps)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reactive-grasp",
        description="simulated reactive grasping of tracked unknown objects")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="play a scenario and write metrics")
    p.add_argument("scenario", help="scenario file or canonical name")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="directory for CSVs and plots")
    p.add_argument("--headless", action="store_true", help="skip SVG plots")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("serve", help="live WebSocket session")
    p.add_argument("scenario", help="scenario file or canonical name")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("plot", help="render a metrics CSV to SVG")
    p.add_argument("csv")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_plot)

    p = sub.add_parser("bench", help="per-frame latency percentiles")
    p.add_argument("--scenario", default="occlusion")
    p.add_argument("--ticks", type=int, default=600)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, HarnessError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
