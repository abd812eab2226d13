"""Command-line front door: scene generation, runs, replays, summaries.

Subcommands
    gen-scene   write a ground-truth scene (and the config that made it)
    run         simulate, track, optimize, and score one sequence
    replay      re-run the pipeline from a recorded detection dump
    report      aggregate several run reports into one CSV

Every option can also be driven from a flat key=value config file via
``--config``; explicit flags and ``--set key=value`` pairs override it.
"""

import argparse
import os
import sys

from .config import _parse_value, dump_config_text, load_config_file
from .detector import COV_MODES, read_detection_dump
from .errors import InfeasibleScene
from .harness import (
    GroundTruthScene,
    ReplayDetections,
    RunConfig,
    aggregate_reports,
    generate_scene,
    run_pipeline,
    write_aggregate_csv,
)


def _add_common_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE",
                   help="flat key=value run configuration file")
    p.add_argument("--seed", type=int, help="master random seed")
    p.add_argument("--no-prior", action="store_true",
                   help="disable prior-conditioned re-detection")
    p.add_argument("--cov-mode", choices=sorted(COV_MODES),
                   help="reported-covariance mode for the detector")
    p.add_argument("--single-view", action="store_true",
                   help="independent per-frame PnP instead of SLAM")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--set", metavar="KEY=VALUE", action="append",
                   default=[], dest="overrides",
                   help="override any run-config field (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kpslam",
        description="object-level SLAM simulation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene",
                       help="generate and save a ground-truth scene")
    _add_common_options(p)

    p = sub.add_parser("run", help="simulate and evaluate one sequence")
    _add_common_options(p)
    p.add_argument("--scene", metavar="FILE",
                   help="reuse a saved scene.json instead of generating")

    p = sub.add_parser("replay",
                       help="re-run the pipeline from a recorded run directory")
    p.add_argument("run_dir", help="directory produced by `kpslam run`")
    _add_common_options(p)

    p = sub.add_parser("report", help="aggregate run reports into a CSV")
    p.add_argument("reports", nargs="+", metavar="report.json")
    p.add_argument("--out", metavar="FILE",
                   help="CSV path (default: print to stdout)")
    return parser


def _config_from_args(args, base: dict | None = None) -> RunConfig:
    values = dict(base or {})
    if args.config:
        values.update(load_config_file(args.config))
    for pair in args.overrides:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        values[key.strip()] = _parse_value(raw.strip())
    if args.seed is not None:
        values["seed"] = args.seed
    if args.no_prior:
        values["prior_enabled"] = False
    if args.cov_mode:
        values["covariance_mode"] = args.cov_mode
    if args.single_view:
        values["single_view_only"] = True
    if args.out:
        values["out_dir"] = args.out
    return RunConfig.from_dict(values)


def _cmd_gen_scene(args) -> int:
    cfg = _config_from_args(args)
    gt = generate_scene(cfg)
    out_dir = cfg.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    scene_path = os.path.join(out_dir, "scene.json")
    gt.save(scene_path)
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(dump_config_text(cfg.to_dict()))
    n_vis = sum(gt.is_visible(f, o) for f in gt.frames() for o in gt.models)
    print(f"wrote {scene_path}: {len(gt.models)} objects, "
          f"{len(gt.cam_poses)} frames, {n_vis} visible pairs")
    return 0


def _print_run_summary(result) -> None:
    counts = result.report["counts"]
    mode = "single-view" if result.config.single_view_only else "slam"
    print(f"{mode} seed={result.config.seed} "
          f"frames={counts['accepted']}/{counts['frames']} "
          f"mean ADD(-S) AUC={result.mean_auc:.2f}")
    if result.paths:
        print(f"outputs in {os.path.dirname(result.paths['report'])}")


def _cmd_run(args) -> int:
    cfg = _config_from_args(args)
    gt = GroundTruthScene.load(args.scene) if args.scene else None
    result = run_pipeline(cfg, gt=gt)
    _print_run_summary(result)
    return 0


def _cmd_replay(args) -> int:
    base = load_config_file(os.path.join(args.run_dir, "config.txt"))
    base["out_dir"] = None
    cfg = _config_from_args(args, base=base)
    gt = GroundTruthScene.load(os.path.join(args.run_dir, "scene.json"))
    records = read_detection_dump(os.path.join(args.run_dir,
                                               "detections.jsonl"))
    result = run_pipeline(cfg, gt=gt, source=ReplayDetections(records))
    _print_run_summary(result)
    return 0


def _cmd_report(args) -> int:
    rows = aggregate_reports(args.reports)
    if args.out:
        write_aggregate_csv(args.out, rows)
        print(f"wrote {args.out} ({len(rows)} runs)")
    else:
        write_aggregate_csv(sys.stdout, rows)
    return 0


_COMMANDS = {
    "gen-scene": _cmd_gen_scene,
    "run": _cmd_run,
    "replay": _cmd_replay,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, InfeasibleScene) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
