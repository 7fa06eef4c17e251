"""Command-line entry point: ``crowdpose3d {run,synth,eval,match,bench}``.

Every flag overrides the matching key of the ``--config`` YAML file. The log
level comes from ``CROWDPOSE3D_LOG`` when set, otherwise from the config.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, CrowdPoseError, InputParseError, NoMatches
from .homography import GroundHomography
from .io import export_scene, load_poses, parse_correspondence
from .lap import solve_lap
from .matching import PersonTrackSet, collect_foot_pairs, match_pair, match_views
from .metrics import EvalReport, matching_precision, mpjpe, pcp
from .pipeline import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_PARSE,
    PipelineConfig,
    process,
    run_pipeline,
    write_reports,
)
from .reconstruct import reconstruct_scene
from .synth import SceneSpec, generate

EXIT_USAGE = 64
COMMANDS = ("run", "synth", "eval", "match", "bench")

log = logging.getLogger("crowdpose3d")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--calib", type=Path, help="camera calibration JSON")
    p.add_argument("--detections", type=Path, help="2D detections JSON")
    p.add_argument("--homographies", type=Path, help="homography cache JSON (read if present, else written)")
    p.add_argument("--ground", type=Path, help="ground-plane correspondences JSON")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--dump-matching", type=Path, help="directory for per-frame matching JSON")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--threads", type=int, help="worker threads for frames")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crowdpose3d", description="Multi-view 3D pose estimation for crowds.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)

    p = sub.add_parser("run", help="full pipeline over a detections file")
    _common(p)
    p.add_argument("--ground-truth", type=Path, help="directory with gt_poses.json for evaluation")

    p = sub.add_parser("synth", help="generate a synthetic scene, run it and evaluate")
    _common(p)
    p.add_argument("--persons", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--noise", type=float, help="pixel noise standard deviation")
    p.add_argument("--occlusion", type=float, help="joint dropout rate")
    p.add_argument("--swap", type=float, help="joint swap rate")
    p.add_argument("--spacing", type=float, help="minimum person spacing in meters")
    p.add_argument("--export-only", action="store_true", help="write the scene files and stop")

    p = sub.add_parser("eval", help="metrics for predicted against ground-truth pose files")
    p.add_argument("--pred", type=Path, required=True, help="pose JSON file or directory")
    p.add_argument("--gt", type=Path, required=True, help="ground-truth pose JSON file or directory")
    p.add_argument("--tracks", type=Path, help="directory of matching_*.json for correspondence precision")
    p.add_argument("--gt-correspondence", type=Path, help="ground-truth correspondence JSON")
    p.add_argument("--out", type=Path, help="output directory for eval.json / eval.csv")

    p = sub.add_parser("match", help="matching stage only; writes person tracks")
    _common(p)

    p = sub.add_parser("bench", help="timing sweep of the assignment and reconstruction stages")
    p.add_argument("--n", default="8,16,32,64", help="comma-separated problem sizes")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="CSV path (default stdout)")
    return parser


def _setup_logging(level: str | None) -> None:
    name = os.environ.get("CROWDPOSE3D_LOG") or level or "WARNING"
    value = logging.getLevelName(name.upper())
    logging.basicConfig(
        level=value if isinstance(value, int) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config) if getattr(args, "config", None) else PipelineConfig()
    overrides = {
        "calibration": getattr(args, "calib", None),
        "detections": getattr(args, "detections", None),
        "homographies": getattr(args, "homographies", None),
        "ground_correspondences": getattr(args, "ground", None),
        "output": getattr(args, "out", None),
        "dump_matching": getattr(args, "dump_matching", None),
        "threads": getattr(args, "threads", None),
        "ground_truth": getattr(args, "ground_truth", None),
    }
    return dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def cmd_run(args) -> int:
    return run_pipeline(_config(args))


def cmd_synth(args) -> int:
    cfg = _config(args)
    scene = {
        "n_persons": args.persons, "n_views": args.views, "noise_px": args.noise, "occlusion_rate": args.occlusion,
        "swap_rate": args.swap, "min_spacing": args.spacing, "seed": args.seed,
    }
    try:
        spec = dataclasses.replace(cfg.scene, **{k: v for k, v in scene.items() if v is not None})
    except ValueError as e:
        raise ConfigError(str(e)) from e
    truth = generate(spec)
    out = Path(cfg.output)
    paths = export_scene(truth, out / "scene")
    run_cfg = dataclasses.replace(
        cfg,
        calibration=paths["calibration"],
        detections=paths["detections"],
        homographies=paths["homographies"],
        ground_correspondences=None,
        ground_truth=out / "scene",
        scene=spec,
    )
    # a config next to the scene files, with paths relative to it, so the
    # scene can be re-run with `crowdpose3d run --config`
    mapping = run_cfg.to_mapping()
    mapping.update(
        calibration="calib.json", detections="detections.json", homographies="homographies.json",
        ground_correspondences=None, ground_truth=".", output="run", dump_matching=None,
    )
    (out / "scene" / "config.yaml").write_text(yaml.safe_dump(mapping, sort_keys=False))
    if args.export_only:
        return EXIT_OK
    code = run_pipeline(run_cfg)
    report = out / "eval.json"
    if report.is_file():
        print(report.read_text())
    return code


def cmd_eval(args) -> int:
    pred = dict(load_poses(args.pred))
    gt = dict(load_poses(args.gt))
    corr = parse_correspondence(json.loads(args.gt_correspondence.read_text())) if args.gt_correspondence else {}
    reports = []
    for frame in sorted(gt):
        r = EvalReport()
        try:
            r.mpjpe_mm = mpjpe(pred.get(frame, []), gt[frame])
            r.pcp = pcp(pred.get(frame, []), gt[frame])
        except NoMatches as e:
            log.warning("frame %d: %s", frame, e)
        if args.tracks is not None and frame in corr:
            doc = json.loads((args.tracks / f"matching_{frame:06d}.json").read_text())
            r.matching_precision = matching_precision(PersonTrackSet.from_records(doc["persons"]), corr[frame])
        reports.append((frame, r))
    if args.out is not None:
        write_reports(args.out, reports)
    print(json.dumps({"frames": [dict(frame=f, **r.to_dict()) for f, r in reports]}, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_match(args) -> int:
    cfg = _config(args)
    cfg = dataclasses.replace(cfg, dump_matching=cfg.dump_matching or cfg.output)
    process(cfg, reconstruct=False)
    return EXIT_OK


def bench_rows(sizes, repeats: int = 5, seed: int = 0) -> list[dict]:
    """Best-of-`repeats` seconds per size for one assignment solve, one
    view-pair match and one scene reconstruction of N persons."""
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        costs = [rng.random((n, n)) for _ in range(repeats)]
        lap = min(_timed(lambda: solve_lap(C)) for C in costs)
        area = float(np.sqrt(n) * 1.2)
        truth = generate(SceneSpec(n_persons=n, n_views=2, noise_px=1.0, seed=seed, area=(area, area),
                                   camera_radius=max(10.0, 2 * area)))
        feet = {v: collect_foot_pairs(truth.detections[v], truth.to_ground[v])[0] for v in truth.detections}
        same = GroundHomography.identity()
        pair = min(_timed(lambda: match_pair(feet[0], feet[1], same)) for _ in range(repeats))
        tracks, _ = match_views(truth.detections, truth.to_ground)
        recon = min(
            _timed(lambda: reconstruct_scene(tracks, truth.detections, truth.camera_map, truth.schema))
            for _ in range(max(1, repeats // 2))
        )
        rows.append({"n": n, "lap_s": lap, "match_pair_s": pair, "reconstruct_s": recon, "persons_visible": len(feet[0])})
    return rows


def _timed(fn) -> float:
    t = time.perf_counter()
    fn()
    return time.perf_counter() - t


def cmd_bench(args) -> int:
    try:
        sizes = [int(s) for s in args.n.split(",") if s.strip()]
    except ValueError as e:
        raise UsageError(f"bad --n: {e}") from e
    rows = bench_rows(sizes, args.repeats, args.seed)
    f = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else ["n"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if args.out:
            f.close()
    return EXIT_OK


HANDLERS = {"run": cmd_run, "synth": cmd_synth, "eval": cmd_eval, "match": cmd_match, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("crowdpose3d: error: a subcommand is required")
    except UsageError as e:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(e, file=sys.stderr)
        return EXIT_USAGE
    level = None
    if getattr(args, "config", None) and Path(args.config).is_file():
        try:
            level = (yaml.safe_load(Path(args.config).read_text()) or {}).get("log_level")
        except (yaml.YAMLError, AttributeError):
            pass
    _setup_logging(level)
    try:
        return HANDLERS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputParseError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except CrowdPoseError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
