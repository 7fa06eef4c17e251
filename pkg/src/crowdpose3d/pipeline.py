"""End-to-end processing of detection files into 3D poses.

Per frame: rectify every view's heels into the common ground frame, assign
people across the ring of views, merge the assignments into tracks, and
reconstruct each track. Frames are independent and run in a thread pool;
outputs are written in frame order so a run is reproducible byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .detections import Detection2D, SigmaModel
from .errors import ConfigError, CrowdPoseError, InputParseError
from .geometry import CameraView, SkeletonSchema, load_calibration
from .homography import (
    GROUND_FRAME,
    GroundHomography,
    homographies_to_reference,
    image_to_ground_homography,
    load_ground_correspondences,
    load_homographies,
    save_homographies,
)
from .io import load_detections, load_poses, parse_correspondence, poses_to_json, tracks_to_json
from .matching import MatchingConfig, PersonTrackSet, match_views
from .metrics import EvalReport, evaluate_frame, histogram_csv
from .reconstruct import Pose3D, SolverConfig, reconstruct_scene
from .synth import SceneSpec

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_PARSE, EXIT_NO_POSES = 0, 1, 2, 3

PATH_KEYS = (
    "calibration", "detections", "ground_correspondences", "homographies", "schema",
    "output", "dump_matching", "ground_truth",
)


@dataclass
class PipelineConfig:
    """Everything a run needs. Relative paths in a config file resolve
    against the file's directory."""

    calibration: Path | None = None
    detections: Path | None = None
    # homography sources, tried in this order; calibration is the fallback
    homographies: Path | None = None
    ground_correspondences: Path | None = None
    schema: Path | None = None
    output: Path = Path("out")
    dump_matching: Path | None = None
    # directory holding gt_poses.json and optionally gt_correspondence.json
    ground_truth: Path | None = None
    threads: int = 1
    log_level: str = "WARNING"
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    sigma_model: SigmaModel = field(default_factory=SigmaModel)
    scene: SceneSpec = field(default_factory=SceneSpec)

    @classmethod
    def from_mapping(cls, d: Mapping[str, Any], base: Path | None = None) -> "PipelineConfig":
        nested = {"matching": MatchingConfig, "solver": SolverConfig, "sigma_model": SigmaModel, "scene": SceneSpec}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        for k, v in d.items():
            if k in nested:
                if not isinstance(v, Mapping):
                    raise ConfigError(f"{k} must be a mapping")
                allowed = {f.name for f in dataclasses.fields(nested[k])}
                if set(v) - allowed:
                    raise ConfigError(f"unknown {k} keys: {sorted(set(v) - allowed)}")
                v = {a: tuple(b) if isinstance(b, list) else b for a, b in v.items()}
                try:
                    kwargs[k] = nested[k](**v)
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"{k}: {e}") from e
            elif k in PATH_KEYS:
                kwargs[k] = None if v is None else (base / v if base and not Path(v).is_absolute() else Path(v))
            else:
                kwargs[k] = v
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from e
        if not isinstance(doc, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_mapping(doc, base=path.parent)

    def to_mapping(self) -> dict:
        out: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                v = {k: list(x) if isinstance(x, tuple) else x for k, x in dataclasses.asdict(v).items()}
            elif isinstance(v, Path):
                v = str(v)
            out[f.name] = v
        return out

    def validate(self) -> None:
        for key in ("calibration", "detections"):
            p = getattr(self, key)
            if p is None:
                raise ConfigError(f"no {key} file given")
            if not Path(p).is_file():
                raise ConfigError(f"{key} file not found: {p}")
        for key in ("ground_correspondences", "schema"):
            p = getattr(self, key)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{key} file not found: {p}")
        if self.ground_truth is not None and not (Path(self.ground_truth) / "gt_poses.json").is_file():
            raise ConfigError(f"no gt_poses.json in {self.ground_truth}")
        if int(self.threads) < 1:
            raise ConfigError("threads must be at least 1")
        if not isinstance(logging.getLevelName(str(self.log_level).upper()), int):
            raise ConfigError(f"unknown log level {self.log_level!r}")


@dataclass
class FrameResult:
    frame: int
    poses: list[Pose3D]
    tracks: PersonTrackSet
    pairwise: list
    diagnostics: list[dict]
    report: EvalReport | None = None


def resolve_homographies(cfg: PipelineConfig, cameras: list[CameraView]) -> dict[int, GroundHomography]:
    """Per-view homographies into one common frame.

    A homography cache wins, then ground correspondences, then the
    calibration's own ground-plane mapping. The common frame is the metric
    ground plane whenever any source reaches it.
    """
    views = [c.id for c in cameras]
    hs: list[GroundHomography] | None = None
    if cfg.homographies is not None and Path(cfg.homographies).is_file():
        hs = load_homographies(cfg.homographies)
        log.info("homographies from cache %s", cfg.homographies)
    elif cfg.ground_correspondences is not None:
        hs = load_ground_correspondences(cfg.ground_correspondences)
        log.info("homographies estimated from %s", cfg.ground_correspondences)
        if cfg.homographies is not None:
            save_homographies(cfg.homographies, hs)
    if hs is None:
        log.info("homographies from calibration")
        return {c.id: image_to_ground_homography(c) for c in cameras}
    frames = {h.to_view for h in hs} | {h.from_view for h in hs}
    reference = GROUND_FRAME if GROUND_FRAME in frames else min(views)
    if reference != GROUND_FRAME:
        log.warning("no metric ground frame; matching in the pixels of view %d", reference)
    to_ref = homographies_to_reference(hs, views, reference)
    for v in views:
        if v not in to_ref:
            log.warning("view %d is not connected to the reference frame", v)
    return to_ref


def process_frame(
    frame: int,
    detections: Mapping[int, list[Detection2D]],
    cameras: Mapping[int, CameraView],
    to_reference: Mapping[int, GroundHomography],
    schema: SkeletonSchema,
    cfg: PipelineConfig,
    reconstruct: bool = True,
) -> FrameResult:
    """Match and reconstruct one frame. Soft errors empty the frame instead of raising."""
    diags: list[dict] = []
    dets = {}
    for v, ds in detections.items():
        if v not in cameras:
            diags.append({"event": "unknown_view", "view": v})
            continue
        # joints outside the 10%-grown image are treated as undetected
        dets[v] = [d.restricted(d.inside_frame(cameras[v].image_size)) for d in ds]
    try:
        tracks, pairwise = match_views(dets, to_reference, cfg.matching, tuple(schema.heel_indices))
        poses = reconstruct_scene(tracks, dets, cameras, schema, cfg.solver, diags) if reconstruct else []
    except (CrowdPoseError, ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
        log.error("frame %d failed: %s", frame, e)
        diags.append({"event": "frame_failed", "reason": str(e)})
        return FrameResult(frame, [], PersonTrackSet(()), [], diags)
    for d in diags:
        d["frame"] = frame
    return FrameResult(frame, poses, tracks, pairwise, diags)


def _load_ground_truth(cfg: PipelineConfig):
    if cfg.ground_truth is None:
        return None, None
    gt_dir = Path(cfg.ground_truth)
    poses = dict(load_poses(gt_dir / "gt_poses.json"))
    corr_path = gt_dir / "gt_correspondence.json"
    corr = parse_correspondence(json.loads(corr_path.read_text())) if corr_path.is_file() else {}
    return poses, corr


def _json_default(o):
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


def process(cfg: PipelineConfig, reconstruct: bool = True) -> list[FrameResult]:
    """Run every frame and write outputs. Raises ConfigError / InputParseError.

    With ``reconstruct=False`` only the matching stage runs.
    """
    cfg.validate()
    try:
        schema = SkeletonSchema.from_json(cfg.schema) if cfg.schema else SkeletonSchema.default()
        cameras = load_calibration(cfg.calibration)
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise InputParseError(f"calibration: {e}") from e
    except ValueError as e:
        raise InputParseError(f"calibration: {e}") from e
    cam_map = {c.id: c for c in cameras}
    frames = load_detections(cfg.detections, schema.n_joints, cfg.sigma_model)
    try:
        to_ref = resolve_homographies(cfg, cameras)
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise InputParseError(f"homographies: {e}") from e
    gt_poses, gt_corr = _load_ground_truth(cfg)

    def work(item):
        frame, dets = item
        res = process_frame(frame, dets, cam_map, to_ref, schema, cfg, reconstruct)
        if reconstruct and gt_poses is not None and frame in gt_poses:
            res.report = evaluate_frame(
                res.poses, gt_poses[frame], {v: dets.get(v, []) for v in cam_map}, cam_map, schema,
                res.tracks, gt_corr.get(frame) if gt_corr else None,
            )
        return res

    with ThreadPoolExecutor(max_workers=int(cfg.threads)) as pool:
        results = list(pool.map(work, frames))
    _write_outputs(cfg, results, poses=reconstruct)
    return results


def _write_outputs(cfg: PipelineConfig, results: list[FrameResult], poses: bool = True) -> None:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    if poses:
        (out / "poses").mkdir(exist_ok=True)
        for r in results:
            (out / "poses" / f"frame_{r.frame:06d}.json").write_text(poses_to_json(r.frame, r.poses))
    with open(out / "diagnostics.log", "w") as f:
        for r in results:
            for d in r.diagnostics:
                f.write(json.dumps(d, default=_json_default, sort_keys=True) + "\n")
    if cfg.dump_matching is not None:
        dump = Path(cfg.dump_matching)
        dump.mkdir(parents=True, exist_ok=True)
        for r in results:
            (dump / f"matching_{r.frame:06d}.json").write_text(tracks_to_json(r.frame, r.tracks, r.pairwise))
    reports = [(r.frame, r.report) for r in results if r.report is not None]
    if reports:
        write_reports(out, reports)


def write_reports(out: Path, reports: list[tuple[int, EvalReport]]) -> None:
    """eval.json, eval.csv and one reprojection histogram per frame."""
    out.mkdir(parents=True, exist_ok=True)
    doc = {"frames": [dict(frame=f, **r.to_dict()) for f, r in reports]}
    (out / "eval.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=_json_default))
    lines = ["frame,metric,value"]
    for f, r in reports:
        lines += [f"{f},{k},{float(v)!r}" for k, v in r.flat().items()]
    (out / "eval.csv").write_text("\n".join(lines) + "\n")
    for f, r in reports:
        if r.reproj is not None:
            (out / f"reproj_hist_{f:06d}.csv").write_text(histogram_csv(r.reproj))


def run_pipeline(cfg: PipelineConfig) -> int:
    """Process everything and map failures onto the documented exit codes."""
    try:
        results = process(cfg)
    except ConfigError as e:
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InputParseError as e:
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    if not any(r.poses for r in results):
        log.error("no frame produced a pose")
        return EXIT_NO_POSES
    return EXIT_OK
