"""JSON interchange: detections in, poses out, and synthetic scene export.

Detections file::

    {"frames": [{"frame": 0, "views": [
        {"view": 0, "persons": [{"bbox": [x, y, w, h], "joints": [[x, y, c] | null, ...]}]}
    ]}]}

A bare list of view records, or a single view record, is read as frame 0.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Mapping, Sequence

from .detections import Detection2D, SigmaModel
from .errors import InputParseError
from .geometry import calibration_to_records
from .homography import save_homographies
from .matching import PersonTrackSet
from .reconstruct import Pose3D

Frame = tuple[int, dict[int, list[Detection2D]]]


def _view_record(rec: dict, n_joints: int | None, model: SigmaModel) -> tuple[int, list[Detection2D]]:
    view = int(rec["view"])
    dets = []
    for i, p in enumerate(rec.get("persons", [])):
        joints = p["joints"]
        if n_joints is not None and len(joints) != n_joints:
            raise InputParseError(f"view {view} person {i}: expected {n_joints} joints, got {len(joints)}")
        for kp in joints:
            if kp is not None and (len(kp) < 2 or not all(isinstance(c, (int, float)) for c in kp)):
                raise InputParseError(f"view {view} person {i}: bad keypoint {kp!r}")
        dets.append(Detection2D.from_keypoints(view, i, joints, p.get("bbox"), model))
    return view, dets


def parse_detections(doc, n_joints: int | None = None, model: SigmaModel = SigmaModel()) -> list[Frame]:
    """Frames of per-view detections, in file order.

    Raises:
        InputParseError: the document does not follow the detections layout.
    """
    try:
        if isinstance(doc, dict) and "frames" in doc:
            raw = [(int(f.get("frame", k)), f.get("views", [])) for k, f in enumerate(doc["frames"])]
        elif isinstance(doc, dict) and "view" in doc:
            raw = [(0, [doc])]
        elif isinstance(doc, list):
            raw = [(0, doc)]
        else:
            raise InputParseError("expected a frames object, a list of view records or one view record")
        frames = []
        for frame, views in raw:
            per_view: dict[int, list[Detection2D]] = {}
            for rec in views:
                view, dets = _view_record(rec, n_joints, model)
                if view in per_view:
                    raise InputParseError(f"frame {frame}: view {view} listed twice")
                per_view[view] = dets
            frames.append((frame, per_view))
        return frames
    except InputParseError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise InputParseError(f"malformed detections: {e}") from e


def load_detections(path: str | Path, n_joints: int | None = None, model: SigmaModel = SigmaModel()) -> list[Frame]:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise InputParseError(f"{path}: {e}") from e
    return parse_detections(doc, n_joints, model)


def detections_to_json(frames: Sequence[Frame]) -> dict:
    return {
        "frames": [
            {
                "frame": int(frame),
                "views": [
                    {"view": int(v), "persons": [{"bbox": list(d.bbox), "joints": d.keypoints()} for d in dets]}
                    for v, dets in sorted(per_view.items())
                ],
            }
            for frame, per_view in frames
        ]
    }


def _finite(x: float) -> float | None:
    return float(x) if math.isfinite(x) else None


def poses_to_json(frame: int, poses: Sequence[Pose3D]) -> str:
    """Canonical pose document: fixed key order, shortest round-trip floats."""
    persons = []
    for p in poses:
        rec = p.to_record()
        rec["nll"] = _finite(rec["nll"])
        rec["reproj_rms"] = _finite(rec["reproj_rms"])
        persons.append(rec)
    return json.dumps({"frame": int(frame), "persons": persons}, separators=(",", ":"), allow_nan=False) + "\n"


def parse_poses(doc) -> list[tuple[int, list[Pose3D]]]:
    """Read a pose document, or a ``{"frames": [...]}`` bundle of them."""
    try:
        docs = doc["frames"] if isinstance(doc, dict) and "frames" in doc else [doc]
        out = []
        for k, d in enumerate(docs):
            recs = [dict(r, nll=r.get("nll") or 0.0, reproj_rms=r.get("reproj_rms") or 0.0) for r in d["persons"]]
            out.append((int(d.get("frame", k)), [Pose3D.from_record(r) for r in recs]))
        return out
    except (KeyError, TypeError, ValueError) as e:
        raise InputParseError(f"malformed poses: {e}") from e


def load_poses(path: str | Path) -> list[tuple[int, list[Pose3D]]]:
    """Poses from one file, or from every ``*.json`` in a directory (sorted)."""
    path = Path(path)
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    out = []
    for f in files:
        try:
            out.extend(parse_poses(json.loads(f.read_text())))
        except json.JSONDecodeError as e:
            raise InputParseError(f"{f}: {e}") from e
    return sorted(out, key=lambda x: x[0])


def correspondence_to_json(frames: Sequence[tuple[int, Mapping[tuple[int, int], int]]]) -> dict:
    return {
        "frames": [
            {"frame": int(f), "links": [{"view": v, "det": d, "person": p} for (v, d), p in sorted(c.items())]}
            for f, c in frames
        ]
    }


def parse_correspondence(doc) -> dict[int, dict[tuple[int, int], int]]:
    try:
        return {
            int(f["frame"]): {(int(r["view"]), int(r["det"])): int(r["person"]) for r in f["links"]}
            for f in doc["frames"]
        }
    except (KeyError, TypeError, ValueError) as e:
        raise InputParseError(f"malformed correspondence file: {e}") from e


def tracks_to_json(frame: int, tracks: PersonTrackSet, pairwise=()) -> str:
    doc = {
        "frame": int(frame),
        "persons": tracks.to_records(),
        "pairwise": [
            {"view_a": a.view_a, "view_b": a.view_b, "pairs": [[l, m, c] for l, m, c in a.pairs]} for a in pairwise
        ],
    }
    return json.dumps(doc, indent=1) + "\n"


def export_scene(truth, out_dir: str | Path, ground_points: int = 12) -> dict[str, Path]:
    """Write a synthetic scene as the input files a real capture would provide,
    plus its ground truth. Returns the written paths by role."""
    from .synth import ground_correspondences

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "calibration": out / "calib.json",
        "detections": out / "detections.json",
        "ground_correspondences": out / "ground_correspondences.json",
        "homographies": out / "homographies.json",
        "gt_poses": out / "gt_poses.json",
        "gt_correspondence": out / "gt_correspondence.json",
    }
    paths["calibration"].write_text(json.dumps(calibration_to_records(truth.cameras), indent=1))
    paths["detections"].write_text(json.dumps(detections_to_json([(0, truth.detections)]), indent=1))
    paths["ground_correspondences"].write_text(
        json.dumps(ground_correspondences(truth, ground_points, seed=truth.spec.seed), indent=1)
    )
    save_homographies(paths["homographies"], [truth.to_ground[v] for v in sorted(truth.to_ground)])
    paths["gt_poses"].write_text(
        json.dumps({"frames": [json.loads(poses_to_json(0, truth.poses3d))]}, indent=1)
    )
    paths["gt_correspondence"].write_text(json.dumps(correspondence_to_json([(0, truth.correspondence)]), indent=1))
    return paths
