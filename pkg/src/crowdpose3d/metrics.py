"""Evaluation measures for reconstructed crowds.

3D accuracy (MPJPE, PCP) against ground-truth skeletons, COCO-style keypoint
AP/AR on 2D reprojections, reprojection-error statistics, and the precision of
cross-view correspondences.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .detections import Detection2D
from .errors import MissingConstants, NoGroundTruth, NoMatches
from .geometry import CameraView, SkeletonSchema, project_points
from .lap import solve_lap
from .matching import PersonTrackSet
from .reconstruct import Pose3D

MATCH_GATE = 0.5

JOINT_GROUPS = {
    "Head": ("nose", "left_eye", "right_eye", "left_ear", "right_ear"),
    "Shoulder": ("left_shoulder", "right_shoulder"),
    "Elbow": ("left_elbow", "right_elbow"),
    "Wrist": ("left_wrist", "right_wrist"),
    "Hip": ("left_hip", "right_hip"),
    "Knee": ("left_knee", "right_knee"),
    "Foot": (
        "left_ankle", "right_ankle", "left_big_toe", "left_small_toe", "left_heel",
        "right_big_toe", "right_small_toe", "right_heel",
    ),
}

PCP_PARTS = {
    "Head": (("left_ear", "left_shoulder"), ("right_ear", "right_shoulder")),
    "Torso": (
        ("left_shoulder", "left_hip"), ("right_shoulder", "right_hip"),
        ("left_shoulder", "right_shoulder"), ("left_hip", "right_hip"),
    ),
    "Upper arms": (("left_shoulder", "left_elbow"), ("right_shoulder", "right_elbow")),
    "Lower arms": (("left_elbow", "left_wrist"), ("right_elbow", "right_wrist")),
    "Upper legs": (("left_hip", "left_knee"), ("right_hip", "right_knee")),
    "Lower legs": (("left_knee", "left_ankle"), ("right_knee", "right_ankle")),
}

# MSCOCO per-keypoint constants; the six foot joints reuse the ankle value
COCO_SIGMAS = {
    "nose": 0.026, "left_eye": 0.025, "right_eye": 0.025, "left_ear": 0.035, "right_ear": 0.035,
    "left_shoulder": 0.079, "right_shoulder": 0.079, "left_elbow": 0.072, "right_elbow": 0.072,
    "left_wrist": 0.062, "right_wrist": 0.062, "left_hip": 0.107, "right_hip": 0.107,
    "left_knee": 0.087, "right_knee": 0.087, "left_ankle": 0.089, "right_ankle": 0.089,
    "left_big_toe": 0.089, "left_small_toe": 0.089, "left_heel": 0.089,
    "right_big_toe": 0.089, "right_small_toe": 0.089, "right_heel": 0.089,
}

OKS_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {"all": (0.0, 1e10), "M": (32.0**2, 96.0**2), "L": (96.0**2, 1e10)}
MAX_DETS = 20


# --- person matching ----------------------------------------------------------


def _root(joints: np.ndarray, schema: SkeletonSchema) -> np.ndarray | None:
    hips = joints[[schema.index("left_hip"), schema.index("right_hip")]]
    hips = hips[np.all(np.isfinite(hips), axis=1)]
    return hips.mean(axis=0) if len(hips) else None


def match_persons(
    pred: Sequence[Pose3D], gt: Sequence[Pose3D], schema: SkeletonSchema | None = None, gate: float = MATCH_GATE
) -> list[tuple[int, int]]:
    """(pred index, gt index) pairs, assigned on mid-hip distance within `gate` meters."""
    schema = schema or SkeletonSchema.default()
    pi = [(i, r) for i, p in enumerate(pred) if (r := _root(p.joints, schema)) is not None]
    gi = [(i, r) for i, g in enumerate(gt) if (r := _root(g.joints, schema)) is not None]
    if not pi or not gi:
        return []
    D = np.linalg.norm(np.array([r for _, r in pi])[:, None] - np.array([r for _, r in gi])[None], axis=2)
    # gated pairs cost more than any admissible assignment so the solver avoids them
    C = np.where(D <= gate, D, gate * (len(pi) + len(gi) + 1))
    res = solve_lap(C)
    return sorted((pi[a][0], gi[b][0]) for a, b, _ in res.pairs if D[a, b] <= gate)


def _group_indices(schema: SkeletonSchema, groups) -> dict[str, list]:
    names = set(schema.joint_names)
    return {g: [schema.index(n) if isinstance(n, str) else tuple(schema.index(x) for x in n)
                for n in members if (n in names if isinstance(n, str) else all(x in names for x in n))]
            for g, members in groups.items()}


def mpjpe(
    pred: Sequence[Pose3D], gt: Sequence[Pose3D], schema: SkeletonSchema | None = None, gate: float = MATCH_GATE
) -> dict:
    """Mean per-joint position error in millimeters.

    Returns ``{"groups": {name: mm}, "average": mm, "n_persons": int, "n_joints": int}``.
    The average runs over every matched joint present in both poses; a group
    with no such joint reports NaN.
    """
    schema = schema or SkeletonSchema.default()
    pairs = match_persons(pred, gt, schema, gate)
    errs = np.full((len(pairs), schema.n_joints), np.nan)
    for r, (a, b) in enumerate(pairs):
        errs[r] = np.linalg.norm(pred[a].joints - gt[b].joints, axis=1)
    if not np.any(np.isfinite(errs)):
        raise NoMatches("no matched person shares a present joint with ground truth")
    errs *= 1000.0
    groups = {}
    for g, idx in _group_indices(schema, JOINT_GROUPS).items():
        e = errs[:, idx]
        e = e[np.isfinite(e)]
        groups[g] = float(e.mean()) if e.size else float("nan")
    valid = errs[np.isfinite(errs)]
    return {"groups": groups, "average": float(valid.mean()), "n_persons": len(pairs), "n_joints": int(valid.size)}


def pcp(
    pred: Sequence[Pose3D],
    gt: Sequence[Pose3D],
    threshold_frac: float = 0.5,
    schema: SkeletonSchema | None = None,
    gate: float = MATCH_GATE,
) -> dict:
    """Percentage of correct parts.

    A part counts when both its ground-truth endpoints exist; it is correct when
    both predicted endpoints lie within ``threshold_frac`` times the
    ground-truth part length of their targets. A missing predicted endpoint
    makes the part incorrect.
    """
    schema = schema or SkeletonSchema.default()
    pairs = match_persons(pred, gt, schema, gate)
    if not pairs:
        raise NoMatches("no predicted person matched ground truth")
    parts = _group_indices(schema, PCP_PARTS)
    correct = {g: 0 for g in parts}
    total = {g: 0 for g in parts}
    for a, b in pairs:
        P, G = pred[a].joints, gt[b].joints
        for g, members in parts.items():
            for i, j in members:
                if not (np.all(np.isfinite(G[i])) and np.all(np.isfinite(G[j]))):
                    continue
                total[g] += 1
                limit = threshold_frac * np.linalg.norm(G[i] - G[j])
                ei, ej = np.linalg.norm(P[i] - G[i]), np.linalg.norm(P[j] - G[j])
                # NaN errors compare False, so absent endpoints are incorrect
                if ei <= limit and ej <= limit:
                    correct[g] += 1
    out = {g: 100.0 * correct[g] / total[g] if total[g] else float("nan") for g in parts}
    n = sum(total.values())
    return {"parts": out, "overall": 100.0 * sum(correct.values()) / n if n else float("nan")}


# --- OKS keypoint AP/AR -------------------------------------------------------


def oks_sigmas(schema: SkeletonSchema | None = None, overrides: Mapping[str, float] | None = None) -> np.ndarray:
    """Per-joint OKS constants for `schema`."""
    schema = schema or SkeletonSchema.default()
    table = dict(COCO_SIGMAS, **(overrides or {}))
    missing = [n for n in schema.joint_names if n not in table]
    if missing:
        raise MissingConstants(f"no OKS constant for joints {missing}")
    return np.array([table[n] for n in schema.joint_names])


def oks(pred: np.ndarray, gt: np.ndarray, area: float, sigmas: np.ndarray) -> float:
    """Object keypoint similarity of one prediction against one ground truth.

    Unlabeled (NaN) ground-truth joints are skipped; a missing predicted joint
    scores 0. Returns 0 when the ground truth has no labeled joint.
    """
    labeled = np.all(np.isfinite(gt), axis=1)
    if not labeled.any():
        return 0.0
    d2 = np.sum((pred[labeled] - gt[labeled]) ** 2, axis=1)
    k2 = (2.0 * sigmas[labeled]) ** 2
    e = d2 / (2.0 * k2 * (area + np.spacing(1)))
    with np.errstate(invalid="ignore"):
        s = np.where(np.isfinite(e), np.exp(-e), 0.0)
    return float(s.sum() / labeled.sum())


def _keypoint_area(kp: np.ndarray) -> float:
    kp = kp[np.all(np.isfinite(kp), axis=1)]
    if len(kp) == 0:
        return 0.0
    span = kp.max(axis=0) - kp.min(axis=0)
    return float(span[0] * span[1])


def _evaluate_image(dets, scores, gts, areas, sigmas, area_rng, thresholds):
    """Greedy COCO matching for one image and one area range.

    Returns (det scores, matched flags (T, D), det-ignore flags (T, D), n non-ignored gts).
    """
    lo, hi = area_rng
    g_ignore = np.array([not (lo <= a <= hi) or not np.any(np.all(np.isfinite(g), axis=1))
                         for g, a in zip(gts, areas)], dtype=bool)
    g_order = np.argsort(g_ignore, kind="mergesort")
    gts = [gts[i] for i in g_order]
    areas = [areas[i] for i in g_order]
    g_ignore = g_ignore[g_order]
    d_order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")[:MAX_DETS]
    dets = [dets[i] for i in d_order]
    d_scores = np.asarray(scores, dtype=np.float64)[d_order]
    ious = np.array([[oks(d, g, a, sigmas) for g, a in zip(gts, areas)] for d in dets]).reshape(len(dets), len(gts))
    T, D = len(thresholds), len(dets)
    matched = np.zeros((T, D), dtype=bool)
    d_ignore = np.zeros((T, D), dtype=bool)
    for t, thr in enumerate(thresholds):
        g_taken = np.zeros(len(gts), dtype=bool)
        for d in range(D):
            best, m = min(thr, 1 - 1e-10), -1
            for g in range(len(gts)):
                if g_taken[g]:
                    continue
                # once a real match exists, ignored gts (sorted last) cannot replace it
                if m > -1 and not g_ignore[m] and g_ignore[g]:
                    break
                if ious[d, g] < best:
                    continue
                best, m = ious[d, g], g
            if m == -1:
                continue
            g_taken[m] = True
            matched[t, d] = True
            d_ignore[t, d] = g_ignore[m]
    d_areas = np.array([_keypoint_area(d) for d in dets])
    outside = (d_areas < lo) | (d_areas > hi)
    d_ignore |= ~matched & outside[None, :]
    return d_scores, matched, d_ignore, int((~g_ignore).sum())


def _accumulate(per_image, thresholds):
    """101-point interpolated AP and max recall per threshold (-1 when undefined)."""
    n_gt = sum(r[3] for r in per_image)
    T = len(thresholds)
    if n_gt == 0:
        return np.full(T, -1.0), np.full(T, -1.0)
    scores = np.concatenate([r[0] for r in per_image]) if per_image else np.zeros(0)
    order = np.argsort(-scores, kind="mergesort")
    matched = np.concatenate([r[1] for r in per_image], axis=1)[:, order] if per_image else np.zeros((T, 0), bool)
    ignore = np.concatenate([r[2] for r in per_image], axis=1)[:, order] if per_image else np.zeros((T, 0), bool)
    ap, ar = np.zeros(T), np.zeros(T)
    for t in range(T):
        tp = np.cumsum(matched[t] & ~ignore[t]).astype(np.float64)
        fp = np.cumsum(~matched[t] & ~ignore[t]).astype(np.float64)
        rc = tp / n_gt
        pr = tp / np.maximum(tp + fp, np.spacing(1))
        ar[t] = rc[-1] if len(rc) else 0.0
        # precision envelope, then sample at the recall points
        for i in range(len(pr) - 1, 0, -1):
            pr[i - 1] = max(pr[i - 1], pr[i])
        idx = np.searchsorted(rc, RECALL_POINTS, side="left")
        q = np.array([pr[i] if i < len(pr) else 0.0 for i in idx])
        ap[t] = q.mean()
    return ap, ar


def oks_ap_ar(
    pred: Sequence[Sequence[np.ndarray]],
    gt: Sequence[Sequence[np.ndarray]],
    bboxes: Sequence[Sequence[Sequence[float]]],
    sigmas: np.ndarray | None = None,
    scores: Sequence[Sequence[float]] | None = None,
    thresholds=OKS_THRESHOLDS,
) -> dict:
    """COCO-style keypoint AP/AR, in percent.

    Args:
        pred: per image, the predicted (M, 2) keypoint arrays (NaN = missing).
        gt: per image, the ground-truth (M, 2) arrays (NaN = unlabeled).
        bboxes: per image, an (x, y, w, h) box per ground truth; its area is
            the OKS scale and decides the M/L split.
        sigmas: per-joint constants, default the bundled 23-joint table.
        scores: per image, a confidence per prediction (default 1).
    """
    if len(pred) != len(gt) or len(gt) != len(bboxes):
        raise ValueError("pred, gt and bboxes must list the same images")
    M = None
    for img in list(gt) + list(pred):
        for kp in img:
            M = len(kp)
            break
    if sigmas is None:
        sigmas = oks_sigmas() if M in (None, len(COCO_SIGMAS)) else None
    if sigmas is None or (M is not None and len(sigmas) != M):
        raise MissingConstants(f"need one OKS constant per joint ({M})")
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if scores is None:
        scores = [[1.0] * len(p) for p in pred]
    thresholds = np.asarray(thresholds, dtype=np.float64)
    out: dict = {}
    for name, rng in AREA_RANGES.items():
        per_image = []
        for P, G, B, S in zip(pred, gt, bboxes, scores):
            P = [np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in P]
            G = [np.asarray(g, dtype=np.float64).reshape(-1, 2) for g in G]
            areas = [float(b[2] * b[3]) for b in B]
            per_image.append(_evaluate_image(P, S, G, areas, sigmas, rng, thresholds))
        ap, ar = _accumulate(per_image, thresholds)
        suffix = "" if name == "all" else "_" + name
        out["AP" + suffix] = _pct(ap)
        out["AR" + suffix] = _pct(ar)
        if name == "all":
            for key, thr in (("50", 0.5), ("75", 0.75)):
                hit = np.flatnonzero(np.isclose(thresholds, thr))
                if hit.size:
                    out["AP" + key] = _pct(ap[hit])
                    out["AR" + key] = _pct(ar[hit])
            out["per_threshold"] = {f"{t:.2f}": [_pct(ap[i : i + 1]), _pct(ar[i : i + 1])] for i, t in enumerate(thresholds)}
    return out


def _pct(v: np.ndarray) -> float:
    v = v[v > -1]
    return float(100.0 * v.mean()) if v.size else -1.0


# --- correspondence precision --------------------------------------------------


def matching_precision(tracks: PersonTrackSet, gt_correspondence: Mapping[tuple[int, int], int] | None) -> float:
    """Fraction of within-track detection pairs that belong to one true person.

    A detection absent from the ground truth makes all its links wrong. With no
    links at all nothing is wrong and the precision is 1.
    """
    if not gt_correspondence:
        raise NoGroundTruth("matching precision needs ground-truth correspondences")
    good = total = 0
    for track in tracks:
        for a, b in track.links():
            total += 1
            pa, pb = gt_correspondence.get(a), gt_correspondence.get(b)
            good += pa is not None and pa == pb
    return good / total if total else 1.0


# --- reprojection error ---------------------------------------------------------


@dataclass(frozen=True)
class ReprojStats:
    ave: float
    min: float
    max: float
    var: float
    bin_edges: tuple[float, ...] = field(repr=False)
    counts: tuple[int, ...] = field(repr=False)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.ave, self.min, self.max, self.var)

    def histogram_rows(self) -> list[tuple[float, int]]:
        return list(zip(self.bin_edges[:-1], self.counts))


def reprojection_errors(
    poses: Sequence[Pose3D],
    detections: Mapping[int, Sequence[Detection2D]],
    cameras: Mapping[int, CameraView],
) -> np.ndarray:
    """Pixel distance between each reprojected joint and its 2D observation,
    for every view in each pose's track."""
    out = []
    for pose in poses:
        for view, det_idx in pose.track.items():
            det = detections[view][det_idx]
            ok = pose.present & det.present
            if not ok.any():
                continue
            uv = project_points(cameras[view], pose.joints[ok])
            out.append(np.linalg.norm(uv - det.joints[ok], axis=1))
    return np.concatenate(out) if out else np.zeros(0)


def reproj_stats(
    poses_or_errors,
    detections: Mapping[int, Sequence[Detection2D]] | None = None,
    cameras: Mapping[int, CameraView] | None = None,
    bins: int = 50,
) -> ReprojStats:
    """(ave, min, max, var) of reprojection distances plus a histogram.

    Accepts either poses with their detections and cameras, or a precomputed
    array of distances. The variance is the population variance.
    """
    if detections is None:
        e = np.asarray(poses_or_errors, dtype=np.float64).reshape(-1)
    else:
        e = reprojection_errors(poses_or_errors, detections, cameras)
    if e.size == 0:
        raise ValueError("no reprojection residuals")
    hi = float(e.max())
    counts, edges = np.histogram(e, bins=bins, range=(0.0, hi if hi > 0 else 1.0))
    return ReprojStats(
        float(e.mean()), float(e.min()), hi, float(e.var()),
        tuple(float(x) for x in edges), tuple(int(c) for c in counts),
    )


def histogram_csv(stats: ReprojStats) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_left_px", "count"])
    for left, c in stats.histogram_rows():
        w.writerow([repr(left), c])
    return buf.getvalue()


# --- report -----------------------------------------------------------------------


@dataclass
class EvalReport:
    mpjpe_mm: dict | None = None
    pcp: dict | None = None
    ap_ar: dict | None = None
    reproj: ReprojStats | None = None
    matching_precision: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.reproj is not None:
            d["reproj"] = dict(zip(("ave", "min", "max", "var"), self.reproj.as_tuple()))
            d["histogram"] = [[l, c] for l, c in self.reproj.histogram_rows()]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def flat(self) -> dict[str, float]:
        """Scalar entries keyed by dotted path, histogram excluded."""
        out: dict[str, float] = {}

        def walk(prefix, v):
            if isinstance(v, dict):
                for k in sorted(v):
                    walk(f"{prefix}.{k}" if prefix else str(k), v[k])
            elif isinstance(v, (int, float)) and not isinstance(v, bool):
                out[prefix] = v

        d = self.to_dict()
        d.pop("histogram", None)
        walk("", d)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.flat().items():
            w.writerow([k, repr(float(v))])
        return buf.getvalue()


def evaluate_frame(
    poses: Sequence[Pose3D],
    gt_poses: Sequence[Pose3D],
    detections: Mapping[int, Sequence[Detection2D]],
    cameras: Mapping[int, CameraView],
    schema: SkeletonSchema,
    tracks: PersonTrackSet | None = None,
    correspondence: Mapping[tuple[int, int], int] | None = None,
) -> EvalReport:
    """Full report for one frame with known ground truth.

    Keypoint AP/AR scores each pose's reprojection into every view of its
    track against the exact projection of the true person behind each
    detection, using the detection box as the object scale.
    """
    report = EvalReport()
    try:
        report.mpjpe_mm = mpjpe(poses, gt_poses, schema)
        report.pcp = pcp(poses, gt_poses, schema=schema)
    except NoMatches:
        pass
    if poses:
        report.reproj = reproj_stats(poses, detections, cameras)
        if correspondence:
            by_id = {g.person_id: g for g in gt_poses}
            pred_imgs, gt_imgs, boxes = [], [], []
            for view in sorted(cameras):
                cam = cameras[view]
                dets = detections.get(view, [])
                keep = [i for i in range(len(dets)) if correspondence.get((view, i)) in by_id]
                gt_imgs.append([project_points(cam, by_id[correspondence[(view, i)]].joints) for i in keep])
                boxes.append([dets[i].bbox for i in keep])
                pred_imgs.append([project_points(cam, p.joints) for p in poses if view in p.track])
            report.ap_ar = oks_ap_ar(pred_imgs, gt_imgs, boxes, oks_sigmas(schema))
    if tracks is not None and correspondence:
        report.matching_precision = matching_precision(tracks, correspondence)
    return report


def evaluate(poses: Sequence[Pose3D], truth, tracks: PersonTrackSet | None = None) -> EvalReport:
    """:func:`evaluate_frame` against a :class:`crowdpose3d.synth.GroundTruth`."""
    return evaluate_frame(
        poses, truth.poses3d, truth.detections, truth.camera_map, truth.schema, tracks, truth.correspondence
    )
