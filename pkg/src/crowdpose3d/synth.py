"""Synthetic crowd scenes with exact ground truth.

People are rigid template skeletons whose bones have exactly the schema's
reference lengths, posed with a random stride and small per-bone jitter,
standing on z = 0. Cameras sit on a circle around the scene and look at its
center. Detections are exact projections with Gaussian pixel noise, random
joint dropout and random joint swaps with the nearest other person.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .detections import Detection2D, SigmaModel, bbox_of
from .errors import InfeasibleSpec
from .geometry import CameraView, SkeletonSchema, project_points
from .homography import (
    GROUND_FRAME,
    GroundHomography,
    ground_homography_from_cameras,
    image_to_ground_homography,
)
from .reconstruct import Pose3D

# Standing posture (x forward, y left, z up, meters); only bone directions
# are taken from it, lengths come from the schema.
TEMPLATE = {
    "nose": (0.10, 0.0, 1.60),
    "left_eye": (0.08, 0.03, 1.64),
    "left_ear": (0.0, 0.075, 1.62),
    "left_shoulder": (0.0, 0.18, 1.42),
    "left_elbow": (0.0, 0.21, 1.13),
    "left_wrist": (0.06, 0.21, 0.88),
    "left_hip": (0.0, 0.10, 0.95),
    "left_knee": (0.02, 0.10, 0.52),
    "left_ankle": (0.0, 0.10, 0.10),
    "left_big_toe": (0.18, 0.07, 0.02),
    "left_small_toe": (0.15, 0.14, 0.02),
    "left_heel": (-0.05, 0.10, 0.0),
}
TEMPLATE.update({"right" + k[4:]: (x, -y, z) for k, (x, y, z) in TEMPLATE.items() if k.startswith("left")})

LEFT_LEG = ("left_knee", "left_ankle", "left_big_toe", "left_small_toe", "left_heel")
RIGHT_LEG = ("right_knee", "right_ankle", "right_big_toe", "right_small_toe", "right_heel")


@dataclass(frozen=True)
class SceneSpec:
    n_persons: int = 10
    n_views: int = 4
    noise_px: float = 0.0
    occlusion_rate: float = 0.0
    swap_rate: float = 0.0
    area: tuple[float, float] = (6.0, 6.0)
    seed: int = 0
    min_spacing: float = 0.4
    jitter_deg: float = 5.0
    stride_deg: tuple[float, float] = (5.0, 20.0)
    camera_radius: float = 10.0
    camera_height: tuple[float, float] = (3.5, 5.0)
    focal: tuple[float, float] = (1000.0, 1300.0)
    image_size: tuple[int, int] = (1920, 1080)
    confidence: tuple[float, float] = (0.7, 1.0)

    def __post_init__(self):
        if self.n_views < 2:
            raise ValueError("need at least two views")
        if self.n_persons < 0:
            raise ValueError("n_persons must be non-negative")
        for name in ("occlusion_rate", "swap_rate"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.noise_px < 0:
            raise ValueError("noise_px must be non-negative")


@dataclass
class GroundTruth:
    spec: SceneSpec
    schema: SkeletonSchema
    poses3d: list[Pose3D]
    cameras: list[CameraView]
    homographies: list[GroundHomography]
    to_ground: dict[int, GroundHomography]
    detections: dict[int, list[Detection2D]]
    correspondence: dict[tuple[int, int], int]
    exact: dict[tuple[int, int], np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def camera_map(self) -> dict[int, CameraView]:
        return {c.id: c for c in self.cameras}

    def tracks_by_person(self) -> dict[int, dict[int, int]]:
        """Ground-truth person -> {view: detection index}."""
        out: dict[int, dict[int, int]] = {}
        for (v, d), pid in self.correspondence.items():
            out.setdefault(pid, {})[v] = d
        return out


def _rotation(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def _bfs_bones(schema: SkeletonSchema, root: int) -> list[tuple[int, int, int]]:
    """(bone, parent, child) triples in breadth-first order from `root`."""
    order, seen, queue = [], {root}, deque([root])
    while queue:
        j = queue.popleft()
        for l, other in schema.neighbors(j):
            if other not in seen:
                seen.add(other)
                order.append((l, j, other))
                queue.append(other)
    return order


def make_person(
    schema: SkeletonSchema,
    rng: np.random.Generator,
    position=(0.0, 0.0),
    heading: float = 0.0,
    stride: float = 0.0,
    jitter_deg: float = 5.0,
) -> np.ndarray:
    """One skeleton with exact reference bone lengths, lowest heel on z = 0."""
    names = schema.joint_names
    template = np.array([TEMPLATE[n] for n in names])
    root = schema.index("left_hip")
    swing = {schema.index(n): -stride for n in LEFT_LEG if n in names}
    swing.update({schema.index(n): stride for n in RIGHT_LEG if n in names})
    lateral = np.array([0.0, 1.0, 0.0])
    Q = np.zeros_like(template)
    Q[root] = template[root]
    for l, parent, child in _bfs_bones(schema, root):
        d = template[child] - template[parent]
        d /= np.linalg.norm(d)
        if child in swing:
            d = _rotation(lateral, swing[child]) @ d
        if jitter_deg > 0:
            axis = np.cross(d, rng.normal(size=3))
            d = _rotation(axis, np.deg2rad(rng.uniform(0, jitter_deg))) @ d
        Q[child] = Q[parent] + schema.b_ref[l] * d
    R = _rotation([0, 0, 1], heading)
    Q = Q @ R.T
    heels = list(schema.heel_indices)
    mid_hip = 0.5 * (Q[schema.index("left_hip")] + Q[schema.index("right_hip")])
    offset = np.array([position[0] - mid_hip[0], position[1] - mid_hip[1], -Q[heels, 2].min()])
    return Q + offset


def _place(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    w, d = spec.area
    placed: list[np.ndarray] = []
    for _ in range(spec.n_persons):
        for _attempt in range(1000):
            p = rng.uniform([-w / 2, -d / 2], [w / 2, d / 2])
            if all(np.linalg.norm(p - q) >= spec.min_spacing for q in placed):
                placed.append(p)
                break
        else:
            raise InfeasibleSpec(
                f"cannot place {spec.n_persons} persons {spec.min_spacing} m apart in a {w}x{d} m area"
            )
    return np.array(placed).reshape(-1, 2)


def make_cameras(spec: SceneSpec, rng: np.random.Generator) -> list[CameraView]:
    phase = rng.uniform(0, 2 * np.pi)
    # two cameras facing each other leave depth along their baseline
    # unobservable, so a pair is placed a quarter turn apart
    step = 2 * np.pi / spec.n_views if spec.n_views > 2 else np.pi / 2
    cams = []
    for k in range(spec.n_views):
        angle = phase + step * k + rng.uniform(-0.1, 0.1)
        height = rng.uniform(*spec.camera_height)
        radius = spec.camera_radius * rng.uniform(0.95, 1.05)
        pos = (radius * np.cos(angle), radius * np.sin(angle), height)
        target = (rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 0.9)
        cams.append(CameraView.look_at(k, pos, target, rng.uniform(*spec.focal), spec.image_size))
    return cams


def generate(spec: SceneSpec, schema: SkeletonSchema | None = None) -> GroundTruth:
    """Build a scene deterministically from `spec.seed`."""
    schema = schema or SkeletonSchema.default()
    rng = np.random.default_rng(spec.seed)
    positions = _place(spec, rng)
    people = []
    for p in positions:
        heading = rng.uniform(0, 2 * np.pi)
        stride = np.deg2rad(rng.uniform(*spec.stride_deg))
        people.append(make_person(schema, rng, p, heading, stride, spec.jitter_deg))
    M = schema.n_joints
    cameras = make_cameras(spec, rng)
    W, H = spec.image_size

    detections: dict[int, list[Detection2D]] = {}
    correspondence: dict[tuple[int, int], int] = {}
    exact: dict[tuple[int, int], np.ndarray] = {}
    views_seen = np.zeros((len(people), M), dtype=np.int64)
    sigma = SigmaModel()
    for cam in cameras:
        visible, proj = [], {}
        for pid, Q in enumerate(people):
            if np.any(cam.depth(Q) <= 0):
                continue
            uv = project_points(cam, Q)
            if np.all((uv[:, 0] >= 0) & (uv[:, 0] <= W) & (uv[:, 1] >= 0) & (uv[:, 1] <= H)):
                visible.append(pid)
                proj[pid] = uv
        order = rng.permutation(len(visible))
        noisy = {pid: proj[pid] + rng.normal(0.0, spec.noise_px, size=(M, 2)) if spec.noise_px > 0 else proj[pid].copy()
                 for pid in visible}
        hips = {pid: proj[pid][[schema.index("left_hip"), schema.index("right_hip")]].mean(axis=0) for pid in visible}
        dets = []
        for det_idx, o in enumerate(order):
            pid = visible[o]
            joints = noisy[pid].copy()
            if spec.swap_rate > 0 and len(visible) > 1:
                others = [q for q in visible if q != pid]
                nearest = min(others, key=lambda q: np.linalg.norm(hips[q] - hips[pid]))
                swap = rng.random(M) < spec.swap_rate
                joints[swap] = noisy[nearest][swap]
            present = np.ones(M, dtype=bool)
            if spec.occlusion_rate > 0:
                present = rng.random(M) >= spec.occlusion_rate
            conf = rng.uniform(*spec.confidence, size=M)
            box = bbox_of(proj[pid])
            joints[~present] = np.nan
            dets.append(Detection2D(cam.id, det_idx, joints, conf, present, box, sigma(box, conf)))
            correspondence[(cam.id, det_idx)] = pid
            exact[(cam.id, det_idx)] = proj[pid]
            views_seen[pid] += present
        detections[cam.id] = dets

    poses = [
        Pose3D(pid, Q, views_seen[pid], 0.0, 0.0, {v: d for (v, d), p in correspondence.items() if p == pid})
        for pid, Q in enumerate(people)
    ]
    homographies = [
        ground_homography_from_cameras(a, b) for a in cameras for b in cameras if a.id != b.id
    ]
    to_ground = {c.id: image_to_ground_homography(c) for c in cameras}
    return GroundTruth(spec, schema, poses, cameras, homographies, to_ground, detections, correspondence, exact)


def ground_correspondences(gt: GroundTruth, n_points: int = 12, seed: int = 0) -> list[dict]:
    """Ground-correspondence records pairing each view with the metric ground
    frame, as a surveyor would annotate them."""
    rng = np.random.default_rng(seed)
    w, d = gt.spec.area
    records = []
    for cam in gt.cameras:
        W, H = cam.image_size
        rows = []
        while len(rows) < n_points:
            X = rng.uniform([-w / 2 - 1, -d / 2 - 1], [w / 2 + 1, d / 2 + 1])
            P3 = np.array([X[0], X[1], 0.0])
            if cam.depth(P3)[0] <= 0:
                continue
            u = project_points(cam, P3)[0]
            if 0 <= u[0] <= W and 0 <= u[1] <= H:
                rows.append([float(X[0]), float(X[1]), float(u[0]), float(u[1])])
        records.append({"view_a": GROUND_FRAME, "view_b": cam.id, "points": rows})
    return records
