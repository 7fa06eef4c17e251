"""Cameras, skeleton topology and the small linear-algebra kernels shared by
the homography, matching and reconstruction stages.

Units are SI throughout: meters in the world, pixels in images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import DegenerateSystem, PointAtInfinity

HOMOGENEOUS_EPS = 1e-12


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraView:
    """A calibrated pinhole camera.

    Attributes:
        id: view index.
        P: 3x4 projection matrix mapping homogeneous world points to pixels.
        image_size: (width, height) in pixels.
    """

    id: int
    P: np.ndarray
    image_size: tuple[int, int] = (1920, 1080)

    def __post_init__(self):
        P = _frozen(self.P)
        if P.shape != (3, 4):
            raise ValueError(f"projection matrix must be 3x4, got {P.shape}")
        if not np.all(np.isfinite(P)):
            raise ValueError("projection matrix has non-finite entries")
        if np.linalg.matrix_rank(P) != 3:
            raise ValueError("projection matrix must have rank 3")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    @classmethod
    def from_krt(cls, id: int, K, R, t, image_size=(1920, 1080)) -> "CameraView":
        K = np.asarray(K, dtype=np.float64)
        Rt = np.hstack([np.asarray(R, dtype=np.float64), np.asarray(t, dtype=np.float64).reshape(3, 1)])
        return cls(id, K @ Rt, image_size)

    @classmethod
    def look_at(
        cls,
        id: int,
        position,
        target,
        focal: float,
        image_size=(1920, 1080),
        up=(0.0, 0.0, 1.0),
    ) -> "CameraView":
        """Camera at `position` whose optical axis passes through `target`."""
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.vstack([right, down, forward])
        w, h = image_size
        K = np.array([[focal, 0.0, w / 2.0], [0.0, focal, h / 2.0], [0.0, 0.0, 1.0]])
        return cls.from_krt(id, K, R, -R @ position, image_size)

    def decompose(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Split P into intrinsics K (positive diagonal, K[2,2] = 1), rotation R
        and translation t with P ~ K [R | t]."""
        M = self.P[:, :3]
        K, R = scipy.linalg.rq(M)
        S = np.diag(np.sign(np.diag(K)))
        K, R = K @ S, S @ R
        scale = K[2, 2]
        t = np.linalg.solve(K, self.P[:, 3])
        if np.linalg.det(R) < 0:
            R, t = -R, -t
        return K / scale, R, t

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -np.linalg.solve(self.P[:, :3], self.P[:, 3])

    def depth(self, points) -> np.ndarray:
        """Third homogeneous coordinate of P [X; 1]; positive in front of a
        camera whose P has det(M) > 0."""
        X = np.atleast_2d(np.asarray(points, dtype=np.float64))
        d = X @ self.P[2, :3] + self.P[2, 3]
        return d * np.sign(np.linalg.det(self.P[:, :3]))


def project(camera: CameraView | np.ndarray, point) -> np.ndarray:
    """Perspective projection of one 3D point to pixel coordinates."""
    P = camera.P if isinstance(camera, CameraView) else np.asarray(camera, dtype=np.float64)
    X = np.asarray(point, dtype=np.float64).reshape(3)
    u = P[:, :3] @ X + P[:, 3]
    if abs(u[2]) < HOMOGENEOUS_EPS:
        raise PointAtInfinity(f"point {X} lies on the principal plane")
    return u[:2] / u[2]


def project_points(camera: CameraView | np.ndarray, points) -> np.ndarray:
    """Vectorized :func:`project` for an (N, 3) array; returns (N, 2)."""
    P = camera.P if isinstance(camera, CameraView) else np.asarray(camera, dtype=np.float64)
    X = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    u = X @ P[:, :3].T + P[:, 3]
    if np.any(np.abs(u[:, 2]) < HOMOGENEOUS_EPS):
        raise PointAtInfinity("a point lies on the principal plane")
    return u[:, :2] / u[:, 2:3]


def dehomogenize(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if abs(u[-1]) < HOMOGENEOUS_EPS:
        raise PointAtInfinity("homogeneous coordinate is zero")
    return u[:-1] / u[-1]


def sign_normalize(x: np.ndarray) -> np.ndarray:
    """Flip sign so the first nonzero component is positive."""
    flat = x.ravel()
    nz = np.flatnonzero(np.abs(flat) > 0)
    if nz.size and flat[nz[0]] < 0:
        return -x
    return x


def solve_homogeneous_ls(A, rel_gap: float = 1e-12) -> np.ndarray:
    """Unit vector x minimizing ||A x||.

    Returns the right singular vector of the smallest singular value with the
    first nonzero component positive. Raises DegenerateSystem when the two
    smallest singular values are closer than `rel_gap` relative to the
    largest, since the minimizer is then not unique.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    n, m = A.shape
    if n < m - 1:
        raise DegenerateSystem(f"need at least {m - 1} rows for {m} unknowns, got {n}")
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    s = np.concatenate([s, np.zeros(m - s.size)])
    scale = s[0] if s[0] > 0 else 1.0
    if s[-2] - s[-1] < rel_gap * scale:
        raise DegenerateSystem("smallest singular value is not simple")
    x = Vt[-1]
    return sign_normalize(x / np.linalg.norm(x))


@dataclass(frozen=True)
class SkeletonSchema:
    """Joint ordering and bone tree used by the bone-length prior.

    `bones[l] = (a, b)` connects joints a and b; `b_ref[l]` and `sigma_bone[l]`
    are the mean length and standard deviation of that bone in meters.
    """

    joint_names: tuple[str, ...]
    bones: tuple[tuple[int, int], ...]
    b_ref: np.ndarray
    sigma_bone: np.ndarray
    foot_indices: dict[str, tuple[int, ...]] = field(default_factory=dict)
    heel_indices: tuple[int, int] = (19, 22)

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "bones", tuple((int(a), int(b)) for a, b in self.bones))
        object.__setattr__(self, "b_ref", _frozen(self.b_ref))
        object.__setattr__(self, "sigma_bone", _frozen(self.sigma_bone))
        object.__setattr__(
            self, "foot_indices", {k: tuple(int(i) for i in v) for k, v in self.foot_indices.items()}
        )
        object.__setattr__(self, "heel_indices", tuple(int(i) for i in self.heel_indices))
        self._validate()

    def _validate(self):
        M, L = self.n_joints, len(self.bones)
        if self.b_ref.shape != (L,) or self.sigma_bone.shape != (L,):
            raise ValueError("b_ref and sigma_bone need one entry per bone")
        if np.any(self.b_ref <= 0) or np.any(self.sigma_bone <= 0):
            raise ValueError("bone lengths and deviations must be positive")
        if L != M - 1:
            raise ValueError(f"a tree over {M} joints has {M - 1} bones, got {L}")
        parent = list(range(M))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for a, b in self.bones:
            if not (0 <= a < M and 0 <= b < M) or a == b:
                raise ValueError(f"invalid bone ({a}, {b})")
            ra, rb = find(a), find(b)
            if ra == rb:
                raise ValueError(f"bone ({a}, {b}) closes a cycle")
            parent[ra] = rb
        for i in self.heel_indices:
            if not 0 <= i < M:
                raise ValueError(f"heel index {i} out of range")

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def n_bones(self) -> int:
        return len(self.bones)

    def index(self, name: str) -> int:
        return self.joint_names.index(name)

    def bone_lengths(self, joints) -> np.ndarray:
        """Lengths of every bone for an (M, 3) joint array (NaN where absent)."""
        J = np.asarray(joints, dtype=np.float64)
        a, b = np.array(self.bones).T
        return np.linalg.norm(J[a] - J[b], axis=1)

    def neighbors(self, joint: int) -> list[tuple[int, int]]:
        """(bone index, other joint) pairs adjacent to `joint`."""
        out = []
        for l, (a, b) in enumerate(self.bones):
            if a == joint:
                out.append((l, b))
            elif b == joint:
                out.append((l, a))
        return out

    def to_dict(self) -> dict:
        return {
            "joint_names": list(self.joint_names),
            "bones": [list(b) for b in self.bones],
            "b_ref": self.b_ref.tolist(),
            "sigma_bone": self.sigma_bone.tolist(),
            "foot_indices": {k: list(v) for k, v in self.foot_indices.items()},
            "heel_indices": list(self.heel_indices),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonSchema":
        return cls(
            joint_names=d["joint_names"],
            bones=d["bones"],
            b_ref=d["b_ref"],
            sigma_bone=d["sigma_bone"],
            foot_indices=d.get("foot_indices", {}),
            heel_indices=d.get("heel_indices", (19, 22)),
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "SkeletonSchema":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    @classmethod
    def default(cls) -> "SkeletonSchema":
        """MSCOCO-17 body joints plus big toe, small toe and heel on each foot."""
        text = resources.files("crowdpose3d.data").joinpath("skeleton_coco23.json").read_text()
        return cls.from_dict(json.loads(text))


def load_calibration(path: str | Path) -> list[CameraView]:
    with open(path) as f:
        records = json.load(f)
    return [CameraView(r["id"], r["P"], (r["width"], r["height"])) for r in records]


def calibration_to_records(cameras: Sequence[CameraView]) -> list[dict]:
    return [
        {"id": c.id, "P": c.P.tolist(), "width": c.image_size[0], "height": c.image_size[1]}
        for c in cameras
    ]
