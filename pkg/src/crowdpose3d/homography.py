"""Ground-plane homographies between views.

A :class:`GroundHomography` with ``from_view=k`` and ``to_view=j`` maps ground
points seen in view k into the frame of view j. View index ``GROUND_FRAME``
(-1) denotes the metric world ground plane z = 0, so homographies into it
rectify pixels to meters.
"""

from __future__ import annotations

import itertools
import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DegenerateGeometry,
    DegenerateSystem,
    IndexMismatch,
    NumericalFailure,
    PointAtInfinity,
)
from .geometry import HOMOGENEOUS_EPS, CameraView, sign_normalize, solve_homogeneous_ls

GROUND_FRAME = -1


def normalize_homography(H) -> np.ndarray:
    """Scale to unit Frobenius norm with H[2,2] >= 0 (or, when H[2,2] is
    negligible, the first nonzero entry positive)."""
    H = np.asarray(H, dtype=np.float64)
    n = np.linalg.norm(H)
    # already-unit matrices are left untouched so a reload is bit-exact
    if abs(n - 1.0) > 4 * np.finfo(np.float64).eps:
        H = H / n
    if abs(H[2, 2]) > 1e-9:
        return H if H[2, 2] > 0 else -H
    return sign_normalize(H)


@dataclass(frozen=True)
class GroundHomography:
    from_view: int
    to_view: int
    H: np.ndarray

    def __post_init__(self):
        H = np.array(self.H, dtype=np.float64)
        if H.shape != (3, 3) or not np.all(np.isfinite(H)):
            raise ValueError("homography must be a finite 3x3 matrix")
        H = normalize_homography(H)
        # pixel homographies between far-apart views are badly scaled, so
        # invertibility is judged on the singular-value ratio, not on det(H)
        s = np.linalg.svd(H, compute_uv=False)
        if s[-1] <= 1e-13 * s[0]:
            raise DegenerateConfiguration("homography is singular")
        H.setflags(write=False)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "from_view", int(self.from_view))
        object.__setattr__(self, "to_view", int(self.to_view))

    @classmethod
    def identity(cls, view: int = GROUND_FRAME) -> "GroundHomography":
        return cls(view, view, np.eye(3))

    def inverse(self) -> "GroundHomography":
        return GroundHomography(self.to_view, self.from_view, np.linalg.inv(self.H))

    def compose(self, other: "GroundHomography") -> "GroundHomography":
        """self ∘ other: first `other` then `self`."""
        if other.to_view != self.from_view:
            raise IndexMismatch(
                f"cannot chain {other.from_view}->{other.to_view} into {self.from_view}->{self.to_view}"
            )
        return GroundHomography(other.from_view, self.to_view, self.H @ other.H)

    def to_dict(self) -> dict:
        return {"from_view": self.from_view, "to_view": self.to_view, "H": self.H.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GroundHomography":
        return cls(d["from_view"], d["to_view"], d["H"])


def rectify(h: GroundHomography | np.ndarray, p) -> np.ndarray:
    """Apply a homography to one 2D point."""
    H = h.H if isinstance(h, GroundHomography) else np.asarray(h, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64).reshape(2)
    if not np.all(np.isfinite(p)):
        raise ValueError("point must be finite")
    u = H[:, :2] @ p + H[:, 2]
    if abs(u[2]) < HOMOGENEOUS_EPS:
        raise PointAtInfinity(f"{p} maps to infinity")
    return u[:2] / u[2]


def rectify_points(h: GroundHomography | np.ndarray, points) -> np.ndarray:
    H = h.H if isinstance(h, GroundHomography) else np.asarray(h, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    u = p @ H[:, :2].T + H[:, 2]
    if np.any(np.abs(u[:, 2]) < HOMOGENEOUS_EPS):
        raise PointAtInfinity("a point maps to infinity")
    return u[:, :2] / u[:, 2:3]


def _hartley(points: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2)."""
    c = points.mean(axis=0)
    d = np.linalg.norm(points - c, axis=1).mean()
    if d <= 0:
        raise DegenerateConfiguration("all points coincide")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _check_spread(points: np.ndarray, which: str) -> None:
    lo, hi = points.min(axis=0), points.max(axis=0)
    bbox_area = float(np.prod(hi - lo))
    span = float(np.max(hi - lo))
    # axis-aligned lines have zero bbox area; fall back to the squared span
    ref = bbox_area if bbox_area > 0 else span**2
    if ref <= 0:
        raise DegenerateConfiguration(f"{which} points coincide")

    def area(a, b, c):
        return 0.5 * abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))

    if len(points) == 4:
        for a, b, c in itertools.combinations(points, 3):
            if area(a, b, c) <= 1e-9 * ref:
                raise DegenerateConfiguration(f"three {which} points are collinear")
    else:
        # with more than four points only a fully collinear set is degenerate
        centered = points - points.mean(axis=0)
        s = np.linalg.svd(centered, compute_uv=False)
        if s[1] ** 2 <= 1e-9 * max(s[0] ** 2, 1e-300):
            raise DegenerateConfiguration(f"{which} points are collinear")


def estimate_homography(
    correspondences: Sequence[tuple[Sequence[float], Sequence[float]]] | np.ndarray,
    from_view: int = 0,
    to_view: int = 1,
) -> GroundHomography:
    """Normalized DLT estimate of H with dst ~ H src.

    Args:
        correspondences: (src, dst) pairs, or an (n, 4) array of
            ``[x_src, y_src, x_dst, y_dst]`` rows.
    """
    C = np.asarray(correspondences, dtype=np.float64).reshape(-1, 4)
    if len(C) < 4:
        raise DegenerateConfiguration(f"need at least 4 correspondences, got {len(C)}")
    if not np.all(np.isfinite(C)):
        raise DegenerateConfiguration("non-finite correspondence")
    src, dst = C[:, :2], C[:, 2:]
    _check_spread(src, "source")
    _check_spread(dst, "destination")
    Ts, Td = _hartley(src), _hartley(dst)
    s = src @ Ts[:2, :2].T + Ts[:2, 2]
    d = dst @ Td[:2, :2].T + Td[:2, 2]
    n = len(C)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = s
    A[0::2, 2] = 1.0
    A[0::2, 6:8] = -d[:, :1] * s
    A[0::2, 8] = -d[:, 0]
    A[1::2, 3:5] = s
    A[1::2, 5] = 1.0
    A[1::2, 6:8] = -d[:, 1:2] * s
    A[1::2, 8] = -d[:, 1]
    try:
        h = solve_homogeneous_ls(A)
    except (DegenerateSystem, np.linalg.LinAlgError) as e:
        raise NumericalFailure(str(e)) from e
    Hn = h.reshape(3, 3)
    H = np.linalg.solve(Td, Hn @ Ts)
    return GroundHomography(from_view, to_view, H)


def compose_check(h_jk: GroundHomography, h_kl: GroundHomography, h_jl: GroundHomography) -> float:
    """Frobenius distance between H_jl and H_jk H_kl after normalization.

    Zero when the three homographies are mutually consistent.
    """
    if not (
        h_jk.from_view == h_kl.to_view
        and h_jk.to_view == h_jl.to_view
        and h_kl.from_view == h_jl.from_view
    ):
        raise IndexMismatch(
            f"views do not chain: {h_kl.from_view}->{h_kl.to_view}, "
            f"{h_jk.from_view}->{h_jk.to_view} vs {h_jl.from_view}->{h_jl.to_view}"
        )
    composed = normalize_homography(h_jk.H @ h_kl.H)
    return float(np.linalg.norm(normalize_homography(h_jl.H) - composed))


def ground_to_image(camera: CameraView) -> np.ndarray:
    """The 3x3 matrix P E mapping ground-plane (x, y) to pixels."""
    return camera.P[:, [0, 1, 3]]


def ground_homography_from_cameras(cam_a: CameraView, cam_b: CameraView) -> GroundHomography:
    """Exact homography induced by the plane z = 0, mapping view b to view a."""
    Ga, Gb = ground_to_image(cam_a), ground_to_image(cam_b)
    if abs(np.linalg.det(Gb)) <= 1e-12 * np.linalg.norm(Gb) ** 3 or abs(
        np.linalg.det(Ga)
    ) <= 1e-12 * np.linalg.norm(Ga) ** 3:
        raise DegenerateGeometry("camera sees the ground plane edge-on")
    return GroundHomography(cam_b.id, cam_a.id, Ga @ np.linalg.inv(Gb))


def image_to_ground_homography(camera: CameraView) -> GroundHomography:
    """Homography rectifying view pixels onto the metric ground plane."""
    G = ground_to_image(camera)
    if abs(np.linalg.det(G)) <= 1e-12 * np.linalg.norm(G) ** 3:
        raise DegenerateGeometry("camera sees the ground plane edge-on")
    return GroundHomography(camera.id, GROUND_FRAME, np.linalg.inv(G))


# --- ground-correspondence files and homography caches -----------------------


def load_ground_correspondences(path: str | Path) -> list[GroundHomography]:
    """Estimate one homography per record of a ground-correspondence file.

    Each record ``{"view_a": j, "view_b": k, "points": [[xa, ya, xb, yb], ...]}``
    yields H_{j,k}, mapping view k into view j.
    """
    with open(path) as f:
        records = json.load(f)
    out = []
    for r in records:
        pts = np.asarray(r["points"], dtype=np.float64).reshape(-1, 4)
        # file rows are [a, b]; the estimate maps b -> a
        out.append(estimate_homography(pts[:, [2, 3, 0, 1]], from_view=r["view_b"], to_view=r["view_a"]))
    return out


def save_homographies(path: str | Path, homographies: Iterable[GroundHomography]) -> None:
    with open(path, "w") as f:
        json.dump([h.to_dict() for h in homographies], f, indent=1)


def load_homographies(path: str | Path) -> list[GroundHomography]:
    with open(path) as f:
        return [GroundHomography.from_dict(d) for d in json.load(f)]


def homographies_to_reference(
    homographies: Iterable[GroundHomography], views: Iterable[int], reference: int
) -> dict[int, GroundHomography]:
    """Chain pairwise homographies so every view maps into `reference`.

    Breadth-first over the pair graph, so each view uses the shortest chain.
    Views that cannot be reached are left out.
    """
    # incoming[v]: homographies ending in view v, both directions of each pair
    incoming: dict[int, list[GroundHomography]] = {}
    for h in homographies:
        incoming.setdefault(h.to_view, []).append(h)
        inv = h.inverse()
        incoming.setdefault(inv.to_view, []).append(inv)
    into_ref = {reference: GroundHomography.identity(reference)}
    queue = deque([reference])
    while queue:
        v = queue.popleft()
        for h in incoming.get(v, []):
            if h.from_view not in into_ref:
                into_ref[h.from_view] = into_ref[v].compose(h)
                queue.append(h.from_view)
    return {v: into_ref[v] for v in views if v in into_ref}
