"""Per-person 3D reconstruction.

Each person is solved in three stages: linear (DLT) triangulation of every
joint seen in at least two views, an optional per-joint maximum-likelihood
refinement of the uncertainty-weighted reprojection error, and a joint MAP
refinement that adds a Gaussian bone-length prior. The two iterative stages
share one Levenberg-Marquardt trust-region loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .detections import Detection2D
from .errors import DegenerateGeometry, DegenerateSystem, PointAtInfinity, ZeroLengthBone
from .geometry import CameraView, SkeletonSchema, solve_homogeneous_ls
from .matching import PersonTrackSet

log = logging.getLogger(__name__)

ZERO_BONE = 1e-9


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 100
    gradient_tol: float = 1e-10
    step_tol: float = 1e-10
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 3.0
    run_mle_stage: bool = True
    allow_prior_completion: bool = False

    def __post_init__(self):
        for name in ("max_iters", "gradient_tol", "step_tol", "initial_damping", "damping_up", "damping_down"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Pose3D:
    """Reconstructed skeleton; absent joints are NaN."""

    person_id: int
    joints: np.ndarray
    per_joint_views: np.ndarray
    nll: float = 0.0
    reproj_rms: float = 0.0
    track: Mapping[int, int] = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        joints = np.array(self.joints, dtype=np.float64).reshape(-1, 3)
        views = np.array(self.per_joint_views, dtype=np.int64).reshape(-1)
        joints.setflags(write=False)
        views.setflags(write=False)
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "per_joint_views", views)
        object.__setattr__(self, "track", dict(sorted(self.track.items())))

    @property
    def present(self) -> np.ndarray:
        return np.all(np.isfinite(self.joints), axis=1)

    def to_record(self) -> dict:
        return {
            "id": int(self.person_id),
            "joints": [[float(c) for c in p] if np.all(np.isfinite(p)) else None for p in self.joints],
            "nll": float(self.nll),
            "reproj_rms": float(self.reproj_rms),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Pose3D":
        joints = np.array([j if j is not None else [np.nan] * 3 for j in rec["joints"]], dtype=np.float64)
        present = np.all(np.isfinite(joints), axis=1)
        return cls(
            person_id=rec["id"],
            joints=joints,
            per_joint_views=np.where(present, 2, 0),
            nll=rec.get("nll", 0.0),
            reproj_rms=rec.get("reproj_rms", 0.0),
        )


@dataclass(frozen=True)
class Observations:
    """Flattened 2D observations of one person: one row per (joint, view)."""

    joint: np.ndarray
    view: np.ndarray
    P: np.ndarray
    q: np.ndarray
    sigma: np.ndarray

    @classmethod
    def from_detections(
        cls, detections: Sequence[Detection2D], cameras: Mapping[int, CameraView]
    ) -> "Observations":
        joint, view, P, q, sigma = [], [], [], [], []
        for det in detections:
            cam = cameras[det.view]
            for j in np.flatnonzero(det.present):
                joint.append(j)
                view.append(det.view)
                P.append(cam.P)
                q.append(det.joints[j])
                sigma.append(det.sigma[j])
        return cls(
            np.array(joint, dtype=np.int64),
            np.array(view, dtype=np.int64),
            np.array(P, dtype=np.float64).reshape(-1, 3, 4),
            np.array(q, dtype=np.float64).reshape(-1, 2),
            np.array(sigma, dtype=np.float64),
        )

    def __len__(self) -> int:
        return len(self.joint)

    def subset(self, mask) -> "Observations":
        m = np.asarray(mask, dtype=bool)
        return Observations(self.joint[m], self.view[m], self.P[m], self.q[m], self.sigma[m])

    def views_per_joint(self, n_joints: int) -> np.ndarray:
        return np.bincount(self.joint, minlength=n_joints)

    def with_sigma(self, sigma) -> "Observations":
        return Observations(self.joint, self.view, self.P, self.q, np.broadcast_to(sigma, self.sigma.shape).copy())


def _reprojection(X: np.ndarray, obs: Observations) -> tuple[np.ndarray, np.ndarray]:
    """Normalized residuals (q - proj(X)) / sigma and their derivative in X.

    X holds one 3D point per observation row. Returns r (K, 2) and dr/dX
    (K, 2, 3).
    """
    P = obs.P
    u = np.einsum("kij,kj->ki", P[:, :, :3], X) + P[:, :, 3]
    w = u[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise PointAtInfinity("joint on a camera's principal plane")
    proj = u[:, :2] / w[:, None]
    s = obs.sigma[:, None]
    r = (obs.q - proj) / s
    # d proj / dX = (P[:2, :3] w - u[:2] P[2, :3]) / w^2
    dproj = (P[:, :2, :3] * w[:, None, None] - u[:, :2, None] * P[:, None, 2, :3]) / (w**2)[:, None, None]
    return r, -dproj / s[:, :, None]


def neg_log_posterior(
    x,
    obs: Observations,
    schema: SkeletonSchema,
    active=None,
    use_prior: bool = True,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Negative log posterior of one person, up to an additive constant.

    Args:
        x: candidate joints, (M, 3) or flat (3M,).
        obs: the person's 2D observations.
        schema: bone tree with reference lengths and deviations.
        active: mask of joints that are estimated; defaults to joints seen
            in at least two views. Observations of inactive joints and bones
            touching them are ignored.
        use_prior: include the bone-length terms.

    Returns:
        ``(value, r, J)`` with ``value = 0.5 * r @ r``. Rows of r are the
        reprojection residuals (x then y for each observation) followed by
        one bone residual ``(b_ref - length) / sigma_bone`` per bone with
        both ends active. J is dr/dx over all 3M coordinates.

    Raises:
        ZeroLengthBone: an active bone is shorter than 1e-9 m.
    """
    Q = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    M = len(Q)
    if active is None:
        active = obs.views_per_joint(M) >= 2
    active = np.asarray(active, dtype=bool)
    rows = active[obs.joint]
    o = obs.subset(rows)
    K = len(o)

    bones = [(l, a, b) for l, (a, b) in enumerate(schema.bones) if use_prior and active[a] and active[b]]
    B = len(bones)
    r = np.empty(2 * K + B)
    J = np.zeros((2 * K + B, 3 * M))

    if K:
        rr, dr = _reprojection(Q[o.joint], o)
        r[: 2 * K] = rr.reshape(-1)
        k = np.arange(K)
        for c in range(3):
            J[2 * k, 3 * o.joint + c] = dr[:, 0, c]
            J[2 * k + 1, 3 * o.joint + c] = dr[:, 1, c]

    for n, (l, a, b) in enumerate(bones):
        d = Q[a] - Q[b]
        length = float(np.linalg.norm(d))
        if length < ZERO_BONE:
            raise ZeroLengthBone(l, (a, b))
        s = schema.sigma_bone[l]
        row = 2 * K + n
        r[row] = (schema.b_ref[l] - length) / s
        unit = d / length
        J[row, 3 * a : 3 * a + 3] = -unit / s
        J[row, 3 * b : 3 * b + 3] = unit / s

    return 0.5 * float(r @ r), r, J


@dataclass
class LMResult:
    x: np.ndarray
    value: float
    iterations: int
    converged: bool
    grad_inf: float
    history: list[float]
    reason: str


def levenberg_marquardt(
    fun: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    x0,
    cfg: SolverConfig = SolverConfig(),
) -> LMResult:
    """Minimize 0.5 ||r(x)||^2 with Marquardt-scaled damping.

    A step solves (J'J + lambda diag(J'J)) dx = -J'r and is accepted only if
    the objective strictly decreases; lambda shrinks by `damping_down` after
    an accepted step and grows by `damping_up` after a rejected one. Stops on
    a small gradient, a small step, exhausted iterations, or when no step can
    reduce the objective any more.

    `fun` may raise ZeroLengthBone for a trial point; that trial counts as a
    rejected step.
    """
    x = np.array(x0, dtype=np.float64)
    r, J = fun(x)
    f = 0.5 * float(r @ r)
    lam = cfg.initial_damping
    history = [f]
    reason = "max_iters"
    it = 0
    while it < cfg.max_iters:
        g = J.T @ r
        if np.max(np.abs(g), initial=0.0) < cfg.gradient_tol:
            reason = "gradient"
            break
        A = J.T @ J
        D = np.maximum(np.diag(A), 1e-12 * max(np.max(np.diag(A), initial=0.0), 1e-300))
        it += 1
        while True:
            try:
                dx = np.linalg.solve(A + lam * np.diag(D), -g)
            except np.linalg.LinAlgError:
                dx = None
            if dx is not None and np.all(np.isfinite(dx)):
                x_new = x + dx
                try:
                    r_new, J_new = fun(x_new)
                    f_new = 0.5 * float(r_new @ r_new)
                except (ZeroLengthBone, PointAtInfinity):
                    f_new = np.inf
                if f_new < f:
                    break
            lam *= cfg.damping_up
            if lam > 1e16:
                reason = "stalled"
                break
        if reason == "stalled":
            break
        x, r, J, f = x_new, r_new, J_new, f_new
        history.append(f)
        lam = max(lam / cfg.damping_down, 1e-15)
        if np.linalg.norm(dx) < cfg.step_tol * (np.linalg.norm(x) + cfg.step_tol):
            reason = "step"
            break
    grad_inf = float(np.max(np.abs(J.T @ r), initial=0.0))
    converged = reason != "max_iters" or grad_inf <= 1e-4
    return LMResult(x, f, it, converged, grad_inf, history, reason)


def triangulate_dlt(observations: Sequence[tuple[CameraView | np.ndarray, Sequence[float]]]) -> np.ndarray:
    """Linear triangulation from two or more (camera, pixel) observations.

    Each view contributes the rows ``x P3 - P1`` and ``y P3 - P2``, scaled to
    unit norm; the homogeneous point is the smallest right singular vector.

    Raises:
        DegenerateGeometry: fewer than two views or (near) parallel rays.
        PointAtInfinity: the solution has a vanishing fourth coordinate.
    """
    if len(observations) < 2:
        raise DegenerateGeometry("need at least two views")
    rows = []
    for cam, p in observations:
        P = cam.P if isinstance(cam, CameraView) else np.asarray(cam, dtype=np.float64)
        x, y = float(p[0]), float(p[1])
        rows.append(x * P[2] - P[0])
        rows.append(y * P[2] - P[1])
    A = np.array(rows)
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    try:
        X = solve_homogeneous_ls(A, rel_gap=1e-10)
    except DegenerateSystem as e:
        raise DegenerateGeometry("rays are (nearly) parallel") from e
    if abs(X[3]) < 1e-12:
        raise PointAtInfinity("triangulated point is at infinity")
    return X[:3] / X[3]


def _triangulate_all(obs: Observations, M: int) -> tuple[np.ndarray, np.ndarray]:
    Q = np.full((M, 3), np.nan)
    counts = obs.views_per_joint(M)
    for j in np.flatnonzero(counts >= 2):
        rows = np.flatnonzero(obs.joint == j)
        try:
            Q[j] = triangulate_dlt([(obs.P[k], obs.q[k]) for k in rows])
        except (DegenerateGeometry, PointAtInfinity) as e:
            log.debug("joint %d not triangulated: %s", j, e)
    return Q, counts


def _complete_from_prior(Q: np.ndarray, obs: Observations, counts: np.ndarray, schema: SkeletonSchema) -> np.ndarray:
    """Initialize single-view joints on their ray, at the depth closest to a
    triangulated neighbour. Returns the mask of joints added."""
    added = np.zeros(len(Q), dtype=bool)
    for j in np.flatnonzero(counts == 1):
        known = [(l, o) for l, o in schema.neighbors(j) if np.all(np.isfinite(Q[o]))]
        if not known:
            continue
        l, o = known[0]
        k = int(np.flatnonzero(obs.joint == j)[0])
        P = obs.P[k]
        M = P[:, :3]
        center = -np.linalg.solve(M, P[:, 3])
        direction = np.linalg.solve(M, np.append(obs.q[k], 1.0))
        direction /= np.linalg.norm(direction)
        t = float((Q[o] - center) @ direction)
        Q[j] = center + t * direction
        # place it one reference bone length from the neighbour along the ray
        if np.linalg.norm(Q[j] - Q[o]) < schema.b_ref[l]:
            Q[j] = Q[j] + direction * np.sqrt(max(schema.b_ref[l] ** 2 - np.linalg.norm(Q[j] - Q[o]) ** 2, 0.0))
        added[j] = True
    return added


def _mle_joint(X0: np.ndarray, obs: Observations, cfg: SolverConfig) -> LMResult:
    def fun(X):
        r, dr = _reprojection(np.broadcast_to(X, (len(obs), 3)), obs)
        return r.reshape(-1), dr.reshape(-1, 3)

    return levenberg_marquardt(fun, X0, cfg)


def _map_stage(Q0: np.ndarray, obs: Observations, schema: SkeletonSchema, active: np.ndarray, cfg: SolverConfig):
    cols = np.repeat(active, 3)

    def fun(z):
        x = Q0.reshape(-1).copy()
        x[cols] = z
        _, r, J = neg_log_posterior(x, obs, schema, active)
        return r, J[:, cols]

    z0 = Q0.reshape(-1)[cols]
    try:
        fun(z0)
    except ZeroLengthBone as e:
        # nudge one end off the other and retry once
        a, b = e.joints
        log.debug("zero-length bone %d, perturbing joint %d", e.bone, b)
        Q0 = Q0.copy()
        Q0[b, 0] += 1e-6
        z0 = Q0.reshape(-1)[cols]
    res = levenberg_marquardt(fun, z0, cfg)
    Q = Q0.copy()
    Q.reshape(-1)[cols] = res.x
    return Q, res


def solve_person(
    detections: Sequence[Detection2D],
    cameras: Mapping[int, CameraView] | Sequence[CameraView],
    schema: SkeletonSchema,
    cfg: SolverConfig = SolverConfig(),
    person_id: int = 0,
) -> Pose3D:
    """Reconstruct one person from its matched detections (one per view).

    Raises:
        DegenerateGeometry: no joint can be triangulated.
    """
    if not isinstance(cameras, Mapping):
        cameras = {c.id: c for c in cameras}
    M = schema.n_joints
    obs = Observations.from_detections(detections, cameras)
    Q, counts = _triangulate_all(obs, M)
    active = np.all(np.isfinite(Q), axis=1)
    if not active.any():
        raise DegenerateGeometry(f"person {person_id}: no joint observed in two views")
    diag: dict = {"stages": {}}
    Q_dlt = Q.copy()

    if cfg.allow_prior_completion:
        added = _complete_from_prior(Q, obs, counts, schema)
        active |= added
        diag["prior_completed"] = np.flatnonzero(added).tolist()

    if cfg.run_mle_stage:
        iters, converged = 0, True
        for j in np.flatnonzero(active & (counts >= 2)):
            res = _mle_joint(Q[j], obs.subset(obs.joint == j), cfg)
            Q[j] = res.x
            iters += res.iterations
            converged &= res.converged
        diag["stages"]["mle"] = {"iterations": iters, "converged": converged}

    Q, res = _map_stage(Q, obs, schema, active, cfg)
    diag["stages"]["map"] = {"iterations": res.iterations, "converged": res.converged, "reason": res.reason}
    diag["history"] = res.history
    diag["grad_inf"] = res.grad_inf
    diag["converged"] = res.converged
    diag["dlt"] = Q_dlt
    if not res.converged:
        log.warning("person %d: MAP did not converge (|g|=%.3g)", person_id, res.grad_inf)

    Q[~active] = np.nan
    used = obs.subset(active[obs.joint])
    if len(used):
        r, _ = _reprojection(Q[used.joint], used)
        dist = np.linalg.norm(r * used.sigma[:, None], axis=1)
        rms = float(np.sqrt(np.mean(dist**2)))
    else:
        rms = 0.0
    track = {d.view: d.person_index for d in detections}
    return Pose3D(person_id, Q, counts, res.value, rms, track, diag)


def reconstruct_scene(
    tracks: PersonTrackSet,
    detections: Mapping[int, Sequence[Detection2D]],
    cameras: Mapping[int, CameraView] | Sequence[CameraView],
    schema: SkeletonSchema,
    cfg: SolverConfig = SolverConfig(),
    diagnostics: list | None = None,
) -> list[Pose3D]:
    """Solve every person of a track set independently.

    Persons with no joint in two views are dropped; failures are recorded in
    `diagnostics` (when given) and logged, never raised.
    """
    if not isinstance(cameras, Mapping):
        cameras = {c.id: c for c in cameras}
    poses = []
    for pid, person in enumerate(tracks):
        dets = [detections[v][i] for v, i in person.members.items()]
        if len(dets) < 2:
            log.info("person %d dropped: seen in %d view(s)", pid, len(dets))
            if diagnostics is not None:
                diagnostics.append({"person": pid, "event": "dropped", "reason": "fewer than two views"})
            continue
        try:
            pose = solve_person(dets, cameras, schema, cfg, person_id=pid)
        except (DegenerateGeometry, PointAtInfinity, ZeroLengthBone, np.linalg.LinAlgError) as e:
            log.info("person %d dropped: %s", pid, e)
            if diagnostics is not None:
                diagnostics.append({"person": pid, "event": "dropped", "reason": str(e)})
            continue
        if diagnostics is not None:
            d = pose.diagnostics
            event = "solved" if d["converged"] else "nonconvergence"
            diagnostics.append({"person": pid, "event": event, "stages": d["stages"], "grad_inf": d["grad_inf"], "nll": pose.nll})
        poses.append(pose)
    return poses
