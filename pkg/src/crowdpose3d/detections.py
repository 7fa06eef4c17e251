"""2D skeleton detections and the per-joint uncertainty model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SigmaModel:
    """Pixel standard deviation of a joint detection.

    sigma = sigma0 * (bbox diagonal / ref_diagonal) / max(confidence, c_floor)
    """

    sigma0: float = 2.0
    ref_diagonal: float = 400.0
    c_floor: float = 0.1

    def __call__(self, bbox, confidence):
        x, y, w, h = np.asarray(bbox, dtype=np.float64)
        diag = np.hypot(max(w, 0.0), max(h, 0.0))
        conf = np.clip(np.asarray(confidence, dtype=np.float64), 0.0, 1.0)
        return self.sigma0 * (diag / self.ref_diagonal) / np.maximum(conf, self.c_floor)


def sigma_model(bbox, confidence, model: SigmaModel = SigmaModel()):
    """Detection uncertainty in pixels from the person box and joint score."""
    return model(bbox, confidence)


@dataclass(frozen=True)
class Detection2D:
    """One person's 2D skeleton in one view.

    Absent joints carry NaN coordinates and ``present = False``.
    """

    view: int
    person_index: int
    joints: np.ndarray
    confidence: np.ndarray
    present: np.ndarray
    bbox: tuple[float, float, float, float]
    sigma: np.ndarray | None = None

    def __post_init__(self):
        joints = np.array(self.joints, dtype=np.float64).reshape(-1, 2)
        conf = np.array(self.confidence, dtype=np.float64).reshape(-1)
        present = np.array(self.present, dtype=bool).reshape(-1) & np.all(np.isfinite(joints), axis=1)
        if not (len(joints) == len(conf) == len(present)):
            raise ValueError("joints, confidence and present must have the same length")
        joints[~present] = np.nan
        bbox = tuple(float(b) for b in self.bbox)
        if self.sigma is None:
            sigma = np.asarray(sigma_model(bbox, conf), dtype=np.float64).reshape(-1)
        else:
            sigma = np.array(self.sigma, dtype=np.float64).reshape(-1)
        if np.any(sigma[present] <= 0):
            raise ValueError("sigma must be positive for present joints")
        for a in (joints, conf, present, sigma):
            a.setflags(write=False)
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "confidence", conf)
        object.__setattr__(self, "present", present)
        object.__setattr__(self, "bbox", bbox)
        object.__setattr__(self, "sigma", sigma)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @classmethod
    def from_keypoints(
        cls,
        view: int,
        person_index: int,
        keypoints,
        bbox=None,
        model: SigmaModel = SigmaModel(),
    ) -> "Detection2D":
        """Build from ``[[x, y, conf] | None, ...]`` rows (the JSON layout)."""
        M = len(keypoints)
        joints = np.full((M, 2), np.nan)
        conf = np.zeros(M)
        present = np.zeros(M, dtype=bool)
        for j, kp in enumerate(keypoints):
            if kp is None:
                continue
            joints[j] = kp[0], kp[1]
            conf[j] = kp[2] if len(kp) > 2 else 1.0
            present[j] = True
        if bbox is None:
            bbox = bbox_of(joints[present])
        sigma = np.asarray(model(bbox, conf), dtype=np.float64).reshape(-1)
        return cls(view, person_index, joints, conf, present, bbox, sigma)

    def keypoints(self) -> list:
        """Inverse of :meth:`from_keypoints`."""
        return [
            [float(x), float(y), float(c)] if p else None
            for (x, y), c, p in zip(self.joints, self.confidence, self.present)
        ]

    def inside_frame(self, image_size, margin: float = 0.1) -> np.ndarray:
        """Mask of present joints inside the image grown by `margin` per side."""
        w, h = image_size
        x, y = self.joints[:, 0], self.joints[:, 1]
        with np.errstate(invalid="ignore"):
            return (
                self.present
                & (x >= -margin * w)
                & (x <= (1 + margin) * w)
                & (y >= -margin * h)
                & (y <= (1 + margin) * h)
            )

    def restricted(self, mask) -> "Detection2D":
        """Copy keeping only joints where `mask` holds."""
        keep = self.present & np.asarray(mask, dtype=bool)
        return Detection2D(
            self.view, self.person_index, self.joints, self.confidence, keep, self.bbox, self.sigma
        )


def bbox_of(points, pad: float = 0.1) -> tuple[float, float, float, float]:
    """Padded (x, y, w, h) box around a set of 2D points."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return (0.0, 0.0, 1.0, 1.0)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    size = np.maximum(hi - lo, 1.0)
    lo = lo - pad * size
    size = size * (1 + 2 * pad)
    return (float(lo[0]), float(lo[1]), float(size[0]), float(size[1]))
