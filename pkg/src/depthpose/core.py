"""Core domain types: skeletons, poses, cameras, depth frames, datasets.

Everything here is immutable value data. Arrays are made read-only at
construction so instances can be shared freely across threads.

Conventions frozen for the whole toolkit:
  * pose vectorization is joint-major: (x0, y0, z0, x1, y1, z1, ...)
    with joints in skeleton order;
  * coordinates are meters; depth value 0.0 means "no return / background";
  * camera extrinsics are a 3x4 [R | t] mapping world to camera
    coordinates, p_cam = R @ p_world + t.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

STD_FLOOR = 1e-6
ROTATION_TOL = 1e-6


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Skeleton:
    """Named-joint body model: a tree of joints.

    Attributes
    ----------
    name : str
        Identifier of the body model ("itop15", "ubc3v18", ...).
    joints : tuple[str, ...]
        Joint names, unique, in canonical order. Length J >= 2.
    parents : tuple[int, ...]
        Parent index per joint; exactly one root marked -1.
    """

    name: str
    joints: tuple[str, ...]
    parents: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))
        j = len(self.joints)
        if j < 2:
            raise ValueError(f"skeleton needs at least 2 joints, got {j}")
        if len(set(self.joints)) != j:
            raise ValueError("joint names must be unique")
        if len(self.parents) != j:
            raise ValueError("parents length must match joint count")
        roots = [i for i, p in enumerate(self.parents) if p < 0]
        if len(roots) != 1:
            raise ValueError(f"expected exactly one root, found {len(roots)}")
        for i, p in enumerate(self.parents):
            if p >= j:
                raise ValueError(f"parent index {p} out of range")
            # walk to the root; a cycle would revisit a joint
            seen = set()
            k = i
            while self.parents[k] >= 0:
                if k in seen:
                    raise ValueError("parent indices contain a cycle")
                seen.add(k)
                k = self.parents[k]

    @property
    def joint_count(self) -> int:
        return len(self.joints)

    @property
    def root(self) -> int:
        return self.parents.index(-1)

    def joint_index(self, name: str) -> int:
        return self.joints.index(name)

    def bones(self) -> list[tuple[int, int]]:
        """(child, parent) index pairs, one per edge of the tree."""
        return [(i, p) for i, p in enumerate(self.parents) if p >= 0]


# 15-joint model with the joint names used by the ITOP-style datasets.
_ITOP_JOINTS = (
    "Head", "Neck", "R-Shoulder", "L-Shoulder", "R-Elbow", "L-Elbow",
    "R-Hand", "L-Hand", "Torso", "R-Hip", "L-Hip", "R-Knee", "L-Knee",
    "R-Foot", "L-Foot",
)
_ITOP_PARENTS = (1, 8, 1, 1, 2, 3, 4, 5, -1, 8, 8, 9, 10, 11, 12)

# 18-joint model in the UBC3V style. The source data does not publish
# joint names, so these are our own (kept stable for serialization).
_UBC3V_JOINTS = (
    "head", "neck",
    "shoulder-l", "elbow-l", "wrist-l",
    "shoulder-r", "elbow-r", "wrist-r",
    "spine-mid", "spine-base",
    "hip-l", "knee-l", "ankle-l", "foot-l",
    "hip-r", "knee-r", "ankle-r", "foot-r",
)
_UBC3V_PARENTS = (1, 8, 1, 2, 3, 1, 5, 6, 9, -1, 9, 10, 11, 12, 9, 14, 15, 16)

_PRESETS = {
    "itop15": Skeleton("itop15", _ITOP_JOINTS, _ITOP_PARENTS),
    "ubc3v18": Skeleton("ubc3v18", _UBC3V_JOINTS, _UBC3V_PARENTS),
}


def skeleton_preset(name: str) -> Skeleton:
    """Built-in skeletons: "itop15" (15 joints) or "ubc3v18" (18 joints)."""
    try:
        return _PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown skeleton preset {name!r}; have {sorted(_PRESETS)}") from None


@dataclass(frozen=True)
class Pose:
    """J x 3 joint positions in meters, in a stated frame.

    `frame` is "world" or "camera:<id>".
    """

    skeleton: Skeleton
    coords: np.ndarray
    frame: str = "world"

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.shape != (self.skeleton.joint_count, 3):
            raise ValueError(
                f"coords shape {coords.shape} does not match skeleton "
                f"({self.skeleton.joint_count} joints)"
            )
        if not np.all(np.isfinite(coords)):
            raise ValueError("pose coordinates must be finite")
        object.__setattr__(self, "coords", _readonly(coords))


def vectorize(pose: Pose) -> np.ndarray:
    """Flatten a pose to a length-3J vector, joint-major."""
    return pose.coords.reshape(-1).copy()


def devectorize(values: np.ndarray, skeleton: Skeleton, frame: str = "world") -> Pose:
    values = np.asarray(values, dtype=np.float64)
    j = skeleton.joint_count
    if values.shape != (3 * j,):
        raise ValueError(f"expected vector of length {3 * j}, got shape {values.shape}")
    return Pose(skeleton, values.reshape(j, 3), frame=frame)


@dataclass(frozen=True)
class Normalizer:
    """Per-dimension mean/std standardization of vectorized poses."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError("mean and std must be 1-D vectors of equal length")
        if np.any(std <= 0):
            raise ValueError("std entries must be positive")
        object.__setattr__(self, "mean", _readonly(mean))
        object.__setattr__(self, "std", _readonly(std))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_normalizer(vectors: Sequence[np.ndarray]) -> Normalizer:
    """Per-dimension mean and population std of the given pose vectors.

    Std entries below 1e-6 are clamped to 1e-6 so degenerate dimensions
    cannot blow up the inverse transform.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("fit_normalizer needs at least 2 vectors")
    mean = x.mean(axis=0)
    std = x.std(axis=0)  # population std (ddof=0), documented choice
    return Normalizer(mean, np.maximum(std, STD_FLOOR))


def normalize(v: np.ndarray, n: Normalizer) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != n.dim:
        raise ValueError(f"vector length {v.shape[-1]} != normalizer dim {n.dim}")
    return (v - n.mean) / n.std


def denormalize(v: np.ndarray, n: Normalizer) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != n.dim:
        raise ValueError(f"vector length {v.shape[-1]} != normalizer dim {n.dim}")
    return v * n.std + n.mean


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with rigid world-to-camera extrinsics.

    extrinsics: 3x4 [R | t], p_cam = R @ p_world + t. R must be a proper
    rotation (orthonormal, det +1, tolerance 1e-6).
    intrinsics: fx, fy focal lengths and cx, cy principal point in pixels.
    """

    cam_id: str
    extrinsics: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        e = np.asarray(self.extrinsics, dtype=np.float64)
        if e.shape != (3, 4):
            raise ValueError(f"extrinsics must be 3x4, got {e.shape}")
        r = e[:, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=ROTATION_TOL):
            raise ValueError(f"camera {self.cam_id!r}: rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-5:
            raise ValueError(f"camera {self.cam_id!r}: rotation determinant is not +1")
        object.__setattr__(self, "extrinsics", _readonly(e))

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:, 3]

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Apply the extrinsics to (..., 3) world points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        """Invert the extrinsics on (..., 3) camera-frame points."""
        p = np.asarray(points, dtype=np.float64)
        return (p - self.translation) @ self.rotation

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        """Project camera-frame points to (col, row) pixel coordinates."""
        p = np.asarray(points_cam, dtype=np.float64)
        z = p[..., 2]
        u = self.fx * p[..., 0] / z + self.cx
        v = self.fy * p[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)


@dataclass(frozen=True)
class DepthFrame:
    """H x W depth image in meters from a known camera; 0.0 = no return."""

    camera_id: str
    depth: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float32)
        if d.ndim != 2:
            raise ValueError(f"depth must be 2-D, got shape {d.shape}")
        object.__setattr__(self, "depth", _readonly(d))

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True)
class Sample:
    """One scene: per-camera depth frames plus the world-frame pose."""

    scene_id: int
    frames: tuple[DepthFrame, ...]
    pose: Pose

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if not self.frames:
            raise ValueError("sample must have at least one view")
        if self.pose.frame != "world":
            raise ValueError("sample pose must be in the world frame")


@dataclass(frozen=True)
class Dataset:
    """Samples sharing one skeleton and one camera rig, tagged with a split."""

    skeleton: Skeleton
    cameras: tuple[Camera, ...]
    samples: tuple[Sample, ...]
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "samples", tuple(self.samples))
        ids = [c.cam_id for c in self.cameras]
        if len(set(ids)) != len(ids):
            raise ValueError("camera ids must be unique")
        known = set(ids)
        for s in self.samples:
            for f in s.frames:
                if f.camera_id not in known:
                    raise ValueError(
                        f"scene {s.scene_id}: frame references unknown camera {f.camera_id!r}"
                    )
            if s.pose.skeleton.joints != self.skeleton.joints:
                raise ValueError(f"scene {s.scene_id}: pose skeleton mismatch")

    def camera(self, cam_id: str) -> Camera:
        for c in self.cameras:
            if c.cam_id == cam_id:
                return c
        raise KeyError(cam_id)

    @property
    def frame_count(self) -> int:
        return sum(len(s.frames) for s in self.samples)
