"""Procedural multiview depth scenes with exact ground-truth poses.

Bodies are capsules: one capsule per bone plus a sphere per joint. Depth
is the camera-frame z of the nearest analytic ray intersection (z-depth,
like a depth sensor), 0.0 where nothing is hit. Poses come from forward
kinematics over a rest pose perturbed by per-joint random angles.

World frame: z up, person near the origin; cameras sit on a ring and
look at the person.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import Camera, Dataset, DepthFrame, Pose, Sample, Skeleton
from .util import substream

MAX_RADIUS = 0.3
MAX_LENGTH = 1.2


@dataclass(frozen=True)
class BodyShape:
    """Capsule-body dimensions, indexed by child joint of each bone.

    lengths[j], radii[j], rest_directions[j] describe the bone
    parent(j) -> j; root entries are zero / unused. rest_directions are
    unit vectors giving the rest pose that the sampler perturbs.
    """

    lengths: np.ndarray
    radii: np.ndarray
    rest_directions: np.ndarray

    def __post_init__(self):
        lengths = np.asarray(self.lengths, dtype=np.float64)
        radii = np.asarray(self.radii, dtype=np.float64)
        dirs = np.asarray(self.rest_directions, dtype=np.float64)
        j = lengths.shape[0]
        if radii.shape != (j,) or dirs.shape != (j, 3):
            raise ValueError("lengths (J,), radii (J,), rest_directions (J,3) required")
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "rest_directions", dirs)

    def validate(self, skeleton: Skeleton) -> None:
        if self.lengths.shape[0] != skeleton.joint_count:
            raise ValueError("shape arrays do not match skeleton joint count")
        for child, _ in skeleton.bones():
            if not 0 < self.lengths[child] <= MAX_LENGTH:
                raise ValueError(f"bone length for joint {child} outside (0, {MAX_LENGTH}]")
            if not 0 < self.radii[child] <= MAX_RADIUS:
                raise ValueError(f"capsule radius for joint {child} outside (0, {MAX_RADIUS}]")
            n = np.linalg.norm(self.rest_directions[child])
            if abs(n - 1.0) > 1e-9:
                raise ValueError(f"rest direction for joint {child} is not a unit vector")


def _norm(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


# child joint -> (rest direction, bone length m, capsule radius m).
# Person faces +x, right side toward -y.
_BODY_TABLES = {
    "itop15": {
        "Neck": ((0, 0, 1), 0.40, 0.11),
        "Head": ((0, 0, 1), 0.25, 0.09),
        "R-Shoulder": ((0, -1, 0), 0.21, 0.05),
        "L-Shoulder": ((0, 1, 0), 0.21, 0.05),
        "R-Elbow": ((0, -0.2, -1), 0.28, 0.045),
        "L-Elbow": ((0, 0.2, -1), 0.28, 0.045),
        "R-Hand": ((0, 0, -1), 0.26, 0.04),
        "L-Hand": ((0, 0, -1), 0.26, 0.04),
        "R-Hip": ((0, -1, -0.5), 0.20, 0.07),
        "L-Hip": ((0, 1, -0.5), 0.20, 0.07),
        "R-Knee": ((0, 0, -1), 0.44, 0.06),
        "L-Knee": ((0, 0, -1), 0.44, 0.06),
        "R-Foot": ((0, 0, -1), 0.46, 0.05),
        "L-Foot": ((0, 0, -1), 0.46, 0.05),
    },
    "ubc3v18": {
        "spine-mid": ((0, 0, 1), 0.22, 0.11),
        "neck": ((0, 0, 1), 0.22, 0.10),
        "head": ((0, 0, 1), 0.22, 0.09),
        "shoulder-l": ((0, 1, 0), 0.21, 0.05),
        "elbow-l": ((0, 0.2, -1), 0.27, 0.045),
        "wrist-l": ((0, 0, -1), 0.25, 0.04),
        "shoulder-r": ((0, -1, 0), 0.21, 0.05),
        "elbow-r": ((0, -0.2, -1), 0.27, 0.045),
        "wrist-r": ((0, 0, -1), 0.25, 0.04),
        "hip-l": ((0, 1, -0.5), 0.18, 0.07),
        "knee-l": ((0, 0, -1), 0.42, 0.06),
        "ankle-l": ((0, 0, -1), 0.40, 0.05),
        "foot-l": ((1, 0, -0.15), 0.16, 0.04),
        "hip-r": ((0, -1, -0.5), 0.18, 0.07),
        "knee-r": ((0, 0, -1), 0.42, 0.06),
        "ankle-r": ((0, 0, -1), 0.40, 0.05),
        "foot-r": ((1, 0, -0.15), 0.16, 0.04),
    },
}


def default_body_shape(skeleton: Skeleton) -> BodyShape:
    """Plausible human dimensions for the built-in skeleton presets."""
    try:
        table = _BODY_TABLES[skeleton.name]
    except KeyError:
        raise KeyError(f"no default body shape for skeleton {skeleton.name!r}") from None
    j = skeleton.joint_count
    lengths = np.zeros(j)
    radii = np.zeros(j)
    dirs = np.zeros((j, 3))
    for child, _ in skeleton.bones():
        d, length, radius = table[skeleton.joints[child]]
        dirs[child] = _norm(d)
        lengths[child] = length
        radii[child] = radius
    shape = BodyShape(lengths, radii, dirs)
    shape.validate(skeleton)
    return shape


@dataclass(frozen=True)
class PoseSamplerConfig:
    """Random-pose generation knobs.

    angle_range: max |angle| in radians for the two per-joint perturbation
    angles (scalar or per-joint array). root_box: axis-aligned box the
    root position is drawn from. Collapsing every range to a point makes
    the sampler a constant.
    """

    angle_range: float | np.ndarray = 0.5
    root_yaw_range: float = np.pi
    root_box: tuple = ((-0.35, -0.35, 0.9), (0.35, 0.35, 1.05))
    seed: int = 0
    n_poses: int = 1

    def __post_init__(self):
        lo, hi = np.asarray(self.root_box[0]), np.asarray(self.root_box[1])
        if np.any(lo > hi):
            raise ValueError("root_box min must be <= max")
        if np.any(np.asarray(self.angle_range) < 0) or self.root_yaw_range < 0:
            raise ValueError("angle ranges must be >= 0")
        if self.n_poses < 0:
            raise ValueError("n_poses must be >= 0")


def _rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _topo_order(skeleton: Skeleton) -> list[int]:
    order, placed = [], set()
    pending = list(range(skeleton.joint_count))
    while pending:
        rest = []
        for j in pending:
            p = skeleton.parents[j]
            if p < 0 or p in placed:
                order.append(j)
                placed.add(j)
            else:
                rest.append(j)
        pending = rest
    return order


def sample_pose(cfg: PoseSamplerConfig, shape: BodyShape, skeleton: Skeleton,
                rng: np.random.Generator | None = None) -> Pose:
    """Draw one world-frame pose by forward kinematics.

    Each non-root joint sits at parent + length * direction, where the
    direction is the rest direction rotated by accumulated per-joint
    Rz(a) @ Rx(b) perturbations (a, b uniform in +-angle_range). The rig
    as a whole gets a root position inside root_box and a yaw.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    j = skeleton.joint_count
    lo, hi = np.asarray(cfg.root_box[0], float), np.asarray(cfg.root_box[1], float)

    root_pos = rng.uniform(lo, hi)
    yaw = rng.uniform(-cfg.root_yaw_range, cfg.root_yaw_range) if cfg.root_yaw_range > 0 else 0.0
    angles = rng.uniform(-1.0, 1.0, size=(j, 2)) * np.broadcast_to(
        np.asarray(cfg.angle_range, float).reshape(-1, 1) if np.ndim(cfg.angle_range) else cfg.angle_range,
        (j, 2))

    coords = np.zeros((j, 3))
    rot = [None] * j
    for idx in _topo_order(skeleton):
        p = skeleton.parents[idx]
        if p < 0:
            rot[idx] = _rot_z(yaw)
            coords[idx] = root_pos
        else:
            rot[idx] = rot[p] @ _rot_z(angles[idx, 0]) @ _rot_x(angles[idx, 1])
            coords[idx] = coords[p] + shape.lengths[idx] * (rot[idx] @ shape.rest_directions[idx])
    return Pose(skeleton, coords, frame="world")


def _joint_radii(shape: BodyShape, skeleton: Skeleton) -> np.ndarray:
    # sphere per joint: max radius among the bones touching it
    r = np.zeros(skeleton.joint_count)
    for child, parent in skeleton.bones():
        r[child] = max(r[child], shape.radii[child])
        r[parent] = max(r[parent], shape.radii[child])
    return r


def render_depth(pose: Pose, shape: BodyShape, cam: Camera, h: int, w: int, *,
                 noise_sigma: float = 0.0, background_depth: float = 0.0,
                 rng: np.random.Generator | None = None) -> DepthFrame:
    """Render one depth frame by analytic ray-capsule intersection.

    Depth is the camera-frame z of the nearest hit; every capsule point
    satisfies z >= min(endpoint z) - radius, so the frame's minimum
    nonzero depth is bounded below by the nearest joint's z minus the
    largest radius.
    """
    pts = cam.world_to_camera(pose.coords)

    u = (np.arange(w) + 0.5 - cam.cx) / cam.fx
    v = (np.arange(h) + 0.5 - cam.cy) / cam.fy
    d = np.empty((h, w, 3))
    d[..., 0] = u[None, :]
    d[..., 1] = v[:, None]
    d[..., 2] = 1.0
    rays = d.reshape(-1, 3)
    a_sphere = np.einsum("nd,nd->n", rays, rays)

    best = np.full(h * w, np.inf)

    def _update(t, hit):
        np.minimum(best, np.where(hit, t, np.inf), out=best)

    for c, r in zip(pts, _joint_radii(shape, skeleton=pose.skeleton)):
        b = -2.0 * rays @ c
        cc = c @ c - r * r
        disc = b * b - 4.0 * a_sphere * cc
        with np.errstate(invalid="ignore"):
            t = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a_sphere)
        _update(t, (disc >= 0.0) & (t > 1e-6))

    for child, parent in pose.skeleton.bones():
        p1, p2, r = pts[parent], pts[child], shape.radii[child]
        axis = p2 - p1
        length = np.linalg.norm(axis)
        if length < 1e-9:
            continue
        axis = axis / length
        d_par = rays @ axis
        d_perp = rays - d_par[:, None] * axis[None, :]
        oc = -p1
        oc_par = oc @ axis
        oc_perp = oc - oc_par * axis
        a = np.einsum("nd,nd->n", d_perp, d_perp)
        b = 2.0 * d_perp @ oc_perp
        cc = oc_perp @ oc_perp - r * r
        disc = b * b - 4.0 * a * cc
        ok = (disc >= 0.0) & (a > 1e-12)
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.where(ok, (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a), np.inf)
        s = t * d_par + oc_par  # axial coordinate of the hit along the bone
        _update(t, ok & (t > 1e-6) & (s >= 0.0) & (s <= length))

    depth = np.where(np.isfinite(best), best, 0.0)
    if background_depth > 0.0:
        depth = np.where(depth == 0.0, background_depth, depth)
    if noise_sigma > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
        nz = depth > 0.0
        depth[nz] = np.maximum(depth[nz] + rng.normal(0.0, noise_sigma, int(nz.sum())), 1e-4)
    return DepthFrame(cam.cam_id, depth.reshape(h, w).astype(np.float32))


def _look_at_extrinsics(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    position = np.asarray(position, float)
    z = _norm(np.asarray(target, float) - position)
    up = np.asarray(up, float)
    if abs(z @ up) > 0.999:  # camera looking straight up/down
        up = np.array([0.0, 1.0, 0.0])
    x = _norm(np.cross(z, up))
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    return np.hstack([r, (-r @ position)[:, None]])


def ring_cameras(n: int, *, radius: float = 2.8, height: float = 1.4,
                 look_at=(0.0, 0.0, 0.9), azimuth_jitter: float = 0.25,
                 image_h: int = 64, image_w: int = 64, focal: float | None = None,
                 rng: np.random.Generator | None = None) -> tuple[Camera, ...]:
    """n cameras on a ring, evenly spaced azimuths with optional jitter."""
    if n < 1:
        raise ValueError("need at least one camera")
    if rng is None:
        rng = np.random.default_rng(0)
    f = focal if focal is not None else 0.9 * min(image_h, image_w)
    cams = []
    for k in range(n):
        theta = 2.0 * np.pi * k / n + azimuth_jitter * rng.uniform(-1.0, 1.0)
        pos = np.array([radius * np.cos(theta), radius * np.sin(theta), height])
        cams.append(Camera(f"cam{k}", _look_at_extrinsics(pos, look_at),
                           fx=f, fy=f, cx=image_w / 2.0, cy=image_h / 2.0))
    return tuple(cams)


@dataclass(frozen=True)
class SplitDatasets:
    """train/val/test datasets sharing one camera rig and skeleton."""

    train: Dataset
    val: Dataset
    test: Dataset

    def nonempty(self) -> dict[str, Dataset]:
        return {ds.split: ds for ds in (self.train, self.val, self.test) if ds.samples}


def generate_dataset(n_scenes: int, n_cameras: int, sampler: PoseSamplerConfig,
                     shape: BodyShape, skeleton: Skeleton, *, seed: int,
                     height: int = 64, width: int = 64,
                     noise_sigma: float = 0.0, background_depth: float = 0.0,
                     ring_radius: float = 2.8, ring_height: float = 1.4,
                     look_at=(0.0, 0.0, 0.9), azimuth_jitter: float = 0.25,
                     focal: float | None = None,
                     split_fracs: tuple[float, float, float] = (1.0, 0.0, 0.0),
                     threads: int = 1) -> SplitDatasets:
    """Render n_scenes poses from n_cameras ring viewpoints.

    Fully deterministic given `seed` at any thread count: poses are drawn
    sequentially up front, per-frame noise uses per-frame sub-streams, and
    scenes are assembled in index order. Scene split assignment is by
    contiguous index ranges sized from split_fracs. Pose coordinates are
    rounded to f32 before rendering so container round-trips are exact.
    """
    if n_cameras < 1:
        raise ValueError("n_cameras must be >= 1")
    if n_scenes < 0:
        raise ValueError("n_scenes must be >= 0")
    shape.validate(skeleton)
    fracs = np.asarray(split_fracs, dtype=float)
    if fracs.shape != (3,) or np.any(fracs < 0) or abs(fracs.sum() - 1.0) > 1e-9:
        raise ValueError("split_fracs must be three non-negative numbers summing to 1")

    cams = ring_cameras(n_cameras, radius=ring_radius, height=ring_height,
                        look_at=look_at, azimuth_jitter=azimuth_jitter,
                        image_h=height, image_w=width, focal=focal,
                        rng=substream(seed, "cameras"))

    pose_rng = substream(seed, "poses")
    poses = []
    for _ in range(n_scenes):
        p = sample_pose(sampler, shape, skeleton, rng=pose_rng)
        poses.append(Pose(skeleton, p.coords.astype(np.float32).astype(np.float64)))

    def render_scene(i: int) -> Sample:
        frames = []
        for v, cam in enumerate(cams):
            rng = substream(seed, f"noise/{i}/{v}") if noise_sigma > 0 else None
            frames.append(render_depth(poses[i], shape, cam, height, width,
                                       noise_sigma=noise_sigma,
                                       background_depth=background_depth, rng=rng))
        return Sample(i, tuple(frames), poses[i])

    if threads > 1 and n_scenes > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            samples = list(ex.map(render_scene, range(n_scenes)))
    else:
        samples = [render_scene(i) for i in range(n_scenes)]

    b1 = int(round(fracs[0] * n_scenes))
    b2 = min(n_scenes, b1 + int(round(fracs[1] * n_scenes)))
    return SplitDatasets(
        train=Dataset(skeleton, cams, tuple(samples[:b1]), split="train"),
        val=Dataset(skeleton, cams, tuple(samples[b1:b2]), split="val"),
        test=Dataset(skeleton, cams, tuple(samples[b2:]), split="test"),
    )
