"""UBC3V archive reader.

Supported layout (one section directory per recording; the release splits
each partition into numbered sections):

    <dir>/<split>/<section>/groundtruth.json
    <dir>/<split>/<section>/images/depthRender/Cam<V>/mayaProject.<NNNNNN>.png

groundtruth.json:
    {"frames": [
        {"id": 1,
         "joints": [[x, y, z] * 18],                  # world frame, cm
         "cameras": {"Cam1": {"position": [x, y, z],  # world, cm
                              "rotation": [w, x, y, z]},  # camera-to-world
                     "Cam2": ..., "Cam3": ...}},
        ...]}

Depth PNGs are 16-bit grayscale, value = depth in millimeters, 0 = no
return, 512 x 424 pixels. Joint order matches the 18-joint skeleton
preset. Field names vary across release revisions; this is the revision
the converter supports.
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from depthpose.core import Camera, Dataset, DepthFrame, Pose, Sample, skeleton_preset

from .convert import IngestError, SourceManifest, depth_to_meters, pose_is_plausible

FRAME_H, FRAME_W = 424, 512
# nominal Kinect-2 depth intrinsics at 512x424
INTRINSICS = {"fx": 365.0, "fy": 365.0, "cx": 256.0, "cy": 212.0}


def _quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    n = np.sqrt(w * w + x * x + y * y + z * z)
    if n == 0:
        raise IngestError("zero quaternion in camera rotation")
    w, x, y, z = w / n, x / n, y / n, z / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _camera_from_json(cam_id: str, info: dict) -> Camera:
    # stored rotation/position are camera-to-world; invert for extrinsics
    r_cw = _quat_to_matrix(info["rotation"])
    pos_m = np.asarray(info["position"], dtype=np.float64) / 100.0
    r_wc = r_cw.T
    t = -r_wc @ pos_m
    return Camera(cam_id, np.hstack([r_wc, t[:, None]]), **INTRINSICS)


def _read_depth_png(path: str, units: str) -> np.ndarray:
    if not os.path.exists(path):
        raise IngestError(f"missing depth image {path}")
    img = np.asarray(Image.open(path), dtype=np.float64)
    if img.shape != (FRAME_H, FRAME_W):
        raise IngestError(f"{path}: frame shape {img.shape}, expected {(FRAME_H, FRAME_W)}")
    return depth_to_meters(img, units, path)


def load_ubc3v(manifest: SourceManifest) -> Dataset:
    sk = skeleton_preset("ubc3v18")
    split_dir = os.path.join(manifest.input_dir, manifest.split)
    if not os.path.isdir(split_dir):
        raise IngestError(f"missing split directory {split_dir}")
    sections = sorted(d for d in os.listdir(split_dir)
                      if os.path.isdir(os.path.join(split_dir, d)))
    if not sections:
        raise IngestError(f"no section directories under {split_dir}")

    samples = []
    camera_list: list[Camera] = []
    # the virtual cameras move between postures, so camera identity is
    # keyed on the exact extrinsics; repeated viewpoints are reused
    camera_by_pose: dict[bytes, Camera] = {}
    scene = 0
    for section in sections:
        gt_path = os.path.join(split_dir, section, "groundtruth.json")
        if not os.path.exists(gt_path):
            raise IngestError(f"missing {gt_path}")
        with open(gt_path) as f:
            gt = json.load(f)
        for frame in sorted(gt["frames"], key=lambda fr: fr["id"]):
            if manifest.cap is not None and len(samples) >= manifest.cap:
                break
            joints_cm = np.asarray(frame["joints"], dtype=np.float64)
            if joints_cm.shape != (18, 3):
                raise IngestError(f"{gt_path} frame {frame['id']}: "
                                  f"pose shape {joints_cm.shape}, expected (18, 3)")
            coords = joints_cm / 100.0
            if not pose_is_plausible(coords, f"ubc3v {section}/{frame['id']}"):
                continue
            frames = []
            for base_name in sorted(frame["cameras"]):
                cam = _camera_from_json(base_name, frame["cameras"][base_name])
                key = cam.extrinsics.tobytes()
                if key not in camera_by_pose:
                    unique = Camera(f"{base_name}@{len(camera_list)}",
                                    cam.extrinsics, **INTRINSICS)
                    camera_by_pose[key] = unique
                    camera_list.append(unique)
                cam = camera_by_pose[key]
                png = os.path.join(split_dir, section, "images", "depthRender",
                                   base_name, f"mayaProject.{frame['id']:06d}.png")
                frames.append(DepthFrame(cam.cam_id, _read_depth_png(png, manifest.units)))
            samples.append(Sample(scene, tuple(frames),
                                  Pose(sk, coords.astype(np.float32).astype(np.float64))))
            scene += 1
        if manifest.cap is not None and len(samples) >= manifest.cap:
            break
    return Dataset(sk, tuple(camera_list), tuple(samples), split=manifest.split)
