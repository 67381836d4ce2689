"""ITOP archive reader.

Supported layout (the published HDF5 release):

    <dir>/ITOP_<view>_<split>_depth_map.h5   with datasets
        "data" (N, 240, 320) depth, meters (float16 in the release)
        "id"   (N,) bytes like b"00_00001"
    <dir>/ITOP_<view>_<split>_labels.h5      with datasets
        "id"                     (N,) matching bytes
        "real_world_coordinates" (N, 15, 3) meters
        "is_valid"               (N,) 0/1

where <view> is "side" (frontal) or "top" and <split> is "train"/"test".
The release publishes no extrinsics, so every view gets identity
extrinsics and its own camera id; ground truth is stored per view in that
camera's frame (which the container treats as the world frame for
single-view use). With views="all", side and top records sharing an id
become one two-view sample; ground truth then comes from the frontal
view. Frames with is_valid == 0 are skipped.
"""

from __future__ import annotations

import os

import h5py
import numpy as np

from depthpose.core import Camera, Dataset, DepthFrame, Pose, Sample, skeleton_preset

from .convert import IngestError, SourceManifest, depth_to_meters, pose_is_plausible

FRAME_H, FRAME_W = 240, 320
# nominal Asus Xtion PRO intrinsics at 320x240
INTRINSICS = {"fx": 285.71, "fy": 285.71, "cx": 160.0, "cy": 120.0}
VIEW_NAMES = {"frontal": "side", "top": "top"}


def _identity_camera(cam_id: str) -> Camera:
    return Camera(cam_id, np.hstack([np.eye(3), np.zeros((3, 1))]), **INTRINSICS)


def _load_view(manifest: SourceManifest, view: str) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    name = VIEW_NAMES[view]
    depth_path = os.path.join(manifest.input_dir, f"ITOP_{name}_{manifest.split}_depth_map.h5")
    labels_path = os.path.join(manifest.input_dir, f"ITOP_{name}_{manifest.split}_labels.h5")
    for p in (depth_path, labels_path):
        if not os.path.exists(p):
            raise IngestError(f"missing source file {p}")

    records: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    with h5py.File(depth_path, "r") as fd, h5py.File(labels_path, "r") as fl:
        depth_ids = [i.decode() if isinstance(i, bytes) else str(i) for i in fd["id"][:]]
        label_ids = [i.decode() if isinstance(i, bytes) else str(i) for i in fl["id"][:]]
        label_index = {i: k for k, i in enumerate(label_ids)}
        coords_all = fl["real_world_coordinates"][:]
        valid_all = fl["is_valid"][:] if "is_valid" in fl else np.ones(len(label_ids))
        data = fd["data"]
        for k, rec_id in enumerate(depth_ids):
            j = label_index.get(rec_id)
            if j is None or not valid_all[j]:
                continue
            depth = depth_to_meters(data[k], manifest.units, f"itop {rec_id}")
            if depth.shape != (FRAME_H, FRAME_W):
                raise IngestError(f"itop {rec_id}: frame shape {depth.shape}, "
                                  f"expected {(FRAME_H, FRAME_W)}")
            coords = np.asarray(coords_all[j], dtype=np.float64)
            if coords.shape != (15, 3):
                raise IngestError(f"itop {rec_id}: pose shape {coords.shape}, expected (15, 3)")
            if not pose_is_plausible(coords, f"itop {rec_id}"):
                continue
            records[rec_id] = (depth, coords.astype(np.float32).astype(np.float64))
    return records


def load_itop(manifest: SourceManifest) -> Dataset:
    sk = skeleton_preset("itop15")
    views = ["frontal", "top"] if manifest.views == "all" else [manifest.views]
    per_view = {v: _load_view(manifest, v) for v in views}

    if manifest.views == "all":
        ids = sorted(set(per_view["frontal"]) & set(per_view["top"]))
        dropped = (len(per_view["frontal"]) - len(ids)) + (len(per_view["top"]) - len(ids))
        if dropped:
            import logging
            logging.getLogger("ddp_ingest").warning(
                "itop: dropped %d unpaired single-view records", dropped)
    else:
        ids = sorted(per_view[views[0]])

    if manifest.cap is not None:
        ids = ids[:manifest.cap]

    cameras = tuple(_identity_camera(VIEW_NAMES[v]) for v in views)
    samples = []
    for n, rec_id in enumerate(ids):
        frames = tuple(DepthFrame(VIEW_NAMES[v], per_view[v][rec_id][0]) for v in views)
        coords = per_view[views[0]][rec_id][1]
        samples.append(Sample(n, frames, Pose(sk, coords)))
    return Dataset(sk, cameras, tuple(samples), split=manifest.split)
