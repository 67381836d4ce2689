"""DPC1 dataset container: a bit-exact binary file format.

Layout (all little-endian):

    magic "DPC1" | u32 version=1 | u32 header_len | UTF-8 JSON header
    per sample:
        u32 scene_id | u8 view_count
        per view: u16 camera_index | H*W f32 depth (meters, row-major)
        3J f32 world-frame pose (joint-major)
        u32 CRC32 of this sample record
    u32 CRC32 of the whole payload (all sample records)

The JSON header carries the skeleton (names, parents), the camera list
(id, 3x4 extrinsics row-major f64, intrinsics fx/fy/cx/cy f64), the
sample count, the per-frame H and W, and the split tag. Per-sample CRCs
let a corrupted record be reported by sample index; the trailing CRC
covers the payload as a whole.
"""

from __future__ import annotations

import json
import struct
import zlib
from typing import BinaryIO

import numpy as np

from .core import Camera, Dataset, DepthFrame, Pose, Sample, Skeleton

MAGIC = b"DPC1"
VERSION = 1


class ContainerError(Exception):
    """Base class for DPC1 read failures."""


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class ChecksumError(ContainerError):
    def __init__(self, message: str, sample_index: int | None = None):
        super().__init__(message)
        self.sample_index = sample_index


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedError(f"truncated file while reading {what} "
                             f"(wanted {n} bytes, got {len(buf)})")
    return buf


def _header_dict(ds: Dataset, height: int, width: int) -> dict:
    return {
        "skeleton": {
            "name": ds.skeleton.name,
            "joints": list(ds.skeleton.joints),
            "parents": list(ds.skeleton.parents),
        },
        "cameras": [
            {
                "id": c.cam_id,
                "extrinsics": [float(x) for x in c.extrinsics.reshape(-1)],
                "intrinsics": {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy},
            }
            for c in ds.cameras
        ],
        "samples": len(ds.samples),
        "height": height,
        "width": width,
        "split": ds.split,
    }


def write_dataset(ds: Dataset, path: str) -> None:
    """Write `ds` to `path` in DPC1 format.

    All frames must share one H x W; an empty dataset writes H = W = 0.
    Depth and poses are truncated to f32 (they already are f32 for any
    dataset produced by this toolkit, so write/read round-trips exactly).
    """
    shapes = {f.shape for s in ds.samples for f in s.frames}
    if len(shapes) > 1:
        raise ValueError(f"frames must share one shape, got {sorted(shapes)}")
    height, width = shapes.pop() if shapes else (0, 0)

    cam_index = {c.cam_id: i for i, c in enumerate(ds.cameras)}
    header = json.dumps(_header_dict(ds, height, width),
                        sort_keys=True, separators=(",", ":")).encode("utf-8")

    payload_crc = 0
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for s in ds.samples:
            parts = [struct.pack("<IB", s.scene_id, len(s.frames))]
            for frame in s.frames:
                parts.append(struct.pack("<H", cam_index[frame.camera_id]))
                parts.append(np.ascontiguousarray(frame.depth, dtype="<f4").tobytes())
            parts.append(s.pose.coords.reshape(-1).astype("<f4").tobytes())
            record = b"".join(parts)
            record += struct.pack("<I", zlib.crc32(record))
            payload_crc = zlib.crc32(record, payload_crc)
            f.write(record)
        f.write(struct.pack("<I", payload_crc))


def read_dataset(path: str) -> Dataset:
    """Read a DPC1 file back into a Dataset, verifying all checksums."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise VersionError(f"unsupported format version {version}, expected {VERSION}")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        try:
            header = json.loads(_read_exact(f, hlen, "JSON header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ContainerError(f"invalid JSON header: {e}") from e

        skeleton = Skeleton(
            header["skeleton"]["name"],
            tuple(header["skeleton"]["joints"]),
            tuple(header["skeleton"]["parents"]),
        )
        cameras = tuple(
            Camera(
                c["id"],
                np.asarray(c["extrinsics"], dtype=np.float64).reshape(3, 4),
                fx=c["intrinsics"]["fx"], fy=c["intrinsics"]["fy"],
                cx=c["intrinsics"]["cx"], cy=c["intrinsics"]["cy"],
            )
            for c in header["cameras"]
        )
        n_samples = int(header["samples"])
        height, width = int(header["height"]), int(header["width"])
        j3 = 3 * skeleton.joint_count
        frame_bytes = height * width * 4

        payload_crc = 0
        samples = []
        for i in range(n_samples):
            record = _read_exact(f, 5, f"sample {i} header")
            scene_id, n_views = struct.unpack("<IB", record)
            frames = []
            for _ in range(n_views):
                view = _read_exact(f, 2 + frame_bytes, f"sample {i} view")
                record += view
                (cam_idx,) = struct.unpack("<H", view[:2])
                if cam_idx >= len(cameras):
                    raise ContainerError(f"sample {i}: camera index {cam_idx} out of range")
                depth = np.frombuffer(view[2:], dtype="<f4").reshape(height, width)
                frames.append(DepthFrame(cameras[cam_idx].cam_id, depth))
            pose_bytes = _read_exact(f, j3 * 4, f"sample {i} pose")
            record += pose_bytes
            (stored_crc,) = struct.unpack("<I", _read_exact(f, 4, f"sample {i} checksum"))
            if zlib.crc32(record) != stored_crc:
                raise ChecksumError(f"checksum mismatch in sample {i}", sample_index=i)
            payload_crc = zlib.crc32(record + struct.pack("<I", stored_crc), payload_crc)
            coords = np.frombuffer(pose_bytes, dtype="<f4").astype(np.float64)
            samples.append(Sample(
                scene_id,
                tuple(frames),
                Pose(skeleton, coords.reshape(-1, 3), frame="world"),
            ))

        (stored_payload_crc,) = struct.unpack("<I", _read_exact(f, 4, "payload checksum"))
        if payload_crc != stored_payload_crc:
            raise ChecksumError("payload checksum mismatch", sample_index=None)

    return Dataset(skeleton, cameras, tuple(samples), split=str(header["split"]))
