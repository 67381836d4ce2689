"""Manifest-driven conversion into the DPC1 container.

Supported source layouts are documented per dataset in `itop.py` and
`ubc3v.py` (field names in the published archives vary by release; these
converters document exactly the revision they support). Conversion is
deterministic: records are processed in sorted id order, so the same
inputs always produce the same bytes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from depthpose.container import write_dataset
from depthpose.core import Dataset

log = logging.getLogger("ddp_ingest")

MAX_COORD_M = 10.0          # poses beyond this are considered corrupt
DEPTH_RANGE_M = (0.3, 15.0)  # plausible person depths after unit conversion


class IngestError(Exception):
    """Source archive missing, malformed, or failing sanity checks."""


@dataclass(frozen=True)
class SourceManifest:
    """What to convert.

    kind: "itop" or "ubc3v"; views: "frontal", "top" or "all" (ITOP only);
    split: which source partition to read; cap: optional limit on the
    number of emitted samples; units: "auto" detects mm vs m by range.
    """

    kind: str
    input_dir: str
    views: str = "all"
    split: str = "train"
    cap: int | None = None
    units: str = "auto"

    def __post_init__(self):
        if self.kind not in ("itop", "ubc3v"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.views not in ("frontal", "top", "all"):
            raise ValueError(f"unknown view selection {self.views!r}")
        if self.cap is not None and self.cap < 1:
            raise ValueError("cap must be >= 1 if set")
        if self.units not in ("auto", "m", "mm"):
            raise ValueError(f"units must be auto, m or mm, got {self.units!r}")


def depth_to_meters(depth: np.ndarray, units: str, what: str) -> np.ndarray:
    """Convert to meters, detecting millimeters by range when units="auto".

    Aborts with diagnostics if the converted values are implausible for a
    person-at-sensor scene.
    """
    depth = np.asarray(depth, dtype=np.float64)
    nz = depth[depth > 0]
    if units == "mm" or (units == "auto" and nz.size and np.median(nz) > 100.0):
        depth = depth / 1000.0
        nz = nz / 1000.0
    if nz.size:
        med = float(np.median(nz))
        if not DEPTH_RANGE_M[0] <= med <= DEPTH_RANGE_M[1]:
            raise IngestError(
                f"{what}: median nonzero depth {med:.3g} m outside plausible "
                f"range {DEPTH_RANGE_M}; pass --units to override detection")
    return depth.astype(np.float32)


def pose_is_plausible(coords: np.ndarray, what: str) -> bool:
    """Finite coordinates at a human scale; rejected samples are logged."""
    if not np.all(np.isfinite(coords)):
        log.warning("%s: rejected (non-finite joint coordinates)", what)
        return False
    if np.abs(coords).max() >= MAX_COORD_M:
        log.warning("%s: rejected (|coord| %.2f m >= %.0f m)",
                    what, float(np.abs(coords).max()), MAX_COORD_M)
        return False
    return True


def convert(manifest: SourceManifest, out_path: str) -> Dataset:
    """Convert the archive named by `manifest` and write DPC1 to out_path.

    Returns the in-memory dataset that was written.
    """
    if manifest.kind == "itop":
        from .itop import load_itop
        ds = load_itop(manifest)
    else:
        from .ubc3v import load_ubc3v
        ds = load_ubc3v(manifest)
    write_dataset(ds, out_path)
    log.info("wrote %s: %d samples, %d frames", out_path, len(ds.samples), ds.frame_count)
    return ds
