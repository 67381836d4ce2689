"""Depth-map pre-processing: foreground thresholding around the person's
mean depth, morphological smoothing, bilinear resize, [0,1] scaling.

The segmentation step is optional at train/eval time; resize + scaling
always run so the network input contract holds.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import DepthFrame


@dataclass(frozen=True)
class PreprocConfig:
    depth_halfwidth: float = 0.5      # meters around the estimated person depth
    morph_kernel: int = 3             # odd square structuring element, pixels
    target_h: int = 100
    target_w: int = 100
    center_window_frac: float = 0.25  # fraction of min(H, W) used to estimate person depth

    def __post_init__(self):
        if self.depth_halfwidth <= 0:
            raise ValueError("depth_halfwidth must be > 0")
        if self.morph_kernel < 1 or self.morph_kernel % 2 == 0:
            raise ValueError("morph_kernel must be odd and >= 1")
        if self.target_h < 8 or self.target_w < 8:
            raise ValueError("target size must be >= 8")
        if not 0 < self.center_window_frac <= 1:
            raise ValueError("center_window_frac must be in (0, 1]")


def morph_close(frame: DepthFrame, kernel: int) -> DepthFrame:
    """Close the foreground mask (dilate then erode) with a square element.

    Pixels the closing adds are re-filled with the depth of the nearest
    originally-nonzero pixel. Idempotent: closing an already-closed mask
    changes nothing.
    """
    if kernel % 2 == 0 or kernel < 1:
        raise ValueError("kernel must be odd and >= 1")
    depth = np.asarray(frame.depth, dtype=np.float32)
    mask = depth > 0
    if kernel == 1 or not mask.any():
        return frame

    structure = np.ones((kernel, kernel), dtype=bool)
    pad = kernel  # zero padding so the closing sees an empty border
    padded = np.pad(mask, pad)
    closed = ndimage.binary_erosion(ndimage.binary_dilation(padded, structure), structure)
    closed = closed[pad:-pad, pad:-pad]

    added = closed & ~mask
    out = np.where(closed, depth, 0.0).astype(np.float32)
    if added.any():
        _, (iy, ix) = ndimage.distance_transform_edt(~mask, return_indices=True)
        out[added] = depth[iy[added], ix[added]]
    return DepthFrame(frame.camera_id, out)


def segment_foreground(frame: DepthFrame, cfg: PreprocConfig) -> DepthFrame:
    """Keep only depths near the person and smooth the resulting mask.

    The person's depth is the mean nonzero depth inside a centered window
    (the person is assumed approximately centered); pixels outside
    [person - halfwidth, person + halfwidth] are zeroed, then the mask is
    morphologically closed. An all-zero frame is returned unchanged with
    a warning.
    """
    depth = np.asarray(frame.depth, dtype=np.float32)
    nz = depth > 0
    if not nz.any():
        warnings.warn("segment_foreground: all-zero frame left unchanged", RuntimeWarning)
        return frame

    h, w = depth.shape
    side = max(1, int(round(cfg.center_window_frac * min(h, w))))
    r0, c0 = (h - side) // 2, (w - side) // 2
    window = depth[r0:r0 + side, c0:c0 + side]
    win_nz = window[window > 0]
    # fall back to the whole frame if the window sees no person at all
    person = float(win_nz.mean()) if win_nz.size else float(depth[nz].mean())

    keep = nz & (depth >= person - cfg.depth_halfwidth) & (depth <= person + cfg.depth_halfwidth)
    cut = DepthFrame(frame.camera_id, np.where(keep, depth, 0.0).astype(np.float32))
    return morph_close(cut, cfg.morph_kernel)


def resize_bilinear(img: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-centered sampling, edges clamped."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape

    def _axis(n_src, n_dst):
        src = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        src = np.clip(src, 0.0, n_src - 1.0)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_src - 1)
        return i0, i1, src - i0

    y0, y1, wy = _axis(h, target_h)
    x0, x1, wx = _axis(w, target_w)
    wy = wy[:, None]
    wx = wx[None, :]
    return ((1 - wy) * (1 - wx) * img[np.ix_(y0, x0)]
            + (1 - wy) * wx * img[np.ix_(y0, x1)]
            + wy * (1 - wx) * img[np.ix_(y1, x0)]
            + wy * wx * img[np.ix_(y1, x1)])


def resize_and_scale(frame: DepthFrame, cfg: PreprocConfig,
                     scale_max: float | None = None) -> np.ndarray:
    """Resize to (target_h, target_w) and scale depths into [0, 1].

    Scaling divides by the frame's max depth by default; pass `scale_max`
    to use a dataset-global maximum instead. Zeros stay zero. Raises on an
    all-zero frame.
    """
    depth = np.asarray(frame.depth, dtype=np.float64)
    peak = float(depth.max()) if scale_max is None else float(scale_max)
    if peak <= 0:
        raise ValueError("cannot scale an all-zero depth frame")
    out = resize_bilinear(depth, cfg.target_h, cfg.target_w) / peak
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def preprocess_frame(frame: DepthFrame, cfg: PreprocConfig, segment: bool = False,
                     scale_max: float | None = None) -> np.ndarray:
    """Full input pipeline: optional segmentation, then resize + scale."""
    if segment:
        frame = segment_foreground(frame, cfg)
    return resize_and_scale(frame, cfg, scale_max=scale_max)
