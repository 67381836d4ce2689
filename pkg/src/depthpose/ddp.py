"""Pose estimation as a learned combination of prototype poses.

The network maps a depth map to a weight vector w; the pose estimate is
the matrix-vector product of the prototype dictionary with w, computed in
normalized pose space and de-normalized to meters. Training minimizes

    (1 - alpha) * L_R(C @ w, p) + alpha * ||w||_1

where L_R sums a smooth-L1 penalty over the 3J residual components. The
baseline head drops the dictionary and regresses the 3J coordinates
directly (its loss is L_R alone). Per-view estimates registered to the
world frame can be fused as a convex combination.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import net
from .container import BadMagicError, ChecksumError, ContainerError, TruncatedError, VersionError
from .core import (Camera, Dataset, DepthFrame, Normalizer, Pose, Skeleton,
                   denormalize, devectorize, fit_normalizer, normalize, vectorize)
from .preproc import PreprocConfig, preprocess_frame
from .prototypes import PrototypeSet, build_prototypes
from .util import single_thread_blas, substream

log = logging.getLogger(__name__)

MODEL_MAGIC = b"DPM1"
MODEL_VERSION = 1

# hyperparameters chosen by the statistical selection procedure, per
# dataset style: (K, sigma2, alpha)
HYPERPARAM_PRESETS = {
    "ubc3v": (100, 0.8, 0.01),
    "itop": (70, 1.0, 0.08),
    "mixed": (140, 1.0, 0.01),
}


def smooth_l1(r, sigma2: float):
    """Smooth-L1 penalty: 0.5*s2*r^2 if |r| < 1/s2, else |r| - 0.5/s2.

    Quadratic near zero, linear beyond the 1/sigma2 breakpoint, continuous
    and C1 at the boundary. Accepts scalars or arrays.
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be > 0")
    r = np.asarray(r, dtype=np.float64)
    inner = np.abs(r) < 1.0 / sigma2
    out = np.where(inner, 0.5 * sigma2 * r * r, np.abs(r) - 0.5 / sigma2)
    return float(out) if out.ndim == 0 else out


def smooth_l1_grad(r, sigma2: float):
    """d/dr of `smooth_l1`: sigma2*r inside the breakpoint, sign(r) outside."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be > 0")
    r = np.asarray(r, dtype=np.float64)
    inner = np.abs(r) < 1.0 / sigma2
    out = np.where(inner, sigma2 * r, np.sign(r))
    return float(out) if out.ndim == 0 else out


def residual_loss(p_hat: np.ndarray, p: np.ndarray, sigma2: float) -> float:
    """Sum of smooth-L1 penalties over the 3J residual components."""
    p_hat = np.asarray(p_hat, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if p_hat.shape != p.shape:
        raise ValueError(f"length mismatch: {p_hat.shape} vs {p.shape}")
    return float(smooth_l1(p - p_hat, sigma2).sum())


def reconstruct_pose(prototypes: PrototypeSet | np.ndarray, w: np.ndarray) -> np.ndarray:
    """Normalized-space pose vector: the weighted sum of prototype columns."""
    c = prototypes.matrix if isinstance(prototypes, PrototypeSet) else np.asarray(prototypes)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (c.shape[1],):
        raise ValueError(f"weight length {w.shape} does not match K={c.shape[1]}")
    return c @ w


def ddp_loss(w: np.ndarray, prototypes: PrototypeSet | np.ndarray, p: np.ndarray,
             alpha: float, sigma2: float) -> tuple[float, np.ndarray]:
    """Composite loss and its gradient with respect to the weights.

    loss = (1-alpha) * L_R(C@w, p) + alpha * ||w||_1. The L1 subgradient
    at w=0 is taken as 0.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    c = prototypes.matrix if isinstance(prototypes, PrototypeSet) else np.asarray(prototypes)
    w = np.asarray(w, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if c.shape[0] != p.shape[0]:
        raise ValueError("prototype rows must match pose vector length")
    r = p - c @ w
    loss = (1.0 - alpha) * smooth_l1(r, sigma2).sum() + alpha * np.abs(w).sum()
    grad = (1.0 - alpha) * (-(c.T @ smooth_l1_grad(r, sigma2))) + alpha * np.sign(w)
    return float(loss), grad


def _batch_head_loss(out: np.ndarray, y: np.ndarray, c: np.ndarray | None,
                     alpha: float, sigma2: float) -> tuple[float, np.ndarray]:
    """Mean per-sample loss over a batch and the gradient w.r.t. `out`.

    With a prototype matrix `c` this is the composite loss on the weight
    outputs; with c=None (baseline) it is the residual loss on the raw
    coordinate outputs.
    """
    out64 = out.astype(np.float64)
    b = out64.shape[0]
    if c is None:
        r = y - out64
        loss = smooth_l1(r, sigma2).sum() / b
        dout = -smooth_l1_grad(r, sigma2) / b
    else:
        r = y - out64 @ c.T  # (B, 3J)
        psi = smooth_l1_grad(r, sigma2)
        loss = ((1.0 - alpha) * smooth_l1(r, sigma2).sum()
                + alpha * np.abs(out64).sum()) / b
        dout = ((1.0 - alpha) * (-(psi @ c)) + alpha * np.sign(out64)) / b
    return float(loss), dout.astype(np.float32)


@dataclass(frozen=True)
class TrainConfig:
    """Training knobs. `head` is "ddp" (prototype weights) or "baseline"
    (direct 3J regression, no dictionary, no L1 term)."""

    k: int = 16
    sigma2: float = 1.0
    alpha: float = 0.01
    lr0: float = 1e-3
    epochs: int = 50
    batch: int = 64
    momentum: float = 0.9
    seed: int = 0
    head: str = "ddp"
    preset: str = "ddp-desk"
    segment: bool = False
    preproc: PreprocConfig | None = None   # None: derive targets from the preset input
    lr_decay_at: tuple[float, float] = (0.6, 0.85)
    lr_decay: float = 0.1

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.head not in ("ddp", "baseline"):
            raise ValueError(f"unknown head {self.head!r}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "k", "sigma2", "alpha", "lr0", "epochs", "batch", "momentum",
            "seed", "head", "preset", "segment", "lr_decay", "lr_decay_at")}
        d["lr_decay_at"] = list(d["lr_decay_at"])
        if self.preproc is not None:
            d["preproc"] = {k: getattr(self.preproc, k) for k in (
                "depth_halfwidth", "morph_kernel", "target_h", "target_w",
                "center_window_frac")}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "preproc" in d and d["preproc"] is not None:
            d["preproc"] = PreprocConfig(**d["preproc"])
        if "lr_decay_at" in d:
            d["lr_decay_at"] = tuple(d["lr_decay_at"])
        return cls(**d)


@dataclass(frozen=True)
class FusionWeights:
    """Per-camera fusion weights: non-negative, summing to 1."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size < 1:
            raise ValueError("weights must be a nonempty 1-D vector")
        if np.any(v < 0):
            raise ValueError("fusion weights must be non-negative")
        if abs(v.sum() - 1.0) > 1e-9:
            raise ValueError(f"fusion weights must sum to 1, got {v.sum()!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def equal(cls, n: int) -> "FusionWeights":
        return cls(np.full(n, 1.0 / n))


@dataclass
class TrainedModel:
    """Everything needed for inference plus training metadata."""

    spec: net.NetworkSpec
    state: net.NetworkState
    head: str
    skeleton: Skeleton
    normalizer: Normalizer
    prototypes: PrototypeSet | None
    config: TrainConfig
    history: dict

    def __post_init__(self):
        width = self.spec.output_units
        if self.head == "ddp":
            if self.prototypes is None:
                raise ValueError("ddp head requires a prototype set")
            if width != self.prototypes.k:
                raise ValueError(f"output width {width} != K={self.prototypes.k}")
        else:
            if width != 3 * self.skeleton.joint_count:
                raise ValueError(f"baseline output width {width} != 3J")


def _resolved_preproc(cfg: TrainConfig, spec: net.NetworkSpec) -> PreprocConfig:
    if cfg.preproc is not None:
        return cfg.preproc
    h, w, _ = spec.input_shape
    return PreprocConfig(target_h=h, target_w=w)


def _collect_views(ds: Dataset, pp: PreprocConfig, segment: bool):
    """Per-view network inputs and camera-frame pose vectors."""
    xs, ys = [], []
    for s in ds.samples:
        for f in s.frames:
            cam = ds.camera(f.camera_id)
            xs.append(preprocess_frame(f, pp, segment=segment))
            ys.append(cam.world_to_camera(s.pose.coords).reshape(-1))
    x = np.asarray(xs, dtype=np.float32)[..., None]
    y = np.asarray(ys, dtype=np.float64)
    return x, y


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    lr = cfg.lr0
    for frac in cfg.lr_decay_at:
        if epoch >= int(np.floor(frac * cfg.epochs)):
            lr *= cfg.lr_decay
    return lr


def train(dataset: Dataset, cfg: TrainConfig, val_dataset: Dataset | None = None,
          prototypes: PrototypeSet | None = None, threads: int = 1) -> TrainedModel:
    """Train a model on the per-view samples of `dataset`.

    Pipeline per view: preprocess -> forward -> head loss -> backward ->
    SGD step, with the step-decay learning-rate schedule. Every view is an
    independent training sample; targets are camera-frame pose vectors,
    standardized by a normalizer fit on the training targets. Deterministic
    given cfg.seed at any thread count.
    """
    if not dataset.samples:
        raise ValueError("training dataset has no samples")
    skeleton = dataset.skeleton
    j3 = 3 * skeleton.joint_count

    out_width = cfg.k if cfg.head == "ddp" else j3
    spec = net.preset(cfg.preset, out_width)
    pp = _resolved_preproc(cfg, spec)

    x, targets = _collect_views(dataset, pp, cfg.segment)
    n = x.shape[0]
    normalizer = fit_normalizer(targets if n >= 2 else np.vstack([targets, targets]))
    y = normalize(targets, normalizer)

    if cfg.head == "ddp":
        if prototypes is None:
            proto_seed = int(substream(cfg.seed, "prototypes").integers(2 ** 32))
            prototypes = build_prototypes(y, cfg.k, skeleton, normalizer, seed=proto_seed)
        elif prototypes.k != cfg.k:
            raise ValueError(f"prototype set has K={prototypes.k}, config wants K={cfg.k}")
        c = prototypes.matrix
    else:
        prototypes = None
        c = None

    state = net.init_network(spec, seed=int(substream(cfg.seed, "init").integers(2 ** 32)))
    shuffle_rng = substream(cfg.seed, "shuffle")
    dropout_rng = substream(cfg.seed, "dropout")

    x_val = y_val = None
    if val_dataset is not None and val_dataset.samples:
        x_val, t_val = _collect_views(val_dataset, pp, cfg.segment)
        y_val = normalize(t_val, normalizer)

    history = {"train_loss": [], "val_loss": [], "val_mse": [], "lr": []}
    with single_thread_blas():
        for epoch in range(cfg.epochs):
            lr = _epoch_lr(cfg, epoch)
            perm = shuffle_rng.permutation(n)
            total = 0.0
            for s in range(0, n, cfg.batch):
                idx = perm[s:s + cfg.batch]
                out, cache = net.forward(state, x[idx], mode="train",
                                         rng=dropout_rng, threads=threads)
                loss, dout = _batch_head_loss(out, y[idx], c, cfg.alpha, cfg.sigma2)
                grads, _ = net.backward(state, cache, dout, threads=threads)
                net.sgd_step(state, grads, lr, cfg.momentum)
                total += loss * len(idx)
            history["train_loss"].append(total / n)
            history["lr"].append(lr)

            if x_val is not None:
                vloss, vmse = _validate(state, x_val, y_val, c, cfg, threads)
                history["val_loss"].append(vloss)
                history["val_mse"].append(vmse)
                log.info("epoch %d/%d lr %.2e train %.5f val %.5f mse %.5f",
                         epoch + 1, cfg.epochs, lr, history["train_loss"][-1], vloss, vmse)
            else:
                log.info("epoch %d/%d lr %.2e train %.5f",
                         epoch + 1, cfg.epochs, lr, history["train_loss"][-1])

    cfg = replace(cfg, preproc=pp)
    return TrainedModel(spec, state, cfg.head, skeleton, normalizer,
                        prototypes, cfg, history)


def _validate(state, x_val, y_val, c, cfg, threads, batch: int = 256):
    losses = 0.0
    sq = 0.0
    n = x_val.shape[0]
    for s in range(0, n, batch):
        out, _ = net.forward(state, x_val[s:s + batch], mode="eval", threads=threads)
        out64 = out.astype(np.float64)
        p_hat = out64 if c is None else out64 @ c.T
        r = y_val[s:s + batch] - p_hat
        if c is None:
            losses += smooth_l1(r, cfg.sigma2).sum()
        else:
            losses += ((1.0 - cfg.alpha) * smooth_l1(r, cfg.sigma2).sum()
                       + cfg.alpha * np.abs(out64).sum())
        sq += (r * r).sum()
    return losses / n, sq / (n * y_val.shape[1])


def predict_vector(model: TrainedModel, image: np.ndarray) -> np.ndarray:
    """Normalized-space pose vector for one preprocessed input image."""
    out, _ = net.forward(model.state, image[None, ..., None], mode="eval")
    out64 = out[0].astype(np.float64)
    if model.head == "ddp":
        return reconstruct_pose(model.prototypes, out64)
    return out64


def infer(model: TrainedModel, frame: DepthFrame) -> Pose:
    """Estimate the metric camera-frame pose for one depth frame."""
    pp = _resolved_preproc(model.config, model.spec)
    image = preprocess_frame(frame, pp, segment=model.config.segment)
    vec = denormalize(predict_vector(model, image), model.normalizer)
    return devectorize(vec, model.skeleton, frame=f"camera:{frame.camera_id}")


def infer_batch(model: TrainedModel, frames: Sequence[DepthFrame],
                threads: int = 1, batch: int = 256) -> list[Pose]:
    """`infer` over many frames with batched forward passes."""
    pp = _resolved_preproc(model.config, model.spec)
    images = np.asarray([preprocess_frame(f, pp, segment=model.config.segment)
                         for f in frames], dtype=np.float32)[..., None]
    poses: list[Pose] = []
    with single_thread_blas():
        for s in range(0, images.shape[0], batch):
            out, _ = net.forward(model.state, images[s:s + batch], mode="eval", threads=threads)
            out64 = out.astype(np.float64)
            vecs = out64 @ model.prototypes.matrix.T if model.head == "ddp" else out64
            for row, frame in zip(vecs, frames[s:s + batch]):
                vec = denormalize(row, model.normalizer)
                poses.append(devectorize(vec, model.skeleton, frame=f"camera:{frame.camera_id}"))
    return poses


def camera_to_world(pose: Pose, cam: Camera) -> Pose:
    """Register a camera-frame pose into the world frame."""
    return Pose(pose.skeleton, cam.camera_to_world(pose.coords), frame="world")


def fuse_multiview(poses: Sequence[Pose], weights: FusionWeights) -> Pose:
    """Convex combination of per-view world-frame estimates, per joint."""
    if not poses:
        raise ValueError("need at least one pose to fuse")
    if len(poses) != weights.values.size:
        raise ValueError(f"{len(poses)} poses but {weights.values.size} weights")
    skeleton = poses[0].skeleton
    for p in poses:
        if p.skeleton.joints != skeleton.joints:
            raise ValueError("poses must share one skeleton")
        if p.frame != "world":
            raise ValueError("fusion expects world-frame poses")
    coords = sum(w * p.coords for w, p in zip(weights.values, poses))
    return Pose(skeleton, coords, frame="world")


# ---------------------------------------------------------------------------
# DPM1 model file


def _spec_to_json(spec: net.NetworkSpec) -> dict:
    layers = []
    for layer in spec.layers:
        if isinstance(layer, net.Conv):
            layers.append({"type": "conv", "kh": layer.kh, "kw": layer.kw,
                           "out": layer.out_channels})
        elif isinstance(layer, net.MaxPool):
            layers.append({"type": "pool", "size": layer.size})
        elif isinstance(layer, net.ReLU):
            layers.append({"type": "relu"})
        elif isinstance(layer, net.FullyConnected):
            layers.append({"type": "fc", "units": layer.units})
        elif isinstance(layer, net.Dropout):
            layers.append({"type": "dropout", "rate": layer.rate})
    return {"input": list(spec.input_shape), "layers": layers}


def _spec_from_json(d: dict) -> net.NetworkSpec:
    layers: list[net.LayerSpec] = []
    for item in d["layers"]:
        t = item["type"]
        if t == "conv":
            layers.append(net.Conv(item["kh"], item["kw"], item["out"]))
        elif t == "pool":
            layers.append(net.MaxPool(item["size"]))
        elif t == "relu":
            layers.append(net.ReLU())
        elif t == "fc":
            layers.append(net.FullyConnected(item["units"]))
        elif t == "dropout":
            layers.append(net.Dropout(item["rate"]))
        else:
            raise ContainerError(f"unknown layer type {t!r} in model file")
    return net.NetworkSpec(tuple(d["input"]), tuple(layers))


def save_model(model: TrainedModel, path: str) -> None:
    """Write the model in DPM1 format.

    Layout: magic "DPM1" | u32 version | u32 length-prefixed JSON metadata
    | f32 LE sections (prototype matrix row-major, then each layer's
    weights and biases) | u32 CRC32 of the section bytes. Momentum buffers
    are not persisted.
    """
    meta = {
        "head": model.head,
        "skeleton": {"name": model.skeleton.name,
                     "joints": list(model.skeleton.joints),
                     "parents": list(model.skeleton.parents)},
        "normalizer": {"mean": model.normalizer.mean.tolist(),
                       "std": model.normalizer.std.tolist()},
        "spec": _spec_to_json(model.spec),
        "k": model.prototypes.k if model.prototypes is not None else None,
        "config": model.config.to_dict(),
        "history": model.history,
    }
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    sections = []
    if model.prototypes is not None:
        sections.append(model.prototypes.matrix.astype("<f4").tobytes())
    for p in model.state.params:
        if p is not None:
            sections.append(np.ascontiguousarray(p["w"], dtype="<f4").tobytes())
            sections.append(np.ascontiguousarray(p["b"], dtype="<f4").tobytes())
    payload = b"".join(sections)
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", MODEL_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def load_model(path: str) -> TrainedModel:
    """Read a DPM1 model file; momentum buffers are re-initialized to zero."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12:
        raise TruncatedError("model file too short")
    if data[:4] != MODEL_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MODEL_MAGIC!r}")
    (version,) = struct.unpack("<I", data[4:8])
    if version != MODEL_VERSION:
        raise VersionError(f"unsupported model version {version}")
    (hlen,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + hlen + 4:
        raise TruncatedError("model file truncated in header")
    meta = json.loads(data[12:12 + hlen].decode("utf-8"))
    payload = data[12 + hlen:-4]
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != stored_crc:
        raise ChecksumError("model payload checksum mismatch")

    skeleton = Skeleton(meta["skeleton"]["name"], tuple(meta["skeleton"]["joints"]),
                        tuple(meta["skeleton"]["parents"]))
    normalizer = Normalizer(np.asarray(meta["normalizer"]["mean"]),
                            np.asarray(meta["normalizer"]["std"]))
    spec = _spec_from_json(meta["spec"])
    cfg = TrainConfig.from_dict(meta["config"])

    offset = 0

    def take(count: int) -> np.ndarray:
        nonlocal offset
        nbytes = count * 4
        if offset + nbytes > len(payload):
            raise TruncatedError("model payload shorter than declared sections")
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype="<f4")
        offset += nbytes
        return arr

    prototypes = None
    if meta["k"] is not None:
        j3 = 3 * skeleton.joint_count
        matrix = take(j3 * meta["k"]).astype(np.float64).reshape(j3, meta["k"])
        prototypes = PrototypeSet(matrix, skeleton, normalizer)

    state = net.init_network(spec, seed=0)
    for i, layer in enumerate(spec.layers):
        p = state.params[i]
        if p is None:
            continue
        p["w"] = take(p["w"].size).reshape(p["w"].shape).copy()
        p["b"] = take(p["b"].size).reshape(p["b"].shape).copy()
        state.velocity[i] = {"w": np.zeros_like(p["w"]), "b": np.zeros_like(p["b"])}
    if offset != len(payload):
        raise ContainerError("model payload has trailing bytes")

    return TrainedModel(spec, state, meta["head"], skeleton, normalizer,
                        prototypes, cfg, meta.get("history", {}))
