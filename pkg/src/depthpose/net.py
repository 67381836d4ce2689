"""Minimal differentiable network engine.

Supports exactly what the depth-to-pose architecture needs: valid 2-D
convolution (stride 1), ReLU, max pooling (window = stride), fully
connected layers, inverted dropout; Xavier initialization; exact backward
pass; SGD with momentum.

Tensors are numpy float32 arrays, images laid out (batch, h, w, channels)
and flattened row-major before the first fully-connected layer. All BLAS
calls run single-threaded; parallelism splits the batch into fixed-size
micro-batches whose gradients are summed in micro-batch order, so results
are bitwise identical at any thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .util import single_thread_blas

MICROBATCH = 16


@dataclass(frozen=True)
class Conv:
    kh: int
    kw: int
    out_channels: int


@dataclass(frozen=True)
class MaxPool:
    size: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class FullyConnected:
    units: int


@dataclass(frozen=True)
class Dropout:
    rate: float


LayerSpec = Conv | MaxPool | ReLU | FullyConnected | Dropout


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list plus the (h, w, channels) input shape.

    Construction validates the whole shape chain; the final layer must be
    fully connected.
    """

    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers or not isinstance(self.layers[-1], FullyConnected):
            raise ValueError("final layer must be FullyConnected")
        self.shapes()  # raises on an inconsistent chain

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes, starting with the input shape."""
        chain: list[tuple[int, ...]] = [tuple(self.input_shape)]
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise ValueError(f"layer {i}: Conv needs an image input, got {shape}")
                h, w, _ = shape
                oh, ow = h - layer.kh + 1, w - layer.kw + 1
                if oh < 1 or ow < 1:
                    raise ValueError(f"layer {i}: kernel {layer.kh}x{layer.kw} too large for {h}x{w}")
                shape = (oh, ow, layer.out_channels)
            elif isinstance(layer, MaxPool):
                if len(shape) != 3:
                    raise ValueError(f"layer {i}: MaxPool needs an image input, got {shape}")
                h, w, c = shape
                oh, ow = h // layer.size, w // layer.size
                if oh < 1 or ow < 1:
                    raise ValueError(f"layer {i}: pool {layer.size} too large for {h}x{w}")
                shape = (oh, ow, c)
            elif isinstance(layer, FullyConnected):
                shape = (layer.units,)
            elif isinstance(layer, Dropout):
                if not 0.0 <= layer.rate < 1.0:
                    raise ValueError(f"layer {i}: dropout rate must be in [0, 1)")
            elif not isinstance(layer, ReLU):
                raise ValueError(f"layer {i}: unknown layer {layer!r}")
            chain.append(shape)
        return chain

    @property
    def output_units(self) -> int:
        return self.layers[-1].units


def preset(name: str, k: int) -> NetworkSpec:
    """Built-in architectures.

    "ddp-paper": the full-size network (100x100 input, ~100M parameters).
    "ddp-desk": a scaled-down variant (32x32 input) for desk-size runs.
    `k` is the output width (number of prototypes, or 3J for the direct
    regression head).
    """
    if k < 1:
        raise ValueError("output width k must be >= 1")
    if name == "ddp-paper":
        return NetworkSpec((100, 100, 1), (
            Conv(7, 7, 96), ReLU(), MaxPool(2),
            Conv(5, 5, 192), ReLU(), MaxPool(2),
            Conv(3, 3, 512), ReLU(), MaxPool(2),
            Conv(2, 2, 1024), ReLU(),
            Conv(2, 2, 2048), ReLU(),
            FullyConnected(1024), ReLU(), Dropout(0.2),
            FullyConnected(256), ReLU(),
            FullyConnected(k),
        ))
    if name == "ddp-desk":
        return NetworkSpec((32, 32, 1), (
            Conv(5, 5, 16), ReLU(), MaxPool(2),
            Conv(5, 5, 32), ReLU(), MaxPool(2),
            Conv(3, 3, 64), ReLU(),
            Conv(2, 2, 64), ReLU(),
            Conv(2, 2, 64), ReLU(),
            FullyConnected(128), ReLU(),
            FullyConnected(64), ReLU(),
            FullyConnected(k),
        ))
    raise KeyError(f"unknown preset {name!r}")


@dataclass
class NetworkState:
    """Learned parameters plus momentum buffers, aligned with spec.layers.

    params[i] is {"w": ..., "b": ...} for Conv/FullyConnected layers and
    None otherwise; velocity mirrors params. Mutated in place by
    `sgd_step`; a state is exclusively owned during a training step.
    """

    spec: NetworkSpec
    params: list[dict | None]
    velocity: list[dict | None]


def _fan_in(spec: NetworkSpec, i: int) -> int:
    shape = spec.shapes()[i]
    return int(np.prod(shape))


def init_network(spec: NetworkSpec, seed: int = 0) -> NetworkState:
    """Xavier-initialized state: weights ~ Normal(0, sqrt(2/(fan_in+fan_out))),
    biases zero. Deterministic given `seed`."""
    rng = np.random.default_rng(seed)
    params: list[dict | None] = []
    velocity: list[dict | None] = []
    shapes = spec.shapes()
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            cin = shapes[i][2]
            fan_in = layer.kh * layer.kw * cin
            fan_out = layer.kh * layer.kw * layer.out_channels
            sigma = np.sqrt(2.0 / (fan_in + fan_out))
            w = rng.normal(0.0, sigma, size=(layer.kh, layer.kw, cin, layer.out_channels))
            b = np.zeros(layer.out_channels, dtype=np.float32)
            params.append({"w": w.astype(np.float32), "b": b})
            velocity.append({"w": np.zeros_like(params[-1]["w"]), "b": np.zeros_like(b)})
        elif isinstance(layer, FullyConnected):
            fan_in = _fan_in(spec, i)
            sigma = np.sqrt(2.0 / (fan_in + layer.units))
            w = rng.normal(0.0, sigma, size=(fan_in, layer.units))
            b = np.zeros(layer.units, dtype=np.float32)
            params.append({"w": w.astype(np.float32), "b": b})
            velocity.append({"w": np.zeros_like(params[-1]["w"]), "b": np.zeros_like(b)})
        else:
            params.append(None)
            velocity.append(None)
    return NetworkState(spec, params, velocity)


def param_count(spec: NetworkSpec) -> int:
    """Total number of weights and biases."""
    total = 0
    shapes = spec.shapes()
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            cin = shapes[i][2]
            total += layer.kh * layer.kw * cin * layer.out_channels + layer.out_channels
        elif isinstance(layer, FullyConnected):
            total += _fan_in(spec, i) * layer.units + layer.units
    return total


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (B, H, W, C) -> (B, OH, OW, kh, kw, C), a contiguous copy
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    return np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3))


def _forward_chunk(state: NetworkState, x: np.ndarray, train: bool,
                   drop_masks: dict[int, np.ndarray]) -> tuple[np.ndarray, list]:
    cache: list = []
    for i, layer in enumerate(state.spec.layers):
        if isinstance(layer, Conv):
            p = state.params[i]
            b, oh, ow = x.shape[0], x.shape[1] - layer.kh + 1, x.shape[2] - layer.kw + 1
            patches = _im2col(x, layer.kh, layer.kw).reshape(b * oh * ow, -1)
            out = patches @ p["w"].reshape(-1, layer.out_channels) + p["b"]
            cache.append((x.shape, patches))
            x = out.reshape(b, oh, ow, layer.out_channels)
        elif isinstance(layer, MaxPool):
            s = layer.size
            b, h, w, c = x.shape
            oh, ow = h // s, w // s
            win = x[:, :oh * s, :ow * s, :].reshape(b, oh, s, ow, s, c)
            win = win.transpose(0, 1, 3, 5, 2, 4).reshape(b, oh, ow, c, s * s)
            idx = win.argmax(axis=-1)  # first occurrence on ties (row-major window order)
            cache.append((x.shape, idx))
            x = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        elif isinstance(layer, ReLU):
            mask = x > 0
            cache.append(mask)
            x = x * mask
        elif isinstance(layer, FullyConnected):
            p = state.params[i]
            in_shape = x.shape
            flat = x.reshape(x.shape[0], -1)
            cache.append((in_shape, flat))
            x = flat @ p["w"] + p["b"]
        elif isinstance(layer, Dropout):
            if train and layer.rate > 0.0:
                mask = drop_masks[i]
                scale = np.float32(1.0 / (1.0 - layer.rate))
                cache.append((mask, scale))
                x = x * mask * scale
            else:
                cache.append(None)
    return x, cache


def _backward_chunk(state: NetworkState, cache: list, dout: np.ndarray):
    grads: list[dict | None] = [None] * len(state.spec.layers)
    for i in range(len(state.spec.layers) - 1, -1, -1):
        layer = state.spec.layers[i]
        if isinstance(layer, Conv):
            p = state.params[i]
            x_shape, patches = cache[i]
            b, h, w, c = x_shape
            oh, ow = h - layer.kh + 1, w - layer.kw + 1
            dmat = dout.reshape(b * oh * ow, layer.out_channels)
            dw = patches.T @ dmat
            db = dmat.sum(axis=0, dtype=np.float64).astype(np.float32)
            grads[i] = {"w": dw.reshape(p["w"].shape), "b": db}
            dpatches = (dmat @ p["w"].reshape(-1, layer.out_channels).T)
            dpatches = dpatches.reshape(b, oh, ow, layer.kh, layer.kw, c)
            dx = np.zeros(x_shape, dtype=np.float32)
            for di in range(layer.kh):
                for dj in range(layer.kw):
                    dx[:, di:di + oh, dj:dj + ow, :] += dpatches[:, :, :, di, dj, :]
            dout = dx
        elif isinstance(layer, MaxPool):
            s = layer.size
            x_shape, idx = cache[i]
            b, h, w, c = x_shape
            oh, ow = h // s, w // s
            dwin = np.zeros((b, oh, ow, c, s * s), dtype=np.float32)
            np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
            dwin = dwin.reshape(b, oh, ow, c, s, s).transpose(0, 1, 4, 2, 5, 3)
            dx = np.zeros(x_shape, dtype=np.float32)
            dx[:, :oh * s, :ow * s, :] = dwin.reshape(b, oh * s, ow * s, c)
            dout = dx
        elif isinstance(layer, ReLU):
            dout = dout * cache[i]
        elif isinstance(layer, FullyConnected):
            p = state.params[i]
            in_shape, flat = cache[i]
            grads[i] = {
                "w": flat.T @ dout,
                "b": dout.sum(axis=0, dtype=np.float64).astype(np.float32),
            }
            dout = (dout @ p["w"].T).reshape(in_shape)
        elif isinstance(layer, Dropout):
            if cache[i] is not None:
                mask, scale = cache[i]
                dout = dout * mask * scale
    return grads, dout


def _check_input(spec: NetworkSpec, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float32)
    if x.ndim == 3:
        x = x[..., None]
    if x.shape[1:] != tuple(spec.input_shape):
        raise ValueError(f"batch shape {x.shape[1:]} does not match spec input {spec.input_shape}")
    return x


def forward(state: NetworkState, batch: np.ndarray, mode: str = "eval",
            rng: np.random.Generator | None = None, threads: int = 1):
    """Run the network on a batch; returns (output (B, units), cache).

    mode "train" activates dropout (inverted scaling, needs `rng`);
    "eval" is deterministic and dropout-free. The cache feeds `backward`.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = _check_input(state.spec, batch)
    n = x.shape[0]
    train = mode == "train"

    # dropout masks for the whole batch are drawn up front, in layer order,
    # so results do not depend on how the batch is later chunked
    drop_masks: dict[int, np.ndarray] = {}
    if train:
        shapes = state.spec.shapes()
        for i, layer in enumerate(state.spec.layers):
            if isinstance(layer, Dropout) and layer.rate > 0.0:
                if rng is None:
                    raise ValueError("train-mode forward needs an rng for dropout")
                drop_masks[i] = (rng.random((n, *shapes[i])) >= layer.rate).astype(np.float32)

    bounds = [(s, min(s + MICROBATCH, n)) for s in range(0, n, MICROBATCH)]

    def run(bound):
        s, e = bound
        masks = {i: m[s:e] for i, m in drop_masks.items()}
        return _forward_chunk(state, x[s:e], train, masks)

    with single_thread_blas():
        if threads > 1 and len(bounds) > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                results = list(ex.map(run, bounds))
        else:
            results = [run(b) for b in bounds]

    out = np.concatenate([r[0] for r in results], axis=0)
    cache = {"chunks": [r[1] for r in results], "bounds": bounds, "n": n}
    return out, cache


def backward(state: NetworkState, cache, output_grad: np.ndarray, threads: int = 1):
    """Exact gradients for all parameters and the input.

    Returns (grads, dinput); grads[i] is {"w","b"} or None, aligned with
    the layer list. Gradients from micro-batches are summed in
    micro-batch index order (fixed reduction order), so the result does
    not depend on the thread count.
    """
    bounds = cache["bounds"]
    dout = np.asarray(output_grad, dtype=np.float32)
    if dout.shape[0] != cache["n"]:
        raise ValueError("output_grad batch size does not match forward cache")

    def run(args):
        chunk_cache, (s, e) = args
        return _backward_chunk(state, chunk_cache, dout[s:e])

    with single_thread_blas():
        if threads > 1 and len(bounds) > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                results = list(ex.map(run, zip(cache["chunks"], bounds)))
        else:
            results = [run(a) for a in zip(cache["chunks"], bounds)]

    total: list[dict | None] = [None] * len(state.spec.layers)
    for grads, _ in results:
        for i, g in enumerate(grads):
            if g is None:
                continue
            if total[i] is None:
                total[i] = {"w": g["w"].copy(), "b": g["b"].copy()}
            else:
                total[i]["w"] += g["w"]
                total[i]["b"] += g["b"]
    dinput = np.concatenate([r[1] for r in results], axis=0)
    return total, dinput


def sgd_step(state: NetworkState, grads, lr: float, momentum: float = 0.0) -> NetworkState:
    """v <- momentum*v + g; theta <- theta - lr*v. Updates in place."""
    for i, g in enumerate(grads):
        if g is None:
            continue
        for key in ("w", "b"):
            if not np.all(np.isfinite(g[key])):
                layer = state.spec.layers[i]
                raise FloatingPointError(f"non-finite gradient in layer {i} ({type(layer).__name__})")
            v = state.velocity[i][key]
            v *= np.float32(momentum)
            v += g[key]
            state.params[i][key] -= np.float32(lr) * v
    return state
