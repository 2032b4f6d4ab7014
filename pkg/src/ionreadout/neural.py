"""Small dense/1-D convolutional network stack with hand-written backprop and Adam.

Arrays are plain numpy.  Convolutional activations are laid out
``(batch, channels, length)``; dense activations ``(batch, features)``.
Parameters are a list with one dict per layer (empty for parameter-free
layers), holding ``weight`` and ``bias`` arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .physics import LabeledDataset, State

__all__ = [
    "Dense", "Conv1D", "MaxPool1D", "ReLU", "Flatten", "Normalize",
    "NetworkSpec", "TrainConfig", "TrainResult", "AdamState", "TrainingError",
    "build_cnn", "build_fcnn_onboard", "build_fcnn_table", "build_logistic",
    "init_params", "forward", "loss_l1", "backward", "adam_step", "train",
    "predict", "accuracy", "one_hot",
]


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int


@dataclass(frozen=True)
class Conv1D:
    in_channels: int
    out_channels: int
    kernel: int = 5


@dataclass(frozen=True)
class MaxPool1D:
    size: int = 2


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Normalize:
    """Fixed elementwise ``(x - offset) * scale``; its parameters are not trained."""

    width: int


Layer = Union[Dense, Conv1D, MaxPool1D, ReLU, Flatten, Normalize]


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layers plus the input shape ``(length,)`` or ``(channels, length)``."""

    layers: tuple
    input_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        shapes = self.shapes()
        if shapes[-1] != (2,):
            raise ValueError(f"network must end in 2 outputs, ends in {shapes[-1]}")

    def shapes(self) -> list[tuple]:
        """Per-sample activation shapes: input first, then after each layer."""
        shape = self.input_shape
        out = [shape]
        for i, layer in enumerate(self.layers):
            shape = _out_shape(layer, shape, i)
            out.append(shape)
        return out

    @property
    def n_inputs(self) -> int:
        return self.input_shape[-1]

    def param_count(self) -> int:
        n = 0
        for layer in self.layers:
            if isinstance(layer, Dense):
                n += layer.n_in * layer.n_out + layer.n_out
            elif isinstance(layer, Conv1D):
                n += layer.kernel * layer.in_channels * layer.out_channels + layer.out_channels
        return n


def _out_shape(layer, shape, index):
    def bad(msg):
        raise ValueError(f"layer {index} ({type(layer).__name__}): {msg}")

    if isinstance(layer, Dense):
        if len(shape) != 1 or shape[0] != layer.n_in:
            bad(f"expects ({layer.n_in},), got {shape}")
        return (layer.n_out,)
    if isinstance(layer, Conv1D):
        if len(shape) != 2 or shape[0] != layer.in_channels:
            bad(f"expects ({layer.in_channels}, L), got {shape}")
        return (layer.out_channels, shape[1])
    if isinstance(layer, MaxPool1D):
        if len(shape) != 2 or shape[1] % layer.size:
            bad(f"length of {shape} not divisible by pool size {layer.size}")
        return (shape[0], shape[1] // layer.size)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Normalize):
        if shape[-1] != layer.width:
            bad(f"expects width {layer.width}, got {shape}")
        return shape
    if isinstance(layer, ReLU):
        return shape
    raise TypeError(f"unknown layer type {type(layer).__name__}")


def build_cnn(n_sub_bins: int = 100) -> NetworkSpec:
    """Two conv(5, same)/ReLU/pool(2) stages with 16 and 32 maps, then 240 -> 2."""
    if n_sub_bins < 4 or n_sub_bins % 4:
        raise ValueError(f"CNN input length must be a positive multiple of 4, got {n_sub_bins}")
    flat = 32 * (n_sub_bins // 4)
    return NetworkSpec(
        (Conv1D(1, 16, 5), ReLU(), MaxPool1D(2),
         Conv1D(16, 32, 5), ReLU(), MaxPool1D(2),
         Flatten(), Dense(flat, 240), ReLU(), Dense(240, 2)),
        (1, n_sub_bins),
    )


def build_fcnn_onboard(n_inputs: int = 10) -> NetworkSpec:
    """The embedded network: n_inputs -> 20 -> ReLU -> 2."""
    return NetworkSpec((Dense(n_inputs, 20), ReLU(), Dense(20, 2)), (n_inputs,))


def build_fcnn_table(n_inputs: int = 100, hidden: int = 64) -> NetworkSpec:
    return NetworkSpec((Dense(n_inputs, hidden), ReLU(), Dense(hidden, 2)), (n_inputs,))


def build_logistic(n_inputs: int = 100) -> NetworkSpec:
    """Zero-hidden-layer network, the linear-model baseline."""
    return NetworkSpec((Dense(n_inputs, 2),), (n_inputs,))


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> list[dict]:
    """Glorot-uniform weights, zero biases."""
    params = []
    for layer in spec.layers:
        if isinstance(layer, Dense):
            lim = math.sqrt(6.0 / (layer.n_in + layer.n_out))
            params.append({"weight": rng.uniform(-lim, lim, (layer.n_in, layer.n_out)),
                           "bias": np.zeros(layer.n_out)})
        elif isinstance(layer, Conv1D):
            fan_in = layer.in_channels * layer.kernel
            fan_out = layer.out_channels * layer.kernel
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            shape = (layer.out_channels, layer.in_channels, layer.kernel)
            params.append({"weight": rng.uniform(-lim, lim, shape),
                           "bias": np.zeros(layer.out_channels)})
        elif isinstance(layer, Normalize):
            params.append({"offset": np.zeros(layer.width), "scale": np.ones(layer.width)})
        else:
            params.append({})
    return params


# -- layer kernels -------------------------------------------------------------

def _conv_cols(x, kernel):
    """im2col for 'same' padding: (N, C, L) -> (N*L, C*kernel)."""
    n, c, length = x.shape
    left = (kernel - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (left, kernel - 1 - left)))
    win = sliding_window_view(xp, kernel, axis=2)          # (N, C, L, k)
    return win.transpose(0, 2, 1, 3).reshape(n * length, c * kernel)


def _conv_forward(x, p, layer):
    n, _, length = x.shape
    cols = _conv_cols(x, layer.kernel)
    w = p["weight"].reshape(layer.out_channels, -1)
    y = cols @ w.T + p["bias"]
    return y.reshape(n, length, layer.out_channels).transpose(0, 2, 1), cols


def _conv_backward(dy, cache, p, layer):
    cols, x_shape = cache
    n, c, length = x_shape
    k = layer.kernel
    dyr = dy.transpose(0, 2, 1).reshape(n * length, layer.out_channels)
    w = p["weight"].reshape(layer.out_channels, -1)
    grads = {"weight": (dyr.T @ cols).reshape(p["weight"].shape), "bias": dyr.sum(axis=0)}
    dcols = (dyr @ w).reshape(n, length, c, k)
    left = (k - 1) // 2
    dxp = np.zeros((n, c, length + k - 1), dtype=dy.dtype)
    for j in range(k):
        dxp[:, :, j:j + length] += dcols[:, :, :, j].transpose(0, 2, 1)
    return dxp[:, :, left:left + length], grads


def _pool_forward(x, size):
    """Returns pooled values and the within-window index of the first maximum."""
    n, c, length = x.shape
    xr = x.reshape(n, c, length // size, size)
    if size == 2:
        first = xr[..., 0] >= xr[..., 1]
        return np.where(first, xr[..., 0], xr[..., 1]), first
    idx = np.argmax(xr, axis=-1)
    return np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0], idx


def _pool_backward(dy, idx, x_shape, size):
    n, c, length = x_shape
    dx = np.zeros((n, c, length // size, size), dtype=dy.dtype)
    if size == 2:
        dx[..., 0] = dy * idx
        dx[..., 1] = dy * ~idx
    else:
        np.put_along_axis(dx, idx[..., None], dy[..., None], axis=-1)
    return dx.reshape(x_shape)


def _as_input(spec: NetworkSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    width = spec.input_shape[-1]
    if x.shape[-1] != width:
        raise ValueError(f"input width {x.shape[-1]} does not match network input {width}")
    if x.ndim == 1:
        x = x[None]
    if len(spec.input_shape) == 2 and x.ndim == 2:
        x = x[:, None, :]
    return x


def _forward(spec, params, x, keep_cache):
    caches = []
    for layer, p in zip(spec.layers, params):
        cache = None
        if isinstance(layer, Dense):
            cache = x
            x = x @ p["weight"] + p["bias"]
        elif isinstance(layer, Conv1D):
            shape = x.shape
            x, cols = _conv_forward(x, p, layer)
            cache = (cols, shape)
        elif isinstance(layer, MaxPool1D):
            shape = x.shape
            x, idx = _pool_forward(x, layer.size)
            cache = (idx, shape)
        elif isinstance(layer, ReLU):
            cache = x > 0
            x = x * cache
        elif isinstance(layer, Flatten):
            cache = x.shape
            x = x.reshape(len(x), -1)
        elif isinstance(layer, Normalize):
            x = (x - p["offset"]) * p["scale"]
            cache = p["scale"]
        if keep_cache:
            caches.append(cache)
    return x, caches


def forward(spec: NetworkSpec, params: list[dict], x, dtype=np.float64) -> np.ndarray:
    """Network outputs ``(y1, y2)`` for one input (shape ``(2,)``) or a batch (``(N, 2)``)."""
    single = np.ndim(x) == 1
    xin = _as_input(spec, x).astype(dtype)
    if dtype != np.float64:
        params = [{k: v.astype(dtype) for k, v in p.items()} for p in params]
    y, _ = _forward(spec, params, xin, keep_cache=False)
    return y[0] if single else y


def one_hot(labels) -> np.ndarray:
    """Bright -> (1, 0), Dark -> (0, 1)."""
    labels = np.asarray(labels)
    return np.stack([labels == State.BRIGHT, labels != State.BRIGHT], axis=-1).astype(np.float64)


def loss_l1(outputs, targets) -> float:
    outputs = np.asarray(outputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if outputs.shape != targets.shape:
        raise ValueError(f"output shape {outputs.shape} != target shape {targets.shape}")
    return float(np.abs(outputs - targets).sum())


def _backward(spec, params, x, targets):
    y, caches = _forward(spec, params, x, keep_cache=True)
    loss = float(np.abs(y - targets).sum())
    dy = np.sign(y - targets)
    grads = [None] * len(spec.layers)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, p, cache = spec.layers[i], params[i], caches[i]
        if isinstance(layer, Dense):
            grads[i] = {"weight": cache.T @ dy, "bias": dy.sum(axis=0)}
            if i:
                dy = dy @ p["weight"].T
        elif isinstance(layer, Conv1D):
            dy, grads[i] = _conv_backward(dy, cache, p, layer)
        elif isinstance(layer, MaxPool1D):
            idx, shape = cache
            dy = _pool_backward(dy, idx, shape, layer.size)
        elif isinstance(layer, ReLU):
            dy = dy * cache
        elif isinstance(layer, Flatten):
            dy = dy.reshape(cache)
        elif isinstance(layer, Normalize):
            grads[i] = {"offset": np.zeros_like(p["offset"]), "scale": np.zeros_like(p["scale"])}
            dy = dy * cache
        if grads[i] is None:
            grads[i] = {}
    return loss, grads


def backward(spec: NetworkSpec, params: list[dict], batch) -> list[dict]:
    """Exact gradients of the summed L1 loss for ``batch = (inputs, labels)``.

    ``labels`` may be state labels (shape ``(N,)``) or targets of shape ``(N, 2)``.
    """
    x, labels = batch
    x = _as_input(spec, x)
    labels = np.asarray(labels)
    targets = labels.astype(np.float64) if labels.ndim == 2 else one_hot(labels)
    return _backward(spec, params, x, targets)[1]


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([{k: np.zeros_like(a) for k, a in p.items()} for p in params],
                   [{k: np.zeros_like(a) for k, a in p.items()} for p in params])


def adam_step(params, grads, state: AdamState, lr: float, trainable=None):
    """One bias-corrected Adam update, in place.  Returns ``(params, state)``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if trainable is not None and not trainable[i]:
            continue
        for k in p:
            m, v = state.m[i][k], state.v[i][k]
            m *= b1
            m += (1.0 - b1) * g[k]
            v *= b2
            v += (1.0 - b2) * np.square(g[k])
            denom = np.sqrt(v / c2)
            denom += state.eps
            p[k] -= (lr / c1) * m / denom
    return params, state


@dataclass(frozen=True)
class TrainConfig:
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    batch_size: int = 64
    total_samples: int = 200_000
    seed: int = 0
    standardize: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start")
        if self.total_samples < 1:
            raise ValueError("total_samples must be >= 1")

    @property
    def steps(self) -> int:
        return max(1, math.ceil(self.total_samples / self.batch_size))

    def lr(self, step: int) -> float:
        """Exponential interpolation from lr_start (step 0) to lr_end (last step)."""
        if self.steps == 1:
            return self.lr_start
        frac = step / (self.steps - 1)
        return self.lr_start * (self.lr_end / self.lr_start) ** frac


class TrainingError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step}: loss = {loss!r}")
        self.step = step
        self.loss = loss


@dataclass
class TrainResult:
    spec: NetworkSpec
    params: list
    heldout_accuracy: float
    log: list = field(default_factory=list)


def _with_normalize(spec: NetworkSpec, data: LabeledDataset):
    """Prepend a Normalize layer fitted to the training inputs."""
    width = spec.input_shape[-1]
    new = NetworkSpec((Normalize(width),) + spec.layers, spec.input_shape)
    mean = data.counts.mean(axis=0).astype(np.float64)
    std = data.counts.std(axis=0).astype(np.float64)
    return new, {"offset": mean, "scale": 1.0 / np.where(std > 0, std, 1.0)}


def train(spec: NetworkSpec, data: LabeledDataset, cfg: TrainConfig = TrainConfig(),
          heldout: LabeledDataset | None = None, log_every: int = 100) -> TrainResult:
    """Minibatch Adam on the summed L1 loss; deterministic in ``cfg.seed``.

    Batches are drawn by walking reshuffled passes over ``data`` until
    ``cfg.total_samples`` samples have been consumed.  If ``heldout`` is not
    given, the last tenth of ``data`` is held out and not trained on.
    """
    labels = data.labels
    if labels.all() or not labels.any():
        raise ValueError("training data must contain both classes")
    if heldout is None:
        cut = len(data) - max(1, len(data) // 10)
        heldout = data.subset(slice(cut, None))
        data = data.subset(slice(0, cut))
    rng = np.random.default_rng(cfg.seed)
    if cfg.standardize:
        spec, norm = _with_normalize(spec, data)
        params = init_params(spec, rng)
        params[0] = norm
    else:
        params = init_params(spec, rng)
    trainable = [not isinstance(layer, Normalize) for layer in spec.layers]
    state = AdamState.zeros_like(params)
    x_all = data.counts.astype(np.float64)
    targets_all = one_hot(data.labels)
    n = len(data)
    order = rng.permutation(n)
    pos = 0
    log = []
    for step in range(cfg.steps):
        take = min(cfg.batch_size, cfg.total_samples - step * cfg.batch_size)
        idx = []
        while take > 0:
            if pos == n:
                order, pos = rng.permutation(n), 0
            chunk = order[pos:pos + take]
            idx.append(chunk)
            pos += len(chunk)
            take -= len(chunk)
        idx = np.concatenate(idx)
        loss, grads = _backward(spec, params, _as_input(spec, x_all[idx]), targets_all[idx])
        if not math.isfinite(loss):
            raise TrainingError(step, loss)
        adam_step(params, grads, state, cfg.lr(step), trainable)
        if step % log_every == 0 or step == cfg.steps - 1:
            log.append((step, cfg.lr(step), loss / len(idx)))
    acc = accuracy(spec, params, heldout)
    return TrainResult(spec, params, acc, log)


def predict(spec: NetworkSpec, params, counts, chunk: int = 8192):
    """Bright iff y1 > y2; a tie is Dark.  Batches return an int8 array."""
    counts = np.asarray(counts)
    if counts.ndim == 1:
        y = forward(spec, params, counts)
        return State(int(y[0] > y[1]))
    out = np.empty(len(counts), dtype=np.int8)
    for lo in range(0, len(counts), chunk):
        y = forward(spec, params, counts[lo:lo + chunk])
        out[lo:lo + chunk] = y[:, 0] > y[:, 1]
    return out


def accuracy(spec: NetworkSpec, params, data: LabeledDataset) -> float:
    return float((predict(spec, params, data.counts) == data.labels).mean())
