"""Fixed-point (Q16.16) emulation of the embedded inference path."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .neural import Conv1D, Dense, Flatten, MaxPool1D, NetworkSpec, Normalize, ReLU
from .neural import _conv_cols
from .physics import State
from .textio import FormatError, format_float, read_sections, write_sections
from .weights import load_weights, network_sections, parse_network

__all__ = [
    "FRAC_BITS", "Q_ONE", "INT32_MIN", "INT32_MAX",
    "FixedPointNet", "FixedInference", "LatencyStats",
    "load_weights", "quantize", "dequantize", "fixed_infer",
    "activation_bounds", "max_activation_bound", "latency_bench",
    "save_fixed", "load_fixed",
]

FRAC_BITS = 16
Q_ONE = 1 << FRAC_BITS
INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1
_HALF = 1 << (FRAC_BITS - 1)
_RANGE = float(1 << 15)

# reference single-sample inference times for context in latency reports
REFERENCE_LATENCY_US = {"embedded board": 21.0, "desktop CPU/GPU": 72.0}


@dataclass(frozen=True)
class FixedPointNet:
    spec: NetworkSpec
    params: tuple            # per layer: dict of int64 arrays holding Q16.16 values
    max_quant_error: float

    @property
    def n_inputs(self) -> int:
        return self.spec.n_inputs


def _to_q(a: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(a, dtype=np.float64) * Q_ONE).astype(np.int64)


def dequantize(q) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) / Q_ONE


def quantize(spec: NetworkSpec, params) -> FixedPointNet:
    """Round every parameter to the nearest Q16.16 value (ties to even).

    Raises ``ValueError`` listing the offending values if any magnitude is
    at or beyond 2**15.
    """
    qparams, worst = [], 0.0
    for i, p in enumerate(params):
        qp = {}
        for key, arr in p.items():
            arr = np.asarray(arr, dtype=np.float64)
            bad = arr[~(np.abs(arr) < _RANGE)]
            if bad.size:
                raise ValueError(f"layer {i} {key}: values outside Q16.16 range: "
                                 f"{bad[:8].tolist()}")
            q = _to_q(arr)
            worst = max(worst, float(np.max(np.abs(dequantize(q) - arr), initial=0.0)))
            qp[key] = q
        qparams.append(qp)
    return FixedPointNet(spec, tuple(qparams), worst)


def save_fixed(path, fpnet: FixedPointNet) -> None:
    """Write the integer network: a ``[fixedpoint]`` section, then the usual layer sections."""
    head = ("fixedpoint", {"frac_bits": str(FRAC_BITS),
                           "max_quant_error": format_float(fpnet.max_quant_error)})
    write_sections(path, [head] + network_sections(fpnet.spec, fpnet.params),
                   header="# ionreadout fixed-point network")


def load_fixed(path) -> FixedPointNet:
    sections = read_sections(path)
    if not sections or sections[0][0] != "fixedpoint":
        raise FormatError(f"{path}: first section must be [fixedpoint]")
    head = sections[0][1]
    if head.get("frac_bits") != str(FRAC_BITS):
        raise FormatError(f"unsupported frac_bits {head.get('frac_bits')!r}", "fixedpoint")
    spec, params = parse_network(sections[1:], path)
    qparams = []
    for i, p in enumerate(params):
        for key, arr in p.items():
            if not (np.array_equal(arr, np.rint(arr)) and np.all(np.abs(arr) <= INT32_MAX)):
                raise FormatError(f"{key} holds non-integer or out-of-range values", f"layer {i}")
        qparams.append({k: v.astype(np.int64) for k, v in p.items()})
    return FixedPointNet(spec, tuple(qparams), float(head.get("max_quant_error", "nan")))


def _saturate(acc: np.ndarray, trace: "FixedInference") -> np.ndarray:
    over = (acc > INT32_MAX) | (acc < INT32_MIN)
    n = int(np.count_nonzero(over))
    if n:
        trace.saturation_events += n
        acc = np.clip(acc, INT32_MIN, INT32_MAX)
    return acc.astype(np.int64)


def _mac(x: np.ndarray, w: np.ndarray, bias: np.ndarray, trace) -> np.ndarray:
    """Saturated Q16.16 result of ``x @ w + bias``.

    Products are Q32.32 and are summed exactly, then rounded half-up to
    Q16.16.  int64 is used when the sum provably fits; otherwise Python
    integers.
    """
    xmax = int(np.max(np.abs(x), initial=0))
    colsum = int(np.max(np.abs(w).sum(axis=0), initial=0))
    if xmax * colsum < (1 << 62):
        acc = ((x @ w) + _HALF) >> FRAC_BITS
        return _saturate(acc + bias, trace)
    acc = x.astype(object) @ w.astype(object)
    acc = (acc + _HALF) // Q_ONE + bias.astype(object)
    return _saturate_big(acc, trace)


@dataclass
class FixedInference:
    """Result of fixed-point inference: verdicts plus the integer activation trace."""

    verdicts: np.ndarray
    outputs: np.ndarray
    activations: list = field(default_factory=list)
    saturation_events: int = 0

    @property
    def verdict(self) -> State:
        return State(int(self.verdicts[0]))


def fixed_infer(fpnet: FixedPointNet, counts, keep_trace: bool = True) -> FixedInference:
    """Integer-only forward pass.

    Inputs are photon counts (small non-negative integers, exact in Q16.16).
    Products accumulate in 64 bits and are rounded back to Q16.16 once per
    output, then saturated to the int32 range; each clipped value counts as
    one saturation event.  Bright iff ``y1 > y2``.
    """
    counts = np.asarray(counts)
    if counts.ndim == 1:
        counts = counts[None]
    if counts.shape[-1] != fpnet.n_inputs:
        raise ValueError(f"expected {fpnet.n_inputs} counts, got {counts.shape[-1]}")
    if (counts < 0).any():
        raise ValueError("counts must be non-negative")
    result = FixedInference(np.empty(0), np.empty(0))
    x = counts.astype(np.int64) << FRAC_BITS
    x = _saturate(x, result)
    if len(fpnet.spec.input_shape) == 2:
        x = x[:, None, :]
    for layer, p in zip(fpnet.spec.layers, fpnet.params):
        if isinstance(layer, Dense):
            x = _mac(x, p["weight"], p["bias"], result)
        elif isinstance(layer, Conv1D):
            n, _, length = x.shape
            cols = _conv_cols(x, layer.kernel)
            w = p["weight"].reshape(layer.out_channels, -1).T
            x = _mac(cols, w, p["bias"], result)
            x = x.reshape(n, length, layer.out_channels).transpose(0, 2, 1)
        elif isinstance(layer, MaxPool1D):
            n, c, length = x.shape
            x = x.reshape(n, c, length // layer.size, layer.size).max(axis=-1)
        elif isinstance(layer, ReLU):
            x = np.maximum(x, 0)
        elif isinstance(layer, Flatten):
            x = x.reshape(len(x), -1)
        elif isinstance(layer, Normalize):
            prod = (x - p["offset"]) * p["scale"]
            x = _saturate((prod + _HALF) >> FRAC_BITS, result)
        if keep_trace:
            result.activations.append(x.copy())
    result.outputs = x
    result.verdicts = (x[:, 0] > x[:, 1]).astype(np.int8)
    return result


def _saturate_big(acc, trace):
    """Saturate an object-dtype (Python int) array into int64 storage."""
    flat = []
    for v in acc.ravel():
        v = int(v)
        if v > INT32_MAX or v < INT32_MIN:
            trace.saturation_events += 1
            v = INT32_MAX if v > 0 else INT32_MIN
        flat.append(v)
    return np.array(flat, dtype=np.int64).reshape(acc.shape)


def activation_bounds(spec: NetworkSpec, params, lo, hi) -> list[tuple[np.ndarray, np.ndarray]]:
    """Interval bounds on every layer's output for inputs in the box ``[lo, hi]``.

    Standard interval arithmetic: a dense layer maps ``[l, u]`` to
    ``W+ l + W- u + b .. W+ u + W- l + b``.
    """
    width = spec.n_inputs
    l = np.broadcast_to(np.asarray(lo, dtype=np.float64), (width,)).copy()
    u = np.broadcast_to(np.asarray(hi, dtype=np.float64), (width,)).copy()
    if len(spec.input_shape) == 2:
        l, u = l[None, :], u[None, :]
    bounds = []
    for layer, p in zip(spec.layers, params):
        if isinstance(layer, Dense):
            w = np.asarray(p["weight"], dtype=np.float64)
            wp, wn = np.maximum(w, 0), np.minimum(w, 0)
            l, u = l @ wp + u @ wn + p["bias"], u @ wp + l @ wn + p["bias"]
        elif isinstance(layer, Conv1D):
            w = np.asarray(p["weight"], dtype=np.float64).reshape(layer.out_channels, -1)
            wp, wn = np.maximum(w, 0), np.minimum(w, 0)
            cl, cu = _conv_cols(l[None], layer.kernel), _conv_cols(u[None], layer.kernel)
            # zero padding is a point interval [0, 0], already in cl/cu
            nl = cl @ wp.T + cu @ wn.T + p["bias"]
            nu = cu @ wp.T + cl @ wn.T + p["bias"]
            l, u = nl.T, nu.T
        elif isinstance(layer, MaxPool1D):
            c, length = l.shape
            l = l.reshape(c, length // layer.size, layer.size).max(axis=-1)
            u = u.reshape(c, length // layer.size, layer.size).max(axis=-1)
        elif isinstance(layer, ReLU):
            l, u = np.maximum(l, 0), np.maximum(u, 0)
        elif isinstance(layer, Flatten):
            l, u = l.ravel(), u.ravel()
        elif isinstance(layer, Normalize):
            a, b = (l - p["offset"]) * p["scale"], (u - p["offset"]) * p["scale"]
            l, u = np.minimum(a, b), np.maximum(a, b)
        bounds.append((l.copy(), u.copy()))
    return bounds


def max_activation_bound(fpnet: FixedPointNet, lo=0, hi=50) -> float:
    """Largest |activation| any layer can reach for inputs in ``[lo, hi]``.

    Computed on the dequantised parameters, plus one LSB of rounding per
    accumulated term.  Below 2**15 means inference can never saturate.
    """
    params = [{k: dequantize(v) for k, v in p.items()} for p in fpnet.params]
    bounds = activation_bounds(fpnet.spec, params, lo, hi)
    worst = max(max(float(np.max(np.abs(l))), float(np.max(np.abs(u)))) for l, u in bounds)
    slack = sum(lay.n_in + 1 for lay in fpnet.spec.layers if isinstance(lay, Dense)) / Q_ONE
    return max(worst, float(hi), abs(float(lo))) + slack


@dataclass(frozen=True)
class LatencyStats:
    n_trials: int
    median_ns: int
    p99_ns: int
    mean_ns: float

    def render(self) -> str:
        lines = [f"fixed-point inference latency over {self.n_trials} trials: "
                 f"median {self.median_ns} ns, p99 {self.p99_ns} ns, mean {self.mean_ns:.0f} ns"]
        for name, us in REFERENCE_LATENCY_US.items():
            lines.append(f"  reference {name}: {us:g} us ({us * 1000:.0f} ns)")
        return "\n".join(lines)


def latency_bench(fpnet: FixedPointNet, n_trials: int, inputs=None, warmup: int = 100,
                  seed: int = 0) -> LatencyStats:
    """Wall-clock statistics of single-sample ``fixed_infer`` calls (report only)."""
    if n_trials < 1:
        raise ValueError("latency_bench needs n_trials >= 1")
    if inputs is None:
        inputs = np.random.default_rng(seed).integers(0, 6, size=(n_trials, fpnet.n_inputs))
    inputs = np.asarray(inputs)
    for i in range(min(warmup, len(inputs))):
        fixed_infer(fpnet, inputs[i], keep_trace=False)
    times = []
    for i in range(n_trials):
        x = inputs[i % len(inputs)]
        t0 = time.perf_counter_ns()
        fixed_infer(fpnet, x, keep_trace=False)
        times.append(time.perf_counter_ns() - t0)
    times.sort()
    p99 = times[min(len(times) - 1, int(np.ceil(0.99 * len(times))) - 1)]
    return LatencyStats(n_trials, int(statistics.median_low(times)), int(p99),
                        float(np.mean(times)))
