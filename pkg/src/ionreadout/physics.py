"""Stochastic fluorescence model for single-ion bright/dark readout.

A detection shot is a two-state hidden Markov chain (bright/dark) sampled once
per sub-bin, with Poisson photon counts in each sub-bin.  The bright emission
rate follows the saturation curve of the detection laser; off-resonant
pumping flips the state at rates proportional to laser power.

Randomness is counter-based: every uniform variate is a hash of
``(trajectory seed, sub-bin, stream)``, and every trajectory seed is a hash of
``(master seed, trajectory index)``.  A dataset is therefore identical no
matter how it is chunked, ordered or parallelised, and ``sample_trajectory``
reproduces row ``i`` of ``generate_dataset`` exactly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, asdict, replace
from enum import IntEnum

import numpy as np

__all__ = [
    "State",
    "PhysicsParams",
    "PhotonTrajectory",
    "LabeledDataset",
    "saturation_rate",
    "transition_probs",
    "emission_means",
    "trajectory_seed",
    "derive_seed",
    "sample_trajectory",
    "generate_dataset",
    "rebin",
]


class State(IntEnum):
    DARK = 0
    BRIGHT = 1


@dataclass(frozen=True)
class PhysicsParams:
    """Full parameterisation of the generative model.

    Powers are in microwatt, rates in counts per second, times in seconds.
    ``bright_decay_tau`` and ``dark_pump_tau_ref`` are the mean flip times at
    ``reference_power``; both scale as ``reference_power / laser_power``.
    Pass ``math.inf`` for either to disable that flip channel.
    """

    p0_saturation: float = 2.91
    n0_saturation_rate: float = 1.39e5
    laser_power: float = 2.95
    dark_rate: float = 1.0e3
    bright_decay_tau: float = 30e-3
    dark_pump_tau_ref: float = 300e-3
    reference_power: float = 2.95
    sub_bin_duration: float = 3e-6
    n_sub_bins: int = 100

    def __post_init__(self):
        for name in ("p0_saturation", "n0_saturation_rate", "reference_power",
                     "sub_bin_duration", "bright_decay_tau", "dark_pump_tau_ref"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"{name} must be > 0, got {value!r}")
        if not self.dark_rate >= 0:
            raise ValueError(f"dark_rate must be >= 0, got {self.dark_rate!r}")
        if not self.laser_power >= 0 or math.isinf(self.laser_power):
            raise ValueError(f"laser_power must be finite and >= 0, got {self.laser_power!r}")
        if int(self.n_sub_bins) != self.n_sub_bins or self.n_sub_bins < 1:
            raise ValueError(f"n_sub_bins must be a positive integer, got {self.n_sub_bins!r}")
        object.__setattr__(self, "n_sub_bins", int(self.n_sub_bins))

    def with_(self, **changes) -> "PhysicsParams":
        return replace(self, **changes)

    def flips_disabled(self) -> "PhysicsParams":
        return replace(self, bright_decay_tau=math.inf, dark_pump_tau_ref=math.inf)

    def as_dict(self) -> dict:
        return asdict(self)

    @property
    def fingerprint(self) -> str:
        text = ";".join(f"{k}={float(v).hex()}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def saturation_rate(power: float, params: PhysicsParams) -> float:
    """Detected fluorescence rate n0 * x / (1 + x) with x = P / P0."""
    if power < 0:
        raise ValueError(f"laser power must be >= 0, got {power!r}")
    x = power / params.p0_saturation
    return params.n0_saturation_rate * x / (1.0 + x)


def transition_probs(params: PhysicsParams) -> tuple[float, float]:
    """Per-sub-bin flip probabilities ``(p_bright_to_dark, p_dark_to_bright)``."""
    dt = params.sub_bin_duration
    scale = params.laser_power / params.reference_power
    p_bd = -math.expm1(-dt * scale / params.bright_decay_tau)
    p_db = -math.expm1(-dt * scale / params.dark_pump_tau_ref)
    return p_bd, p_db


def emission_means(params: PhysicsParams) -> tuple[float, float]:
    """Mean counts per sub-bin ``(bright, dark)``."""
    dt = params.sub_bin_duration
    bright = (saturation_rate(params.laser_power, params) + params.dark_rate) * dt
    return bright, params.dark_rate * dt


@dataclass(frozen=True)
class PhotonTrajectory:
    counts: np.ndarray
    true_label: State
    hidden_path: np.ndarray | None = None
    params_fingerprint: str = ""

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 1:
            raise ValueError("counts must be one-dimensional")
        if (counts < 0).any():
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "true_label", State(int(self.true_label)))
        if self.hidden_path is not None:
            path = np.asarray(self.hidden_path, dtype=np.int8)
            if path.shape != counts.shape:
                raise ValueError("hidden_path length must equal counts length")
            object.__setattr__(self, "hidden_path", path)

    def __len__(self):
        return len(self.counts)


@dataclass
class LabeledDataset:
    """Trajectories stored column-wise.

    ``counts`` has shape ``(n, n_sub_bins)``; ``indices`` are the global
    trajectory indices used for seed derivation, so two datasets drawn from the
    same master seed are disjoint iff their index sets are.
    """

    counts: np.ndarray
    labels: np.ndarray
    seed: int
    class_balance: float
    indices: np.ndarray
    hidden_paths: np.ndarray | None = None
    params_fingerprint: str = ""
    sub_bin_duration: float = float("nan")

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.counts.ndim != 2:
            raise ValueError("counts must be a 2-D array (trajectories x sub-bins)")
        if not (len(self.counts) == len(self.labels) == len(self.indices)):
            raise ValueError("counts, labels and indices must have equal length")
        if not 0.0 <= self.class_balance <= 1.0:
            raise ValueError("class_balance must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> PhotonTrajectory:
        hidden = None if self.hidden_paths is None else self.hidden_paths[i]
        return PhotonTrajectory(self.counts[i], State(int(self.labels[i])), hidden,
                                self.params_fingerprint)

    @property
    def trajectories(self) -> list[PhotonTrajectory]:
        return [self[i] for i in range(len(self))]

    @property
    def n_sub_bins(self) -> int:
        return self.counts.shape[1]

    @property
    def bright_fraction(self) -> float:
        return float(self.labels.mean()) if len(self) else float("nan")

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.counts.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()[:16]

    def subset(self, mask_or_index) -> "LabeledDataset":
        hidden = None if self.hidden_paths is None else self.hidden_paths[mask_or_index]
        return LabeledDataset(self.counts[mask_or_index], self.labels[mask_or_index],
                              self.seed, self.class_balance, self.indices[mask_or_index],
                              hidden, self.params_fingerprint, self.sub_bin_duration)

    def truncate(self, n_sub_bins: int) -> "LabeledDataset":
        """Keep only the first ``n_sub_bins`` of every trajectory."""
        if not 1 <= n_sub_bins <= self.n_sub_bins:
            raise ValueError(f"cannot truncate {self.n_sub_bins} sub-bins to {n_sub_bins}")
        hidden = None if self.hidden_paths is None else self.hidden_paths[:, :n_sub_bins]
        return LabeledDataset(self.counts[:, :n_sub_bins], self.labels, self.seed,
                              self.class_balance, self.indices, hidden,
                              self.params_fingerprint, self.sub_bin_duration)

    def rebin(self, factor: int) -> "LabeledDataset":
        counts = _rebin_counts(self.counts, factor)
        return LabeledDataset(counts, self.labels, self.seed, self.class_balance,
                              self.indices, None, self.params_fingerprint,
                              self.sub_bin_duration * factor)


# -- counter-based randomness -------------------------------------------------

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)

# stream tags for the different uses of a trajectory's random numbers
_STREAM_LABEL = 1
_STREAM_FLIP = 2
_STREAM_COUNT = 3


def _mix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finaliser, elementwise on uint64 (wrapping arithmetic)."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def trajectory_seed(master_seed: int, index) -> np.ndarray:
    """Seed of trajectory ``index`` under ``master_seed``.

    ``mix64(mix64(master) ^ mix64(index))``; both arguments are reduced mod 2**64.
    """
    master = np.uint64(int(master_seed) & 0xFFFFFFFFFFFFFFFF)
    idx = np.asarray(index, dtype=np.int64).astype(np.uint64)
    return _mix64(_mix64(master) ^ _mix64(idx))


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for a sub-experiment, a hash of ``seed`` and integer ``keys``."""
    out = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
    for k in keys:
        out = _mix64(out ^ _mix64(np.uint64(int(k) & 0xFFFFFFFFFFFFFFFF)))
    return int(out)


def _uniforms(seeds: np.ndarray, stream: int, n: int) -> np.ndarray:
    """Uniform [0, 1) variates, shape ``(len(seeds), n)``."""
    with np.errstate(over="ignore"):
        key = seeds[:, None] ^ (np.uint64(stream) << np.uint64(56))
        ctr = _mix64(np.arange(n, dtype=np.uint64) * _GOLDEN)
        bits = _mix64(key + ctr[None, :])
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def _poisson_inverse(u: np.ndarray, mean: np.ndarray) -> np.ndarray:
    """Poisson quantile function, vectorised by sequential CDF search."""
    mean = np.broadcast_to(mean, u.shape)
    k = np.zeros(u.shape, dtype=np.int64)
    pmf = np.exp(-mean)
    cdf = pmf.copy()
    active = u >= cdf
    j = 0
    while active.any():
        j += 1
        pmf = pmf * mean / j
        cdf = cdf + pmf
        k[active] = j
        active &= u >= cdf
        # float cdf may saturate just below 1 for huge u
        if j > 50 and not (pmf[active] > 0).any():
            break
    return k


def _sample_block(params: PhysicsParams, seeds: np.ndarray, initial: np.ndarray):
    n_bins = params.n_sub_bins
    p_bd, p_db = transition_probs(params)
    mu_b, mu_d = emission_means(params)

    path = np.empty((len(seeds), n_bins), dtype=np.int8)
    state = initial.astype(np.int8)
    path[:, 0] = state
    if n_bins > 1:
        flip_u = _uniforms(seeds, _STREAM_FLIP, n_bins - 1)
        for i in range(1, n_bins):
            flip_p = np.where(state == State.BRIGHT, p_bd, p_db)
            state = np.where(flip_u[:, i - 1] < flip_p, 1 - state, state).astype(np.int8)
            path[:, i] = state
    means = np.where(path == State.BRIGHT, mu_b, mu_d)
    counts = _poisson_inverse(_uniforms(seeds, _STREAM_COUNT, n_bins), means)
    return counts, path


def sample_trajectory(params: PhysicsParams, initial: State, seed: int) -> PhotonTrajectory:
    """One detection shot started in ``initial``; deterministic in ``seed``."""
    seeds = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    counts, path = _sample_block(params, seeds, np.array([int(initial)]))
    return PhotonTrajectory(counts[0], State(int(initial)), path[0], params.fingerprint)


def generate_dataset(params: PhysicsParams, n: int, balance: float = 0.5, seed: int = 0,
                     start: int = 0, keep_paths: bool = False,
                     block_size: int = 65536) -> LabeledDataset:
    """Draw ``n`` labelled trajectories with global indices ``start .. start+n-1``.

    Each trajectory's label is Bright with probability ``balance``, decided by
    the label stream of its own seed, so row ``i`` equals
    ``sample_trajectory(params, label_i, trajectory_seed(seed, start + i))``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0.0 <= balance <= 1.0:
        raise ValueError(f"balance must lie in [0, 1], got {balance}")
    indices = np.arange(start, start + n, dtype=np.int64)
    counts = np.empty((n, params.n_sub_bins), dtype=np.int64)
    labels = np.empty(n, dtype=np.int8)
    paths = np.empty((n, params.n_sub_bins), dtype=np.int8) if keep_paths else None
    for lo in range(0, n, block_size):
        hi = min(n, lo + block_size)
        seeds = trajectory_seed(seed, indices[lo:hi])
        lab = (_uniforms(seeds, _STREAM_LABEL, 1)[:, 0] < balance).astype(np.int8)
        c, p = _sample_block(params, seeds, lab)
        counts[lo:hi] = c
        labels[lo:hi] = lab
        if keep_paths:
            paths[lo:hi] = p
    return LabeledDataset(counts, labels, seed, balance, indices, paths,
                          params.fingerprint, params.sub_bin_duration)


def _rebin_counts(counts: np.ndarray, factor: int) -> np.ndarray:
    counts = np.asarray(counts)
    if int(factor) != factor or factor < 1:
        raise ValueError(f"rebin factor must be a positive integer, got {factor!r}")
    length = counts.shape[-1]
    if length % factor:
        raise ValueError(f"rebin factor {factor} does not divide {length} sub-bins")
    return counts.reshape(*counts.shape[:-1], length // factor, factor).sum(axis=-1)


def rebin(traj: PhotonTrajectory, factor: int) -> PhotonTrajectory:
    """Merge every ``factor`` consecutive sub-bins; the hidden path is dropped."""
    return PhotonTrajectory(_rebin_counts(traj.counts, factor), traj.true_label, None,
                            traj.params_fingerprint)
