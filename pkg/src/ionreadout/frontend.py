"""Discrete-time model of the photon-counting front end.

A system clock (default 100 MHz, 10 ns period) drives a frequency divider
whose phase resets on the first clock edge at or after the gate's rising
edge.  Every ``divider_ratio`` ticks the divider closes one sub-bin; the
counter increments on each PMT rising edge sampled while the gate is high.
All times are integer nanoseconds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .physics import PhotonTrajectory

__all__ = ["CounterConfig", "TtlEdgeStream", "simulate_ttl", "divider_counter",
           "sub_bin_boundaries", "CounterOverflowError"]


class CounterOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class CounterConfig:
    clock_hz: int = 100_000_000
    divider_ratio: int = 3000
    gate_high_ns: int = 300_000
    gate_frequency_hz: float = 1670.0
    n_sub_bins: int = 10

    def __post_init__(self):
        if self.divider_ratio < 1:
            raise ValueError("divider_ratio must be >= 1")
        if self.n_sub_bins < 1:
            raise ValueError("n_sub_bins must be >= 1")
        if self.clock_hz < 1 or 1_000_000_000 % self.clock_hz:
            raise ValueError("clock period must be a whole number of nanoseconds")
        if self.gate_high_ns < 1:
            raise ValueError("gate_high_ns must be >= 1")

    @property
    def tick_ns(self) -> int:
        return 1_000_000_000 // self.clock_hz

    @property
    def sub_bin_ns(self) -> int:
        return self.divider_ratio * self.tick_ns

    @property
    def sub_bin_duration(self) -> float:
        return self.sub_bin_ns * 1e-9

    @property
    def divided_clock_hz(self) -> float:
        return self.clock_hz / self.divider_ratio

    @property
    def gate_period_ns(self) -> float:
        return 1e9 / self.gate_frequency_hz


@dataclass(frozen=True)
class TtlEdgeStream:
    timestamps_ns: np.ndarray
    gate_start_ns: int
    gate_duration_ns: int

    def __post_init__(self):
        ts = np.asarray(self.timestamps_ns, dtype=np.int64)
        if ts.ndim != 1:
            raise ValueError("timestamps must be one-dimensional")
        if len(ts) > 1 and not (np.diff(ts) > 0).all():
            raise ValueError("edge timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps_ns", ts)

    def __len__(self):
        return len(self.timestamps_ns)


def _first_tick(gate_start_ns: int, tick_ns: int) -> int:
    return -(-int(gate_start_ns) // tick_ns) * tick_ns


def sub_bin_boundaries(gate_start_ns: int, cfg: CounterConfig) -> np.ndarray:
    """The ``n_sub_bins + 1`` divider edges that delimit the sub-bins of one gate."""
    t0 = _first_tick(gate_start_ns, cfg.tick_ns)
    return t0 + cfg.sub_bin_ns * np.arange(cfg.n_sub_bins + 1, dtype=np.int64)


def simulate_ttl(traj, cfg: CounterConfig, seed: int, gate_start_ns: int = 0,
                 sub_bin_duration: float | None = None) -> TtlEdgeStream:
    """Place ``counts[i]`` PMT edges on distinct clock ticks of sub-bin ``i``.

    ``traj`` is a ``PhotonTrajectory`` or a plain count sequence.  Tick
    positions are uniform without replacement inside each sub-bin.
    """
    counts = traj.counts if isinstance(traj, PhotonTrajectory) else np.asarray(traj)
    counts = np.asarray(counts, dtype=np.int64)
    if sub_bin_duration is not None and not np.isclose(sub_bin_duration, cfg.sub_bin_duration,
                                                       rtol=1e-9, atol=0):
        raise ValueError(f"trajectory sub-bin {sub_bin_duration} s does not match counter "
                         f"sub-bin {cfg.sub_bin_duration} s")
    if len(counts) > cfg.n_sub_bins:
        raise ValueError(f"{len(counts)} sub-bins exceed the configured {cfg.n_sub_bins}")
    if (counts > cfg.divider_ratio).any():
        i = int(np.argmax(counts > cfg.divider_ratio))
        raise CounterOverflowError(f"sub-bin {i}: {counts[i]} edges exceed "
                                   f"{cfg.divider_ratio} ticks per sub-bin")
    rng = np.random.default_rng(seed)
    starts = sub_bin_boundaries(gate_start_ns, cfg)[:-1]
    edges = []
    for i, k in enumerate(counts):
        if k:
            ticks = np.sort(rng.choice(cfg.divider_ratio, size=int(k), replace=False))
            edges.append(starts[i] + ticks * cfg.tick_ns)
    ts = np.concatenate(edges) if edges else np.empty(0, dtype=np.int64)
    return TtlEdgeStream(ts, int(gate_start_ns), int(cfg.gate_high_ns))


def divider_counter(stream: TtlEdgeStream, cfg: CounterConfig) -> np.ndarray:
    """Counts per sub-bin as the gated counter would register them.

    Edges outside the gate window are ignored; an edge on a divider edge
    belongs to the later sub-bin.
    """
    if stream.gate_duration_ns < cfg.n_sub_bins * cfg.sub_bin_ns:
        raise ValueError(f"gate of {stream.gate_duration_ns} ns is shorter than "
                         f"{cfg.n_sub_bins} x {cfg.sub_bin_ns} ns sub-bins")
    ts = stream.timestamps_ns
    gate_lo = stream.gate_start_ns
    gate_hi = stream.gate_start_ns + stream.gate_duration_ns
    t0 = _first_tick(gate_lo, cfg.tick_ns)
    # the counter samples edges on clock ticks
    sampled = _first_tick_arr(ts, cfg.tick_ns)
    inside = (ts >= gate_lo) & (ts < gate_hi) & (sampled >= t0)
    k = (sampled[inside] - t0) // cfg.sub_bin_ns
    k = k[k < cfg.n_sub_bins]
    return np.bincount(k, minlength=cfg.n_sub_bins).astype(np.int64)


def _first_tick_arr(ts: np.ndarray, tick_ns: int) -> np.ndarray:
    return -(-ts // tick_ns) * tick_ns
