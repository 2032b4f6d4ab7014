import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ionreadout.physics import (PhysicsParams, State, generate_dataset, rebin, sample_trajectory,
                                saturation_rate, trajectory_seed, transition_probs)
from ionreadout.physics import PhotonTrajectory
from ionreadout.textio import FormatError, load_dataset, save_dataset

DEFAULT = PhysicsParams()


# -- saturation curve --------------------------------------------------------------

def test_saturation_zero_power():
    assert saturation_rate(0.0, DEFAULT) == 0.0


def test_saturation_at_p0_is_half_of_n0():
    assert saturation_rate(2.91, DEFAULT) == pytest.approx(6.95e4, rel=1e-12)


def test_saturation_at_operating_power():
    # hand evaluation: 1.39e5 * (2.95 / 2.91) / (1 + 2.95 / 2.91)
    expected = 1.39e5 * 2.95 / (2.91 + 2.95)
    assert saturation_rate(2.95, DEFAULT) == pytest.approx(expected, rel=1e-12)
    assert saturation_rate(2.95, DEFAULT) == pytest.approx(6.997e4, rel=1e-4)


def test_negative_power_rejected():
    with pytest.raises(ValueError):
        saturation_rate(-0.1, DEFAULT)


@given(st.floats(0, 1e4), st.floats(0, 1e4))
def test_saturation_monotone_and_bounded(p1, p2):
    lo, hi = sorted((p1, p2))
    assert saturation_rate(lo, DEFAULT) <= saturation_rate(hi, DEFAULT) <= DEFAULT.n0_saturation_rate


def test_saturation_supremum():
    assert saturation_rate(1e6 * 2.91, DEFAULT) == pytest.approx(1.39e5, rel=1e-4)


# -- transition probabilities ----------------------------------------------------------

def test_flips_disabled_gives_zero_probabilities():
    assert transition_probs(DEFAULT.flips_disabled()) == (0.0, 0.0)


def test_bright_decay_probability_30us():
    p = DEFAULT.with_(sub_bin_duration=30e-6, bright_decay_tau=30e-3)
    p_bd, _ = transition_probs(p)
    assert p_bd == pytest.approx(1 - math.exp(-0.001), rel=1e-12)
    assert p_bd == pytest.approx(9.995e-4, rel=1e-4)


def test_zero_power_stops_pumping():
    _, p_db = transition_probs(DEFAULT.with_(laser_power=0.0))
    assert p_db == 0.0


def test_flip_rates_scale_with_power():
    p1 = transition_probs(DEFAULT.with_(laser_power=2.95))
    p2 = transition_probs(DEFAULT.with_(laser_power=5.90))
    for a, b in zip(p1, p2):
        assert -math.log1p(-b) == pytest.approx(-2 * math.log1p(-a), rel=1e-12)


@pytest.mark.parametrize("field,value", [("sub_bin_duration", 0.0), ("dark_rate", -1.0),
                                         ("n_sub_bins", 0), ("bright_decay_tau", -1.0),
                                         ("laser_power", -2.0)])
def test_invalid_params_rejected(field, value):
    with pytest.raises(ValueError):
        DEFAULT.with_(**{field: value})


# -- trajectories ------------------------------------------------------------------------

def test_dark_without_background_is_silent():
    p = DEFAULT.with_(dark_rate=0.0).flips_disabled()
    traj = sample_trajectory(p, State.DARK, seed=123)
    assert not traj.counts.any()


def test_sample_trajectory_deterministic():
    a = sample_trajectory(DEFAULT, State.BRIGHT, 7)
    b = sample_trajectory(DEFAULT, State.BRIGHT, 7)
    np.testing.assert_array_equal(a.counts, b.counts)
    np.testing.assert_array_equal(a.hidden_path, b.hidden_path)
    assert a.params_fingerprint == DEFAULT.fingerprint


@given(st.integers(0, 2**63), st.sampled_from([State.BRIGHT, State.DARK]))
def test_no_flips_means_constant_path(seed, initial):
    traj = sample_trajectory(DEFAULT.flips_disabled(), initial, seed)
    assert (traj.hidden_path == initial).all()
    assert traj.true_label == initial


def _bright_occupancy(params):
    """P(state_i = Bright | start Bright) for every sub-bin, by propagating the chain."""
    p_bd, p_db = transition_probs(params)
    occ, b = [], 1.0
    for _ in range(params.n_sub_bins):
        occ.append(b)
        b = b * (1 - p_bd) + (1 - b) * p_db
    return np.array(occ)


def test_bright_mean_total_matches_chain_expectation():
    # expected total = sum_i [occ_i * rate_B + (1 - occ_i) * rate_D] * dt
    p = DEFAULT.with_(bright_decay_tau=3.5e-3)
    occ = _bright_occupancy(p)
    rate_b = 1.39e5 * 2.95 / (2.91 + 2.95) + p.dark_rate
    expected = float(np.sum(occ * rate_b + (1 - occ) * p.dark_rate) * p.sub_bin_duration)
    data = generate_dataset(p, 20000, balance=1.0, seed=11)
    totals = data.counts.sum(axis=1)
    se = totals.std(ddof=1) / math.sqrt(len(totals))
    assert abs(totals.mean() - expected) < 3 * se


def test_bright_mean_total_without_flips_is_21_counts():
    p = DEFAULT.with_(dark_rate=0.0).flips_disabled()
    data = generate_dataset(p, 10000, balance=1.0, seed=5)
    totals = data.counts.sum(axis=1)
    se = totals.std(ddof=1) / math.sqrt(len(totals))
    assert abs(totals.mean() - 6.997e4 * 3e-4) < 3 * se + 0.01


def test_poisson_moments_per_sub_bin():
    p = DEFAULT.with_(n_sub_bins=4).flips_disabled()
    data = generate_dataset(p, 100_000, balance=1.0, seed=3)
    lam = (saturation_rate(2.95, p) + p.dark_rate) * 3e-6
    n = len(data)
    for col in data.counts.T:
        mean_se = math.sqrt(lam / n)
        # variance of the sample variance for Poisson: (mu4 - sigma^4) / n, mu4 = lam + 3 lam^2
        var_se = math.sqrt((lam + 3 * lam**2 - lam**2) / n)
        assert abs(col.mean() - lam) < 3 * mean_se
        assert abs(col.var(ddof=1) - lam) < 3 * var_se


# -- datasets ---------------------------------------------------------------------------

def test_single_bright_dataset():
    data = generate_dataset(DEFAULT, 1, balance=1.0, seed=0)
    assert len(data) == 1 and data.labels[0] == State.BRIGHT


def test_large_dataset_balance():
    data = generate_dataset(DEFAULT.with_(n_sub_bins=1), 200_000, 0.5, seed=9)
    assert 0.4978 <= data.bright_fraction <= 0.5022


@given(st.integers(1, 4000), st.floats(0, 1), st.integers(0, 2**32))
def test_balance_within_two_over_root_n(n, balance, seed):
    data = generate_dataset(DEFAULT.with_(n_sub_bins=1), n, balance, seed)
    assert abs(data.bright_fraction - balance) <= 2 / math.sqrt(n) + 1e-12


def test_dataset_deterministic_and_chunk_independent():
    a = generate_dataset(DEFAULT, 3000, 0.5, seed=42)
    b = generate_dataset(DEFAULT, 3000, 0.5, seed=42, block_size=97)
    np.testing.assert_array_equal(a.counts, b.counts)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_dataset_rows_are_order_independent():
    full = generate_dataset(DEFAULT, 500, 0.5, seed=1, keep_paths=True)
    tail = generate_dataset(DEFAULT, 100, 0.5, seed=1, start=400)
    np.testing.assert_array_equal(full.counts[400:], tail.counts)
    # every row is the stand-alone trajectory of its own seed
    i = 123
    one = sample_trajectory(DEFAULT, State(int(full.labels[i])), int(trajectory_seed(1, i)))
    np.testing.assert_array_equal(one.counts, full.counts[i])
    np.testing.assert_array_equal(one.hidden_path, full.hidden_paths[i])


def test_different_seeds_differ():
    a = generate_dataset(DEFAULT, 200, 0.5, seed=1)
    b = generate_dataset(DEFAULT, 200, 0.5, seed=2)
    assert not np.array_equal(a.counts, b.counts)


# -- rebinning --------------------------------------------------------------------------

def test_rebin_examples():
    t = PhotonTrajectory(np.array([1, 0, 2, 1]), State.BRIGHT, np.array([1, 1, 1, 0]))
    r = rebin(t, 2)
    assert r.counts.tolist() == [1, 3]
    assert r.hidden_path is None and r.true_label == State.BRIGHT
    assert rebin(t, 1).counts.tolist() == [1, 0, 2, 1]


def test_rebin_rejects_non_divisor():
    t = PhotonTrajectory(np.arange(5), State.DARK)
    with pytest.raises(ValueError):
        rebin(t, 2)


def test_rebin_100_to_10():
    t = sample_trajectory(DEFAULT, State.BRIGHT, 99)
    r = rebin(t, 10)
    assert len(r) == 10 and r.counts.sum() == t.counts.sum()


@given(st.lists(st.integers(0, 50), min_size=1, max_size=60), st.integers(1, 12))
def test_rebin_conserves_total(counts, factor):
    counts = counts[: len(counts) - len(counts) % factor] or [0] * factor
    t = PhotonTrajectory(np.array(counts), State.DARK)
    assert rebin(t, factor).counts.sum() == sum(counts)


# -- dataset files ------------------------------------------------------------------------

def test_dataset_file_round_trip(tmp_path):
    data = generate_dataset(DEFAULT.with_(n_sub_bins=7), 50, 0.3, seed=4, start=10)
    path = tmp_path / "d.txt"
    save_dataset(path, data)
    back = load_dataset(path)
    np.testing.assert_array_equal(back.counts, data.counts)
    np.testing.assert_array_equal(back.labels, data.labels)
    np.testing.assert_array_equal(back.indices, data.indices)
    assert back.params_fingerprint == data.params_fingerprint
    assert back.sub_bin_duration == data.sub_bin_duration
    lines = path.read_text().splitlines()
    assert len(lines) == 51 and lines[0].startswith("# ionreadout-dataset")


@pytest.mark.parametrize("body", ["1,2,3\n1,2\n", "2,0,0\n", "1,a,3\n"])
def test_dataset_file_malformed(tmp_path, body):
    path = tmp_path / "bad.txt"
    path.write_text("# ionreadout-dataset version=1 n_sub_bins=2 sub_bin_duration=3e-06\n" + body)
    with pytest.raises(FormatError):
        load_dataset(path)
