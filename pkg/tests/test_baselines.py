import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import poisson

from ionreadout.baselines import (HmmModel, ThresholdModel, brute_force_posterior, fit_threshold,
                                  forward_posterior, hmm_loglik, ml_classify, ml_log_odds,
                                  threshold_classify)
from ionreadout.physics import LabeledDataset, PhysicsParams, State, generate_dataset
from ionreadout.weights import load_model, save_model


def _dataset(sums_bright, sums_dark):
    counts = np.array([[s] for s in list(sums_bright) + list(sums_dark)])
    labels = [1] * len(sums_bright) + [0] * len(sums_dark)
    return LabeledDataset(counts, labels, 0, 0.5, np.arange(len(labels)))


def _best_threshold_by_enumeration(data):
    sums = data.counts.sum(axis=1)
    accs = [((sums >= t) == data.labels).mean() for t in range(int(sums.max()) + 2)]
    return int(np.argmax(accs))


# -- threshold --------------------------------------------------------------------------

def test_threshold_separable_returns_smallest_optimum():
    data = _dataset([5, 6, 9], [0, 1, 1])
    assert fit_threshold(data).threshold == 2


def test_threshold_all_ties_returns_smallest():
    # one bright and one dark, both summing to 3: every t scores 50%
    data = _dataset([3], [3])
    assert fit_threshold(data).threshold == _best_threshold_by_enumeration(data) == 0


def test_threshold_single_class_rejected():
    with pytest.raises(ValueError):
        fit_threshold(_dataset([3, 4], []))


@given(st.lists(st.integers(0, 30), min_size=1, max_size=40),
       st.lists(st.integers(0, 30), min_size=1, max_size=40))
def test_threshold_fit_matches_enumeration(bright, dark):
    data = _dataset(bright, dark)
    assert fit_threshold(data).threshold == _best_threshold_by_enumeration(data)


def test_threshold_classify_conventions():
    m = ThresholdModel(1)
    assert threshold_classify([0, 0, 0], m) == State.DARK
    assert threshold_classify([2, 1], ThresholdModel(3)) == State.BRIGHT
    sparse_shot = np.zeros(100, dtype=int)
    sparse_shot[::5] = 1
    sparse_shot[:1] = 2
    assert threshold_classify(sparse_shot, ThresholdModel(2)) == State.BRIGHT


@given(st.lists(st.integers(0, 10), min_size=1, max_size=20), st.integers(0, 40),
       st.integers(0, 19))
def test_threshold_monotone(counts, t, where):
    m = ThresholdModel(t)
    more = list(counts)
    more[where % len(more)] += 1
    if threshold_classify(counts, m) == State.BRIGHT:
        assert threshold_classify(more, m) == State.BRIGHT


# -- likelihood ---------------------------------------------------------------------------

def _enumerated_loglik(counts, model, initial):
    """log P(counts | initial) by summing the probability of every hidden path."""
    a = np.array([[1 - model.p_db, model.p_db], [model.p_bd, 1 - model.p_bd]])
    lam = [model.lambda_dark, model.lambda_bright]
    total = 0.0
    for rest in itertools.product((0, 1), repeat=len(counts) - 1):
        path = (int(initial),) + rest
        p = poisson.pmf(counts[0], lam[path[0]])
        for i in range(1, len(counts)):
            p *= a[path[i - 1], path[i]] * poisson.pmf(counts[i], lam[path[i]])
        total += p
    return math.log(total)


models = st.builds(HmmModel, st.floats(0.05, 5), st.floats(0.001, 1), st.floats(0, 1),
                   st.floats(0, 1), st.floats(0.01, 0.99))


def test_loglik_single_bin_closed_form():
    m = HmmModel(2.1, 0.01, 0.0, 0.0)
    for k in range(6):
        assert hmm_loglik([k], m, State.BRIGHT) == pytest.approx(poisson.logpmf(k, 2.1), abs=1e-12)


@given(models, st.lists(st.integers(0, 6), min_size=2, max_size=2),
       st.sampled_from([State.BRIGHT, State.DARK]))
def test_loglik_two_bins_matches_enumeration(model, counts, initial):
    expected = _enumerated_loglik(counts, model, initial)
    assert hmm_loglik(counts, model, initial) == pytest.approx(expected, abs=1e-12)


@given(st.floats(0.01, 5), st.floats(0, 1), st.floats(0, 1),
       st.lists(st.integers(0, 8), min_size=1, max_size=15))
def test_equal_rates_make_initial_state_irrelevant(lam, p_bd, p_db, counts):
    m = HmmModel(lam, lam, p_bd, p_db)
    assert hmm_loglik(counts, m, State.BRIGHT) == pytest.approx(
        hmm_loglik(counts, m, State.DARK), abs=1e-9)


def test_loglik_finite_for_long_sequences():
    m = HmmModel.from_params(PhysicsParams())
    counts = np.full(100, 5)
    assert np.isfinite(hmm_loglik(counts, m, State.DARK))


def test_likelihood_normalisation():
    m = HmmModel(0.7, 0.05, 0.1, 0.2)
    for bound in (4, 30):
        grid = np.array(list(itertools.product(range(bound + 1), repeat=2 if bound == 30 else 4)))
        for init in (State.BRIGHT, State.DARK):
            total = float(np.exp(hmm_loglik(grid, m, init)).sum())
            assert total <= 1 + 1e-12
            if bound == 30:
                assert total == pytest.approx(1.0, abs=1e-6)


# -- maximum likelihood classification -------------------------------------------------

def test_ml_all_zero_counts_is_dark():
    m = HmmModel(2.0, 0.003, 0.0, 0.0)
    assert ml_classify(np.zeros(100, dtype=int), m)[0] == State.DARK


def test_ml_tie_is_dark():
    m = HmmModel(1.0, 1.0, 0.0, 0.0)
    rng = np.random.default_rng(0)
    verdicts, scores = ml_classify(rng.integers(0, 5, size=(200, 10)), m)
    assert (verdicts == State.DARK).all() and (scores == 0).all()


def test_ml_without_flips_is_a_threshold_rule():
    lam_b, lam_d, n = 0.21, 0.003, 100
    m = HmmModel(lam_b, lam_d, 0.0, 0.0)
    cut = n * (lam_b - lam_d) / math.log(lam_b / lam_d)   # LLR > 0  <=>  sum > cut
    rng = np.random.default_rng(1)
    for s in range(61):
        # two placements of the same total: all in one bin, and spread at random
        spread = np.bincount(rng.integers(0, n, size=s), minlength=n)
        lumped = np.zeros(n, dtype=int)
        lumped[0] = s
        for counts in (spread, lumped):
            assert ml_classify(counts, m)[0] == State(int(s > cut))


@given(models, st.lists(st.integers(0, 6), min_size=1, max_size=12), st.floats(1e-3, 1e3))
def test_ml_verdict_invariant_to_prior_scaling(model, counts, c):
    ll_b = hmm_loglik(counts, model, State.BRIGHT)
    ll_d = hmm_loglik(counts, model, State.DARK)
    scaled = np.array([ll_d + math.log(c * (1 - model.prior_bright)),
                       ll_b + math.log(c * model.prior_bright)])
    expected = State.BRIGHT if scaled[1] > scaled[0] else State.DARK
    verdict, score = ml_classify(counts, model)
    if abs(scaled[1] - scaled[0]) > 1e-9:
        assert verdict == expected


def test_ml_batch_matches_single():
    m = HmmModel.from_params(PhysicsParams())
    data = generate_dataset(PhysicsParams(), 50, seed=3)
    verdicts, scores = ml_classify(data.counts, m)
    for i in range(5):
        v, s = ml_classify(data.counts[i], m)
        assert v == verdicts[i] and s == pytest.approx(scores[i], abs=1e-12)


def test_adaptive_ml():
    m = HmmModel.from_params(PhysicsParams())
    data = generate_dataset(PhysicsParams(), 300, seed=8)
    v, s, used = ml_classify(data.counts, m, adaptive=True)
    assert ((used >= 1) & (used <= 100)).all() and (used < 100).any()
    full_v, _ = ml_classify(data.counts, m)
    v_inf, _, used_inf = ml_classify(data.counts, m, adaptive=True, log_odds_bound=math.inf)
    np.testing.assert_array_equal(v_inf, full_v)
    assert (used_inf == 100).all()
    # the stopping score is the log-odds of exactly the prefix consumed
    for i in range(10):
        assert s[i] == pytest.approx(ml_log_odds(data.counts[i, :used[i]], m), abs=1e-9)


# -- brute-force oracle ------------------------------------------------------------------

def test_brute_force_symmetric_single_bin():
    assert brute_force_posterior([3], HmmModel(1.0, 1.0, 0.2, 0.3)) == pytest.approx(0.5)


def test_brute_force_refuses_long_sequences():
    with pytest.raises(ValueError):
        brute_force_posterior(np.zeros(21, dtype=int), HmmModel(1.0, 0.1, 0.1, 0.1))


def test_brute_force_absorbing_pump():
    # p_db = 1, p_bd = 0: a dark start turns bright after the first bin, so only bin 0 informs
    lb, ld = 2.0, 0.1
    m = HmmModel(lb, ld, 0.0, 1.0)
    k1, k2 = 1, 4
    expected = poisson.pmf(k1, lb) / (poisson.pmf(k1, lb) + poisson.pmf(k1, ld))
    assert brute_force_posterior([k1, k2], m) == pytest.approx(expected, abs=1e-14)
    assert forward_posterior([k1, k2], m) == pytest.approx(expected, abs=1e-14)


@given(models, st.lists(st.integers(0, 8), min_size=1, max_size=12))
def test_forward_posterior_matches_brute_force(model, counts):
    assert forward_posterior(counts, model) == pytest.approx(
        brute_force_posterior(counts, model), abs=1e-10)


def test_log_odds_zero_when_both_hypotheses_impossible():
    # zero background and no flips: counts in a dark start are impossible; prior 0 kills bright
    m = HmmModel(1.0, 0.0, 0.0, 0.0, prior_bright=0.0)
    assert ml_log_odds([2, 1], m) == 0.0


# -- model files ----------------------------------------------------------------------

def test_model_files_round_trip(tmp_path):
    for model in (ThresholdModel(4, "abc"), HmmModel(0.21, 0.003, 1e-3, 1e-5, 0.4)):
        save_model(tmp_path / "m.txt", model)
        assert load_model(tmp_path / "m.txt") == model
