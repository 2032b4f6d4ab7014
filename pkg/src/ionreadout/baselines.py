"""Threshold and hidden-Markov maximum-likelihood discriminators."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .physics import LabeledDataset, PhysicsParams, State, emission_means, transition_probs

__all__ = [
    "ThresholdModel",
    "HmmModel",
    "fit_threshold",
    "threshold_classify",
    "hmm_loglik",
    "ml_classify",
    "ml_log_odds",
    "forward_posterior",
    "brute_force_posterior",
    "MAX_ORACLE_LENGTH",
]

MAX_ORACLE_LENGTH = 20


@dataclass(frozen=True)
class ThresholdModel:
    threshold: int
    fitted_on: str = ""

    def classify(self, counts) -> np.ndarray:
        counts = np.asarray(counts)
        return (counts.sum(axis=-1) >= self.threshold).astype(np.int8)


def fit_threshold(data: LabeledDataset) -> ThresholdModel:
    """Smallest integer ``t`` maximising training accuracy of ``sum >= t -> Bright``."""
    if len(data) == 0:
        raise ValueError("cannot fit a threshold on an empty dataset")
    labels = data.labels.astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("threshold fit needs both bright and dark examples")
    sums = data.counts.sum(axis=1)
    top = int(sums.max()) + 1
    bright_hist = np.bincount(sums[labels], minlength=top + 1)
    dark_hist = np.bincount(sums[~labels], minlength=top + 1)
    # correct(t) = #bright with sum >= t + #dark with sum < t, for t = 0..top
    bright_ge = np.concatenate([np.cumsum(bright_hist[::-1])[::-1], [0]])[: top + 1]
    dark_lt = np.concatenate([[0], np.cumsum(dark_hist)])[: top + 1]
    correct = bright_ge + dark_lt
    return ThresholdModel(int(np.argmax(correct)), data.fingerprint)


def threshold_classify(counts, model: ThresholdModel) -> State:
    return State(int(np.sum(counts) >= model.threshold))


@dataclass(frozen=True)
class HmmModel:
    """Two-state chain with Poisson emissions; rates are mean counts per sub-bin."""

    lambda_bright: float
    lambda_dark: float
    p_bd: float
    p_db: float
    prior_bright: float = 0.5

    def __post_init__(self):
        if self.lambda_bright < 0 or self.lambda_dark < 0:
            raise ValueError("emission rates must be >= 0")
        for name in ("p_bd", "p_db", "prior_bright"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v!r}")

    @classmethod
    def from_params(cls, params: PhysicsParams, prior_bright: float = 0.5) -> "HmmModel":
        lam_b, lam_d = emission_means(params)
        p_bd, p_db = transition_probs(params)
        return cls(lam_b, lam_d, p_bd, p_db, prior_bright)

    def log_transitions(self) -> np.ndarray:
        # rows: from (dark, bright); columns: to (dark, bright)
        with np.errstate(divide="ignore"):
            return np.log(np.array([[1.0 - self.p_db, self.p_db],
                                    [self.p_bd, 1.0 - self.p_bd]]))


def _log_poisson(counts: np.ndarray, lam: float) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if lam == 0.0:
        return np.where(counts == 0, 0.0, -np.inf)
    return counts * math.log(lam) - lam - gammaln(counts + 1.0)


def _emission_logs(counts: np.ndarray, model: HmmModel) -> np.ndarray:
    """Shape ``counts.shape + (2,)``; index 0 dark, 1 bright."""
    return np.stack([_log_poisson(counts, model.lambda_dark),
                     _log_poisson(counts, model.lambda_bright)], axis=-1)


def _forward_logliks(counts: np.ndarray, model: HmmModel, prefixes: bool = False) -> np.ndarray:
    """log P(counts | initial state) for both initial states.

    ``counts`` has shape ``(..., n)``; result has shape ``(..., 2)`` with
    index 0 for initial Dark and 1 for initial Bright.  With ``prefixes`` the
    result is ``(..., n, 2)``: the likelihood of every prefix ``counts[..., :k+1]``.
    """
    counts = np.asarray(counts)
    n = counts.shape[-1]
    if n == 0:
        raise ValueError("counts must be non-empty")
    emis = _emission_logs(counts, model)
    log_a = model.log_transitions()
    batch = counts.shape[:-1]
    out = np.empty(batch + ((n,) if prefixes else ()) + (2,))
    for init in (State.DARK, State.BRIGHT):
        alpha = np.full(batch + (2,), -np.inf)
        alpha[..., init] = emis[..., 0, init]
        a_d, a_b = alpha[..., 0], alpha[..., 1]
        if prefixes:
            out[..., 0, init] = np.logaddexp(a_d, a_b)
        for i in range(1, n):
            # alpha'[j] = log(sum_k exp(alpha[k] + log_a[k, j])) + emis[i, j]
            a_d, a_b = (np.logaddexp(a_d + log_a[0, 0], a_b + log_a[1, 0]) + emis[..., i, 0],
                        np.logaddexp(a_d + log_a[0, 1], a_b + log_a[1, 1]) + emis[..., i, 1])
            if prefixes:
                out[..., i, init] = np.logaddexp(a_d, a_b)
        if not prefixes:
            out[..., init] = np.logaddexp(a_d, a_b)
    return out


def hmm_loglik(counts, model: HmmModel, initial: State) -> float | np.ndarray:
    """log P(counts | initial state) by the forward recursion in log space.

    Accepts a single sequence or a batch of shape ``(n_shots, n_sub_bins)``.
    """
    ll = _forward_logliks(counts, model)[..., int(initial)]
    return float(ll) if np.ndim(ll) == 0 else ll


def ml_log_odds(counts, model: HmmModel, prefixes: bool = False) -> np.ndarray:
    """Prior-weighted log-odds log P(Bright, counts) - log P(Dark, counts).

    With ``prefixes`` the log-odds after every sub-bin are returned along the last axis.
    """
    ll = _forward_logliks(counts, model, prefixes)
    with np.errstate(divide="ignore"):
        log_prior = np.log([1.0 - model.prior_bright, model.prior_bright])
    joint = ll + log_prior
    with np.errstate(invalid="ignore"):
        odds = joint[..., 1] - joint[..., 0]
    # both hypotheses impossible or both certain: no preference
    return np.where(np.isnan(odds), 0.0, odds)


def forward_posterior(counts, model: HmmModel) -> float | np.ndarray:
    """Posterior probability that the shot started Bright, via the forward recursion."""
    odds = ml_log_odds(counts, model)
    post = 1.0 / (1.0 + np.exp(-odds))
    return float(post) if np.ndim(post) == 0 else post


def _adaptive(counts: np.ndarray, model: HmmModel, bound: float):
    """Early-stopping variant: stop at the first prefix whose |log-odds| >= bound."""
    counts = np.atleast_2d(counts)
    odds = ml_log_odds(counts, model, prefixes=True)
    decided = np.abs(odds) >= bound
    decided[:, -1] = True
    stop = np.argmax(decided, axis=1)
    scores = odds[np.arange(len(counts)), stop]
    return (scores > 0).astype(np.int8), scores, stop + 1


def ml_classify(counts, model: HmmModel, adaptive: bool = False,
                log_odds_bound: float = math.log(1e4)):
    """Most probable initial state and its log-odds score.

    Log-odds exactly zero resolves to Dark.  For a single sequence returns
    ``(State, score)``; for a batch returns ``(verdicts, scores)`` arrays.
    With ``adaptive=True`` the number of sub-bins consumed is returned as a
    third element.
    """
    counts = np.asarray(counts)
    single = counts.ndim == 1
    if adaptive:
        v, s, used = _adaptive(counts, model, log_odds_bound)
        if single:
            return State(int(v[0])), float(s[0]), int(used[0])
        return v, s, used
    scores = ml_log_odds(counts, model)
    verdicts = (scores > 0).astype(np.int8)
    if single:
        return State(int(verdicts)), float(scores)
    return verdicts, scores


def brute_force_posterior(counts, model: HmmModel) -> float:
    """Posterior P(initial Bright | counts) by summing over all 2**n hidden paths.

    Independent of the forward recursion; refuses sequences longer than
    ``MAX_ORACLE_LENGTH``.
    """
    counts = np.asarray(counts)
    n = len(counts)
    if n > MAX_ORACLE_LENGTH:
        raise ValueError(f"path enumeration refused for length {n} > {MAX_ORACLE_LENGTH}")
    if n == 0:
        raise ValueError("counts must be non-empty")
    emis = _emission_logs(counts, model)
    log_a = model.log_transitions()
    with np.errstate(divide="ignore"):
        log_prior = np.log([1.0 - model.prior_bright, model.prior_bright])
    paths = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int64)
    terms = log_prior[paths[:, 0]] + emis[np.arange(n), paths].sum(axis=1)
    if n > 1:
        terms = terms + log_a[paths[:, :-1], paths[:, 1:]].sum(axis=1)
    start_bright = paths[:, 0] == 1
    log_b = logsumexp(terms[start_bright])
    log_d = logsumexp(terms[~start_bright])
    if np.isneginf(log_b) and np.isneginf(log_d):
        return 0.5
    return float(1.0 / (1.0 + np.exp(log_d - log_b)))
