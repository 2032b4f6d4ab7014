"""Walk through one readout experiment from photons to verdicts.

We simulate detection shots of a trapped ion, look at what the photon counts
of bright and dark shots look like, and then compare the count-threshold rule,
the hidden-Markov likelihood test and a small convolutional network on the
same held-out shots.

    python demos/01_readout_walkthrough.py [--n-train 20000] [--params calibrated.txt]
"""

import argparse

import numpy as np

from ionreadout import bench
from ionreadout.baselines import HmmModel, fit_threshold, ml_classify
from ionreadout.neural import TrainConfig, build_cnn, predict, train
from ionreadout.physics import PhysicsParams, saturation_rate, transition_probs
from ionreadout.textio import load_physics


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-train", type=int, default=20_000)
    ap.add_argument("--n-test", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--params", help="physics file, e.g. from `ionreadout bench calibrate`")
    args = ap.parse_args()

    params = load_physics(args.params) if args.params else PhysicsParams()
    p_bd, p_db = transition_probs(params)
    print(f"Fluorescence at {params.laser_power} uW: {saturation_rate(params.laser_power, params):.0f}"
          f" photons/s, so a bright shot collects about "
          f"{saturation_rate(params.laser_power, params) * params.sub_bin_duration * params.n_sub_bins:.1f}"
          f" counts in {params.n_sub_bins} x {params.sub_bin_duration * 1e6:.0f} us.")
    print(f"Per sub-bin flip probabilities: bright->dark {p_bd:.2e}, dark->bright {p_db:.2e}\n")

    train_set, test_set = bench.held_out_split(params, args.n_train, args.n_test, args.seed)

    # Total counts tell most of the story; flips make the two histograms overlap.
    sums = test_set.counts.sum(axis=1)
    for label, name in ((1, "bright"), (0, "dark")):
        hist = np.bincount(sums[test_set.labels == label], minlength=12)[:12]
        print(f"{name:>6} totals 0..11: {hist.tolist()}")

    thr = fit_threshold(train_set)
    acc_thr = (thr.classify(test_set.counts) == test_set.labels).mean()
    print(f"\nthreshold t={thr.threshold}: {acc_thr:.4%}")

    hmm = HmmModel.from_params(params)
    verdicts, scores = ml_classify(test_set.counts, hmm)
    print(f"likelihood test:  {(verdicts == test_set.labels).mean():.4%}")

    # Where do the two disagree?  Mostly on shots whose light arrives late or stops early.
    differ = np.flatnonzero(verdicts != thr.classify(test_set.counts))
    if differ.size:
        i = differ[0]
        print(f"  e.g. shot {test_set.indices[i]} (label {test_set.labels[i]}), "
              f"counts at {np.flatnonzero(test_set.counts[i]).tolist()} -> log-odds {scores[i]:+.2f}")

    result = train(build_cnn(params.n_sub_bins), train_set,
                   TrainConfig(total_samples=4 * args.n_train, seed=args.seed), heldout=test_set)
    acc_cnn = (predict(result.spec, result.params, test_set.counts) == test_set.labels).mean()
    print(f"CNN ({result.spec.param_count()} parameters): {acc_cnn:.4%}")


if __name__ == "__main__":
    main()
