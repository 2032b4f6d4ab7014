"""From photomultiplier pulses to an integer-only verdict.

The embedded readout counts TTL edges in ten 30 us sub-bins and feeds the
counts to a small fully connected network evaluated in Q16.16 fixed point.
This demo trains that network, converts it, pushes shots through the
simulated counter and checks the integer verdicts against the float ones.

    python demos/02_onboard_pipeline.py [--n-train 50000]
"""

import argparse

import numpy as np

from ionreadout import bench
from ionreadout.frontend import CounterConfig, divider_counter, simulate_ttl, sub_bin_boundaries
from ionreadout.neural import TrainConfig, build_fcnn_onboard, predict, train
from ionreadout.quantized import fixed_infer, latency_bench, max_activation_bound, quantize


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-train", type=int, default=50_000)
    ap.add_argument("--n-test", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    params = bench.ONBOARD_PRESET
    train_set, test_set = bench.held_out_split(params, args.n_train, args.n_test, args.seed)
    result = train(build_fcnn_onboard(10), train_set,
                   TrainConfig(total_samples=4 * args.n_train, seed=args.seed), heldout=test_set)
    print(f"float network: {result.heldout_accuracy:.4%} on {len(test_set)} held-out shots")

    fpnet = quantize(result.spec, result.params)
    print(f"largest weight rounding error {fpnet.max_quant_error:.2e}; "
          f"worst-case activation for counts 0..50: {max_activation_bound(fpnet):.1f}")

    # The gate can open at any phase of the 100 MHz clock; the divider restarts on the
    # first tick after the rising edge, so sub-bins start at most one tick late.
    cfg = CounterConfig()
    rng = np.random.default_rng(args.seed)
    phase = int(rng.integers(0, 10**6))
    print(f"gate opens at {phase} ns; sub-bin edges at "
          f"{(sub_bin_boundaries(phase, cfg)[:3] - phase).tolist()} ns after it ...")

    shots = test_set.counts[:2000]
    counted = np.array([divider_counter(simulate_ttl(c, cfg, seed=i,
                                                     gate_start_ns=int(rng.integers(0, 10**9))),
                                        cfg) for i, c in enumerate(shots)])
    print(f"counter reproduced {int((counted == shots).all(axis=1).sum())}/{len(shots)} shots exactly")

    fixed = fixed_infer(fpnet, counted, keep_trace=False)
    float_v = predict(result.spec, result.params, shots)
    print(f"integer vs float verdicts agree on {(fixed.verdicts == float_v).mean():.4%}; "
          f"saturation events {fixed.saturation_events}")
    print(latency_bench(fpnet, 1000, shots).render())


if __name__ == "__main__":
    main()
