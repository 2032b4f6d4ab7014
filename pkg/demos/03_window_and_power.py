"""How long to look, and how hard to shine.

Longer windows collect more light but give the ion more time to flip.
This demo traces accuracy against window length at the operating point,
then repeats the comparison at higher laser power where flips are faster.

    python demos/03_window_and_power.py [--n 20000]
"""

import argparse

from ionreadout import bench
from ionreadout.neural import TrainConfig
from ionreadout.physics import PhysicsParams


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=20_000, help="training and test shots each")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    params = PhysicsParams()
    bins = [10, 20, 40, 60, 80, 100]
    data = bench.held_out_split(params, args.n, args.n, args.seed)
    for method in ("threshold", "ml"):
        rep = bench.fidelity_curve(method, params, bins, seed=args.seed, data=data)
        print(rep.render())
        print(f"  first window reaching 99%: {bench.min_bins_for(rep)} sub-bins\n")

    # At the onboard binning, compare 5 and 10 sub-bins across powers.
    cfg = TrainConfig(total_samples=4 * args.n)
    sweeps = {}
    for method in ("threshold", "onboard"):
        sweeps[method] = bench.power_sweep(method, bench.SWEEP_POWERS, [5, 10], n_train=args.n,
                                           n_test=args.n, seed=args.seed, train_cfg=cfg)
        print(sweeps[method].render())
    print("\nchange in accuracy going from 5 to 10 sub-bins:")
    for power in bench.SWEEP_POWERS:
        deltas = [bench.sweep_accuracy(sweeps[m], power, 10) - bench.sweep_accuracy(sweeps[m], power, 5)
                  for m in ("threshold", "onboard")]
        print(f"  {power:5.2f} uW  threshold {deltas[0] * 100:+.3f} pp   network {deltas[1] * 100:+.3f} pp")


if __name__ == "__main__":
    main()
