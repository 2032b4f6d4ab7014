"""Command-line entry point: ``ionreadout <subcommand> [flags]``.

Exit status: 0 success, 1 an ``--assert`` check failed, 2 usage or input error.
Every run writes its fully resolved configuration (``key = value`` lines)
next to its output; feeding that file back through ``--config`` repeats the
run.  Flags given on the command line override values from ``--config``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench
from .baselines import HmmModel, fit_threshold, ml_classify
from .frontend import CounterConfig, divider_counter, simulate_ttl, sub_bin_boundaries
from .neural import (TrainConfig, build_cnn, build_fcnn_onboard, build_fcnn_table,
                     build_logistic, predict, train)
from .physics import PhysicsParams, derive_seed, generate_dataset
from .quantized import (fixed_infer, latency_bench, load_fixed, max_activation_bound,
                        quantize, save_fixed)
from .textio import FormatError, format_float, load_dataset, load_physics, save_dataset, save_physics
from .weights import load_model, load_weights, save_model, save_weights

log = logging.getLogger("ionreadout")

ARCHS = {"cnn": build_cnn, "fcnn": build_fcnn_table, "onboard": build_fcnn_onboard,
         "logistic": build_logistic}
PRESETS = ("calibrate", "table1", "fig4", "fig6", "fig7", "onboard")
# checked after --config is merged, so a saved config can supply them
REQUIRED = {"simulate": ("out",), "fit-threshold": ("out", "data"), "fit-ml": ("out",),
            "train": ("out", "data"), "eval": ("data",), "quantize": ("out", "weights"),
            "ttl-roundtrip": ("data",)}


class AssertionFailed(Exception):
    pass


class UsageError(Exception):
    pass


# -- argument plumbing ----------------------------------------------------------------

def _physics_flags(p):
    g = p.add_argument_group("physics overrides")
    for f in dataclasses.fields(PhysicsParams):
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f"phys_{f.name}",
                       type=int if f.name == "n_sub_bins" else float)
    g.add_argument("--params", help="physics parameter file (from `bench calibrate`)")
    g.add_argument("--no-flips", action="store_true", help="disable state flips")


def _counter_flags(p):
    g = p.add_argument_group("counter")
    g.add_argument("--clock-hz", type=int, default=100_000_000)
    g.add_argument("--divider-ratio", type=int, default=3000)
    g.add_argument("--gate-ns", type=int, default=300_000)
    g.add_argument("--sub-bins", type=int, default=10)


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--assert", dest="check", action="store_true",
                   help="exit 1 if an acceptance threshold is violated")
    p.add_argument("--config", help="key = value file of flag defaults")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ionreadout", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated dataset file")
    _common(p)
    _physics_flags(p)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--balance", type=float, default=0.5)
    p.add_argument("--start", type=int, default=0, help="first trajectory index")

    p = sub.add_parser("fit-threshold", help="fit a threshold model to a dataset")
    _common(p)
    p.add_argument("--data")

    p = sub.add_parser("fit-ml", help="write the HMM model for given physics")
    _common(p)
    _physics_flags(p)
    p.add_argument("--prior-bright", type=float, default=0.5)

    p = sub.add_parser("train", help="train a network on a dataset")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--heldout")
    p.add_argument("--arch", choices=sorted(ARCHS), default="onboard")
    p.add_argument("--total-samples", type=int, default=200_000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr-start", type=float, default=1e-3)
    p.add_argument("--lr-end", type=float, default=1e-4)
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--min-accuracy", type=float, default=0.99)

    p = sub.add_parser("eval", help="evaluate a model or network on a dataset")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--model", help="threshold/hmm model file")
    p.add_argument("--weights", help="network weight file")
    p.add_argument("--fixed-point", action="store_true",
                   help="also run Q16.16 inference and report verdict agreement")
    p.add_argument("--quantized", help="quantized network file (default: quantize --weights)")
    p.add_argument("--min-accuracy", type=float, default=0.0)
    p.add_argument("--min-agreement", type=float, default=0.999)

    p = sub.add_parser("quantize", help="convert a weight file to Q16.16")
    _common(p)
    p.add_argument("--weights")

    p = sub.add_parser("ttl-roundtrip", help="counts -> TTL edges -> gated counter -> counts")
    _common(p)
    _counter_flags(p)
    p.add_argument("--data")
    p.add_argument("--phases", type=int, default=1000)

    p = sub.add_parser("bench", help="run a benchmark preset")
    _common(p)
    _physics_flags(p)
    p.add_argument("preset", choices=PRESETS)
    p.add_argument("--calibrate", choices=("auto", "yes", "no"), default="auto",
                   help="calibrate starting from the given physics (auto: unless --params)")
    p.add_argument("--n-train", type=int, default=200_000)
    p.add_argument("--n-test", type=int, default=50_000)
    p.add_argument("--total-samples", type=int, default=200_000)
    p.add_argument("--bins", help="comma-separated window lengths")
    p.add_argument("--powers", help="comma-separated laser powers in microwatt")
    return ap


def _read_config(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def parse_args(argv):
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        args = _apply_config(ap, args, argv)
    missing = [f"--{d}" for d in REQUIRED.get(args.command, ()) if getattr(args, d) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required {', '.join(missing)}")
    return args


def _apply_config(ap, args, argv):
    sub = ap._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help",)}
    values = _read_config(args.config)
    unknown = sorted(set(values) - set(actions) - {"command"})
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    defaults = {}
    for key, text in values.items():
        if key == "command":
            continue
        act = actions[key]
        if text == "None":
            defaults[key] = None
        elif isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = text.lower() in ("1", "true", "yes")
        else:
            defaults[key] = act.type(text) if act.type else text
    sub.set_defaults(**defaults)
    return ap.parse_args(argv)


def resolve(args):
    """Fold physics files and overrides into explicit values so the logged config stands alone."""
    if hasattr(args, "no_flips"):
        if getattr(args, "calibrate", None) == "auto":
            args.calibrate = "no" if args.params else "yes"
        params = _physics(args)
        for key, value in params.as_dict().items():
            setattr(args, f"phys_{key}", value)
        args.params, args.no_flips = None, False
    return args


def _log_config(args, where):
    items = {k: v for k, v in sorted(vars(args).items()) if k not in ("config",)}
    text = "\n".join(f"{k} = {v}" for k, v in items.items())
    log.info("resolved config:\n%s", text)
    if where is not None:
        Path(where).write_text(f"# ionreadout resolved config\n{text}\n")


def _config_path(args):
    if not args.out:
        return None
    out = Path(args.out)
    if out.suffix:
        return out.with_name(out.name + ".config")
    out.mkdir(parents=True, exist_ok=True)
    return out / f"{args.command}.config"


def _physics(args) -> PhysicsParams:
    base = load_physics(args.params) if getattr(args, "params", None) else PhysicsParams()
    changes = {f.name: getattr(args, f"phys_{f.name}") for f in dataclasses.fields(PhysicsParams)
               if getattr(args, f"phys_{f.name}", None) is not None}
    params = base.with_(**changes)
    return params.flips_disabled() if args.no_flips else params


def _check(args, ok: bool, message: str):
    print(("PASS " if ok else "FAIL ") + message)
    if args.check and not ok:
        raise AssertionFailed(message)


def _need(path):
    if not Path(path).exists():
        raise UsageError(f"no such file: {path}")
    return path


# -- subcommands ---------------------------------------------------------------------

def cmd_simulate(args):
    params = _physics(args)
    data = generate_dataset(params, args.n, args.balance, args.seed, start=args.start)
    save_dataset(args.out, data)
    sums = data.counts.sum(axis=1)
    bright = data.labels == 1
    print(f"wrote {len(data)} trajectories x {data.n_sub_bins} sub-bins to {args.out}")
    print(f"bright fraction {data.bright_fraction:.4f}")
    for name, mask in (("bright", bright), ("dark", ~bright)):
        mean = sums[mask].mean() if mask.any() else float("nan")
        print(f"mean total counts ({name}): {mean:.3f}")


def cmd_fit_threshold(args):
    data = load_dataset(_need(args.data))
    model = fit_threshold(data)
    save_model(args.out, model)
    acc = float((model.classify(data.counts) == data.labels).mean())
    print(f"threshold {model.threshold}; training accuracy {acc:.6f}")


def cmd_fit_ml(args):
    model = HmmModel.from_params(_physics(args), args.prior_bright)
    save_model(args.out, model)
    print(f"hmm model: {model}")


def cmd_train(args):
    data = load_dataset(_need(args.data))
    heldout = load_dataset(_need(args.heldout)) if args.heldout else None
    spec = ARCHS[args.arch](data.n_sub_bins)
    cfg = TrainConfig(args.lr_start, args.lr_end, args.batch_size, args.total_samples,
                      args.seed, args.standardize)
    result = train(spec, data, cfg, heldout=heldout)
    save_weights(args.out, result.spec, result.params)
    for step, lr, loss in result.log[:: max(1, len(result.log) // 10)]:
        log.info("step %d lr %.3g loss %.5f", step, lr, loss)
    print(f"held-out accuracy {result.heldout_accuracy:.6f}")
    _check(args, result.heldout_accuracy >= args.min_accuracy,
           f"held-out accuracy {result.heldout_accuracy:.6f} >= {args.min_accuracy}")


def cmd_quantize(args):
    spec, params = load_weights(_need(args.weights))
    fpnet = quantize(spec, params)
    save_fixed(args.out, fpnet)
    bound = max_activation_bound(fpnet)
    print(f"quantized {spec.param_count()} parameters; max quantization error "
          f"{fpnet.max_quant_error:.3g}; activation bound for inputs 0..50: {bound:.4g}")


def cmd_eval(args):
    data = load_dataset(_need(args.data))
    if bool(args.model) == bool(args.weights):
        raise UsageError("give exactly one of --model or --weights")
    if args.model:
        model = load_model(_need(args.model))
        if isinstance(model, HmmModel):
            verdicts = ml_classify(data.counts, model)[0]
        else:
            verdicts = model.classify(data.counts)
    else:
        spec, params = load_weights(_need(args.weights))
        verdicts = predict(spec, params, data.counts)
    acc = float((verdicts == data.labels).mean())
    print(f"accuracy {acc:.6f} on {len(data)} samples")
    _check(args, acc >= args.min_accuracy, f"accuracy {acc:.6f} >= {args.min_accuracy}")
    if args.fixed_point:
        if not args.weights:
            raise UsageError("--fixed-point needs --weights")
        fpnet = load_fixed(_need(args.quantized)) if args.quantized else quantize(spec, params)
        fixed = fixed_infer(fpnet, data.counts, keep_trace=False)
        agree = float((fixed.verdicts == verdicts).mean())
        print(f"fixed-point agreement {agree * 100:.3f}% ; saturation events "
              f"{fixed.saturation_events}")
        _check(args, agree >= args.min_agreement,
               f"fixed/float agreement {agree:.6f} >= {args.min_agreement}")


def _counter(args) -> CounterConfig:
    return CounterConfig(clock_hz=args.clock_hz, divider_ratio=args.divider_ratio,
                         gate_high_ns=args.gate_ns, n_sub_bins=args.sub_bins)


def cmd_ttl_roundtrip(args):
    data = load_dataset(_need(args.data))
    cfg = _counter(args)
    rng = np.random.default_rng(args.seed)
    phases = rng.integers(0, 1_000_000, size=max(args.phases, 1))
    exact = 0
    for i in range(len(data)):
        stream = simulate_ttl(data.counts[i], cfg, derive_seed(args.seed, i),
                              gate_start_ns=int(phases[i % len(phases)]),
                              sub_bin_duration=data.sub_bin_duration)
        exact += np.array_equal(divider_counter(stream, cfg)[: data.n_sub_bins], data.counts[i])
    worst = 0
    nominal_step = cfg.sub_bin_ns
    for ph in phases[: args.phases]:
        b = sub_bin_boundaries(int(ph), cfg)
        worst = max(worst, int(np.max(np.abs(b - (ph + nominal_step * np.arange(len(b)))))))
    print(f"divided clock {cfg.divided_clock_hz:.3f} Hz; sub-bin {cfg.sub_bin_ns} ns")
    print(f"exact round trips: {exact}/{len(data)}")
    print(f"max sub-bin boundary error over {args.phases} gate phases: {worst} ns")
    _check(args, exact == len(data), "TTL round trip exact for every trajectory")
    _check(args, worst <= cfg.tick_ns, f"boundary error {worst} ns <= {cfg.tick_ns} ns")


# -- bench presets ---------------------------------------------------------------------

def _ints(text, default):
    return [int(t) for t in text.split(",")] if text else list(default)


def _floats(text, default):
    return [float(t) for t in text.split(",")] if text else list(default)


def _calibrated(args, out: Path) -> PhysicsParams:
    if args.calibrate != "yes":
        return _physics(args)
    result = bench.calibrate(seed=args.seed, start=_physics(args))
    save_physics(out / "calibrated_physics.txt", result.params,
                 {"threshold_accuracy": format_float(result.accuracy), "seed": args.seed})
    log.info("calibrated: %s (threshold accuracy %.5f)", result.params, result.accuracy)
    return result.params


def cmd_bench(args):
    out = Path(args.out or "bench_out")
    out.mkdir(parents=True, exist_ok=True)
    cfg = TrainConfig(total_samples=args.total_samples)
    params = _calibrated(args, out)
    onboard = params.with_(sub_bin_duration=30e-6, n_sub_bins=10)
    reports = []
    if args.preset == "calibrate":
        target = bench.CalibrationTarget()
        acc = bench.threshold_accuracy(params, args.n_train, args.n_test,
                                       derive_seed(args.seed, 99))
        print(f"threshold accuracy on fresh data: {acc:.5f}")
        _check(args, abs(acc - target.accuracy) <= target.tolerance,
               f"calibrated threshold accuracy {acc:.5f} within {target.tolerance} of "
               f"{target.accuracy}")
    elif args.preset == "table1":
        table, text = bench.method_table(params, args.n_train, args.n_test, args.seed, train_cfg=cfg,
                                         workers=args.threads)
        reports += list(table.values())
        (out / "table1.txt").write_text(text + "\n")
        print(text)
        a = {m: r.results[0].accuracy for m, r in table.items()}
        _check(args, a["ml"] >= a["threshold"], "accuracy(ML) >= accuracy(threshold)")
        _check(args, a["cnn"] >= a["ml"] - 0.001, "accuracy(CNN) >= accuracy(ML) - 0.1 pp")
        _check(args, min(a["threshold"], a["ml"], a["cnn"]) >= 0.985, "all >= 98.5%")
    elif args.preset == "fig4":
        bins = _ints(args.bins, range(4, params.n_sub_bins + 1, 4))
        data = bench.held_out_split(params, args.n_train, args.n_test, args.seed)
        found = {}
        for method in ("threshold", "ml", "cnn"):
            rep = bench.fidelity_curve(method, params, bins, seed=args.seed, train_cfg=cfg,
                                       workers=args.threads, data=data)
            reports.append(rep)
            found[method] = bench.min_bins_for(rep)
            print(rep.render())
        print(f"minimum sub-bins for 99%: {found}")
        thr, cnn = found["threshold"], found["cnn"]
        ok = cnn is not None and (thr is None or cnn <= 0.7 * thr)
        _check(args, ok, f"bins_CNN ({cnn}) <= 0.7 x bins_threshold ({thr})")
    elif args.preset in ("fig6", "fig7"):
        powers = _floats(args.powers, bench.SWEEP_POWERS)
        bins = _ints(args.bins, range(1, 11))
        methods = ("onboard",) if args.preset == "fig6" else ("threshold", "ml", "onboard")
        sweeps = {}
        for m in methods:
            sweeps[m] = bench.power_sweep(m, powers, bins, onboard, args.n_train, args.n_test,
                                          args.seed, cfg, args.threads)
            reports.append(sweeps[m])
            print(sweeps[m].render())
        if args.preset == "fig6":
            mid = sorted(powers)[len(powers) // 2]
            acc = bench.sweep_accuracy(sweeps["onboard"], mid, 5)
            _check(args, acc >= 0.99, f"onboard FCNN at {mid} uW, 5 bins: {acc:.5f} >= 0.99")
        else:
            top = max(powers)
            t5, t10 = (bench.sweep_accuracy(sweeps["threshold"], top, b) for b in (5, 10))
            n5, n10 = (bench.sweep_accuracy(sweeps["onboard"], top, b) for b in (5, 10))
            _check(args, t10 < t5, f"threshold at {top} uW falls 5->10 bins ({t5:.5f} -> {t10:.5f})")
            _check(args, n10 >= n5 - 0.002,
                   f"FCNN at {top} uW holds 5->10 bins ({n5:.5f} -> {n10:.5f})")
    elif args.preset == "onboard":
        _bench_onboard(args, onboard, cfg, out)
    for rep in reports:
        rep.to_csv(out)


def _bench_onboard(args, params, cfg, out):
    train_set, test_set = bench.held_out_split(params, args.n_train, args.n_test, args.seed)
    result = train(build_fcnn_onboard(10), train_set,
                   dataclasses.replace(cfg, seed=derive_seed(args.seed, 5)), heldout=test_set)
    save_weights(out / "onboard_weights.txt", result.spec, result.params)
    fpnet = quantize(result.spec, result.params)
    save_fixed(out / "onboard_fixed.txt", fpnet)
    float_v = predict(result.spec, result.params, test_set.counts)
    fixed = fixed_infer(fpnet, test_set.counts, keep_trace=False)
    agree = float((fixed.verdicts == float_v).mean())
    bound = max_activation_bound(fpnet, 0, max(50, int(test_set.counts.max())))
    print(f"float accuracy {result.heldout_accuracy:.5f}; fixed accuracy "
          f"{(fixed.verdicts == test_set.labels).mean():.5f}")
    print(f"agreement {agree * 100:.3f}%; saturation events {fixed.saturation_events}; "
          f"interval bound {bound:.4g}")
    stats = latency_bench(fpnet, 2000, test_set.counts[:2000])
    print(stats.render())
    (out / "onboard_latency.txt").write_text(stats.render() + "\n")
    _check(args, agree >= 0.999, f"fixed/float agreement {agree:.5f} >= 0.999")
    _check(args, bound < 2 ** 15 and fixed.saturation_events == 0, "no saturation")


COMMANDS = {"simulate": cmd_simulate, "fit-threshold": cmd_fit_threshold, "fit-ml": cmd_fit_ml,
            "train": cmd_train, "eval": cmd_eval, "quantize": cmd_quantize,
            "ttl-roundtrip": cmd_ttl_roundtrip, "bench": cmd_bench}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        resolve(args)
        _log_config(args, _config_path(args))
        COMMANDS[args.command](args)
    except AssertionFailed:
        return 1
    except (UsageError, FormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
