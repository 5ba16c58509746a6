"""Replicate the simulation benchmark: policy tree vs Q- and O-learning.

Sweeps the strong- and weak-effect generator variants over the requested
training sizes and prints mean test-set value and assignment accuracy per
method, next to the oracle and best-single-arm references for the last
test draw. Full scale (the defaults) takes a few minutes per variant on
one core; --quick shrinks everything for a smoke run.

    python3 scripts/benchmark_experiment.py --quick
    python3 scripts/benchmark_experiment.py --out results/ --threads 4
"""

from __future__ import annotations

import argparse
import time
from pathlib import Path

from eegpolicy.sim import default_spec, generate_dataset, run_benchmark, weaken_effects


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train-n", type=int, nargs="+", default=[200, 500])
    ap.add_argument("--replicates", type=int, default=20)
    ap.add_argument("--test-n", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--effects", nargs="+", default=["strong", "weak"],
                    choices=["strong", "weak"])
    ap.add_argument("--out", default=None,
                    help="directory for per-variant rows.csv / summary.json")
    ap.add_argument("--quick", action="store_true",
                    help="3 replicates, n_test=1000, train 100/200")
    args = ap.parse_args()

    if args.quick:
        args.train_n, args.replicates, args.test_n = [100, 200], 3, 1000

    for effect in args.effects:
        spec = default_spec()
        if effect == "weak":
            spec = weaken_effects(spec)
        started = time.perf_counter()
        report = run_benchmark(spec, train_sizes=tuple(args.train_n),
                               n_test=args.test_n,
                               n_replicates=args.replicates, seed=args.seed,
                               max_workers=args.threads)
        elapsed = time.perf_counter() - started

        reference = generate_dataset(spec, args.test_n, seed=args.seed + 999)
        print(f"\n== {effect} effects ({args.replicates} replicates, "
              f"test n={args.test_n}, {elapsed:.0f} s) ==")
        print(f"  oracle value {reference.oracle_value():.4f}, "
              f"best single arm {reference.best_single_arm_value():.4f}")
        for tn in args.train_n:
            print(f"  train n={tn}")
            for method, stats in report.method_means(tn).items():
                print(f"    {method:<12} value {stats['mean_value']:.4f}  "
                      f"accuracy {stats['mean_accuracy']:.4f}  "
                      f"({stats['n_ok']} ok)")
        errors = [r for r in report.rows if r.error]
        if errors:
            print(f"  WARNING: {len(errors)} replicate(s) errored")

        if args.out:
            out = Path(args.out) / effect
            out.mkdir(parents=True, exist_ok=True)
            report.to_csv(out / "rows.csv")
            report.to_json(out / "summary.json")
            print(f"  wrote {out}/rows.csv and summary.json")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
