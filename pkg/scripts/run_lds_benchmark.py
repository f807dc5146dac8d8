"""LDS of every configured method on the bundled datasets, one row per (dataset, seed, method)."""

import time

from _common import parser, setup

from dasattr import config as C
from dasattr import experiments as X
from dasattr import reports

METHODS = ("das", "trak", "dtrak:simple_loss", "dtrak:square_norm", "raw_dot", "raw_cos", "random")


def main():
    p = parser(__doc__)
    p.add_argument("--methods", nargs="+", default=list(METHODS))
    p.add_argument("--timesteps", type=int, default=10)
    p.add_argument("--normalize", action="store_true")
    args = p.parse_args()
    setup(args)
    rows = []
    for name in args.datasets:
        for seed in args.seeds:
            start = time.perf_counter()
            cfg = C.RunConfig.for_dataset(name, seed)
            cfg.methods.methods = tuple(args.methods)
            cfg.features.timesteps = args.timesteps
            cfg.features.normalize = args.normalize
            ws = X.prepare(cfg)
            outcome = X.lds_experiment(ws, cache_dir=args.cache, jobs=args.jobs)
            stem = args.out / f"lds_{name}_{seed}"
            reports.write_text(f"{stem}.csv", reports.lds_csv(outcome.reports))
            reports.write_text(f"{stem}_sweep.csv", reports.sweep_csv(outcome.sweeps))
            reports.write_text(f"{stem}.svg", reports.lds_chart(outcome.reports, f"LDS {name} seed {seed}"))
            for method, rep in outcome.reports.items():
                rows.append((name, seed, method, outcome.lambdas[method], rep.mean, rep.sem))
            print(f"{name} seed {seed}: " + "  ".join(f"{m}={r.mean:.3f}" for m, r in outcome.reports.items())
                  + f"  ({time.perf_counter() - start:.0f} s)", flush=True)
    reports.write_text(args.out / "lds_summary.csv",
                       reports.to_csv(("dataset", "seed", "method", "lambda", "lds_mean", "lds_sem"), rows))


if __name__ == "__main__":
    main()
