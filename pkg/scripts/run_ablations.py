"""DAS LDS under different timestep budgets and with normalized averaging (gauss2 by default)."""

from _common import parser, setup

from dasattr import config as C
from dasattr import experiments as X
from dasattr import reports

VARIANTS = {"t10": dict(timesteps=10), "t100": dict(timesteps=100),
            "t10_normalized": dict(timesteps=10, normalize=True)}


def main():
    p = parser(__doc__, datasets=("gauss2",))
    p.add_argument("--methods", nargs="+", default=["das", "dtrak:square_norm"])
    args = p.parse_args()
    setup(args)
    rows = []
    for name in args.datasets:
        for seed in args.seeds:
            base = None
            for label, settings in VARIANTS.items():
                cfg = C.RunConfig.for_dataset(name, seed)
                cfg.methods.methods = tuple(args.methods)
                for key, value in settings.items():
                    setattr(cfg.features, key, value)
                ws = X.prepare(cfg, base=base)
                base = ws.base
                outcome = X.lds_experiment(ws, cache_dir=args.cache, jobs=args.jobs)
                for method, rep in outcome.reports.items():
                    rows.append((name, seed, label, method, outcome.lambdas[method], rep.mean))
                print(f"{name} seed {seed} {label}: "
                      + "  ".join(f"{m}={r.mean:.3f}" for m, r in outcome.reports.items()), flush=True)
    reports.write_text(args.out / "ablations.csv",
                       reports.to_csv(("dataset", "seed", "variant", "method", "lambda", "lds_mean"), rows))


if __name__ == "__main__":
    main()
