"""Remove each method's top-k training samples, retrain, and measure how far generations move."""

from _common import parser, setup

from dasattr import config as C
from dasattr import experiments as X
from dasattr import reports


def main():
    p = parser(__doc__, datasets=("gauss2",))
    p.add_argument("--top-k", type=int, default=20)
    args = p.parse_args()
    setup(args)
    rows = []
    for name in args.datasets:
        for seed in args.seeds:
            cfg = C.RunConfig.for_dataset(name, seed)
            cfg.counterfactual.top_k = args.top_k
            methods = cfg.counterfactual.methods
            ws = X.prepare(cfg)
            # λ comes from the held-out sweep, exactly as in the LDS benchmark
            lambdas, _ = X.choose_lambdas(ws, methods, cache_dir=args.cache, jobs=args.jobs)
            reps = X.counterfactual_experiment(ws, lambdas=lambdas, cache_dir=args.cache, jobs=args.jobs)
            stem = args.out / f"counterfactual_{name}_{seed}"
            reports.write_text(f"{stem}.csv", reports.counterfactual_csv(reps))
            reports.write_text(f"{stem}.svg", reports.counterfactual_chart(reps))
            rows += [(name, seed, m, r.top_k, r.mean_l2, r.mean_cosine) for m, r in reps.items()]
            print(f"{name} seed {seed}: " + "  ".join(f"{m} L2={r.mean_l2:.3f}" for m, r in reps.items()),
                  flush=True)
    reports.write_text(args.out / "counterfactual_summary.csv",
                       reports.to_csv(("dataset", "seed", "method", "top_k", "mean_l2", "mean_cosine"), rows))


if __name__ == "__main__":
    main()
