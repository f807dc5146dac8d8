"""Does the change in noise-predictor output or in loss better track the change in a generation?"""

from _common import parser, setup

from dasattr import config as C
from dasattr import experiments as X
from dasattr import reports


def main():
    p = parser(__doc__, datasets=("gauss2",))
    p.add_argument("--pairs", type=int, default=60)
    args = p.parse_args()
    setup(args)
    rows = []
    for name in args.datasets:
        for seed in args.seeds:
            cfg = C.RunConfig.for_dataset(name, seed)
            cfg.toyexp.pairs = args.pairs
            rep = X.toy_experiment(X.prepare(cfg), jobs=args.jobs)
            pairs, summary = reports.output_function_csv(rep)
            reports.write_text(args.out / f"toyexp_{name}_{seed}_pairs.csv", pairs)
            reports.write_text(args.out / f"toyexp_{name}_{seed}_summary.csv", summary)
            rows.append((name, seed, rep.pearson_output, rep.pearson_loss, rep.degenerate))
            print(f"{name} seed {seed}: Pearson(output, L2)={rep.pearson_output:.3f} "
                  f"Pearson(loss, L2)={rep.pearson_loss:.3f}", flush=True)
    reports.write_text(args.out / "toyexp_summary.csv",
                       reports.to_csv(("dataset", "seed", "pearson_output", "pearson_loss", "degenerate"), rows))


if __name__ == "__main__":
    main()
