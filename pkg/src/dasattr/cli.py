"""Command-line entry point: ``dasattr <subcommand> ...``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import attribution as attr
from . import config as cfgmod
from . import data, ddpm, experiments, reports
from .errors import ConfigurationError, DasError
from .features import (FeatureMode, FeatureSet, extract_features, make_projection, plain_average,
                       store_read, store_write, timestep_grid)
from .pipeline import FeatureConfig

log = logging.getLogger("dasattr")

MANIFEST = "manifest.jsonl"


# ---------------------------------------------------------------------------
# manifest and cache checks


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def require(path, hint: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"{path} does not exist; {hint}")
    return path


class Step:
    """One command invocation: decides whether it is a no-op and logs a manifest line."""

    def __init__(self, command: str, inputs, params: dict, outputs, manifest_dir):
        self.command = command
        self.inputs = {str(p): file_hash(p) for p in inputs}
        self.config_hash = hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()[:16]
        self.outputs = [Path(p) for p in outputs]
        self.manifest = Path(manifest_dir) / MANIFEST
        self.start = time.perf_counter()

    def _entries(self):
        if not self.manifest.exists():
            return []
        out = []
        for line in self.manifest.read_text().splitlines():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                continue
        return out

    def up_to_date(self) -> bool:
        for entry in reversed(self._entries()):
            if entry.get("command") != self.command:
                continue
            if entry.get("inputs") != self.inputs or entry.get("config_hash") != self.config_hash:
                continue
            recorded = entry.get("outputs", {})
            if set(recorded) != {str(p) for p in self.outputs}:
                continue
            return all(p.exists() and file_hash(p) == recorded[str(p)] for p in self.outputs)
        return False

    def record(self):
        self.manifest.parent.mkdir(parents=True, exist_ok=True)
        entry = dict(command=self.command, inputs=self.inputs, config_hash=self.config_hash,
                     outputs={str(p): file_hash(p) for p in self.outputs},
                     wall_time=round(time.perf_counter() - self.start, 3))
        with self.manifest.open("a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _skip(step: Step) -> bool:
    if step.up_to_date():
        print(f"{step.command}: outputs up to date, nothing to do")
        return True
    return False


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    out = Path(args.out)
    step = Step("gen-data", [], vars_of(args, "name", "seed", "n", "split"), [out], out.parent)
    if _skip(step):
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    data.write_dataset(out, data.make_dataset(args.name, args.seed, args.n, args.split))
    step.record()
    print(f"wrote {out}")


def cmd_init_config(args):
    cfg = cfgmod.RunConfig.for_dataset(args.dataset, args.seed)
    if args.out_dir:
        cfg.output.dir = args.out_dir
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    cfgmod.save(args.out, cfg)
    print(f"wrote {args.out}")


def _train_config(args, dataset_name) -> ddpm.TrainConfig:
    if args.config:
        return cfgmod.load(require(args.config, "create one with `dasattr init-config`")).train
    return cfgmod.RunConfig.for_dataset(dataset_name, args.seed).train


def _checkpoint_path(model_path: Path, c: int) -> Path:
    return model_path.with_name(f"{model_path.stem}.ckpt{c}{model_path.suffix}")


def cmd_train(args):
    data_path = require(args.data, "create it with `dasattr gen-data`")
    ds = data.read_dataset(data_path)
    tc = _train_config(args, ds.name)
    out = Path(args.out)
    ckpts = [_checkpoint_path(out, c) for c in range(tc.num_checkpoints)]
    inputs = [data_path] + ([args.config] if args.config else [])
    step = Step("train", inputs, dict(train=repr(tc)), [out] + ckpts, out.parent)
    if _skip(step):
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    res = ddpm.train(ds.x, tc, ids=ds.ids)
    schedule = tc.schedule()
    ddpm.save_model(out, res.model, schedule)
    for path, model in zip(ckpts, res.checkpoints):
        ddpm.save_model(path, model, schedule)
    step.record()
    print(f"wrote {out} (final loss {res.losses[-1]:.4f}) and {len(res.checkpoints)} checkpoints")


def _read_mask(path, p: int) -> np.ndarray:
    text = require(path, "pass a file of 0/1 flags, one per model parameter").read_text().split()
    try:
        mask = np.array([int(v) for v in text], dtype=np.int64)
    except ValueError:
        raise ConfigurationError(f"{path}: mask entries must be 0 or 1") from None
    if mask.shape != (p,) or not np.isin(mask, (0, 1)).all():
        raise ConfigurationError(f"{path}: expected {p} entries of 0 or 1, got {mask.size}")
    return mask.astype(bool)


def cmd_featurize(args):
    model_path = require(args.model, "train one with `dasattr train`")
    data_path = require(args.data, "create it with `dasattr gen-data`")
    inputs = [model_path, data_path] + ([args.mask_file] if args.mask_file else [])
    out = Path(args.out)
    step = Step("featurize", inputs, vars_of(args, "mode", "k", "timesteps", "normalize", "noise_seed",
                                               "projection_seed", "draws"), [out], out.parent)
    if _skip(step):
        return
    model, schedule = ddpm.load_model(model_path)
    ds = data.read_dataset(data_path)
    mask = _read_mask(args.mask_file, model.num_params) if args.mask_file else None
    fc = FeatureConfig(timesteps=args.timesteps, k=args.k, projection_seed=args.projection_seed, mask=mask)
    proj = make_projection(fc.projection_spec(model.num_params), model.num_params)
    grid = timestep_grid(schedule.num_timesteps, args.timesteps)
    fs = extract_features(model, schedule, ds.x, ds.ids, grid, FeatureMode.parse(args.mode), proj,
                          args.noise_seed, args.draws)
    if args.normalize:
        fs = normalized_entries(fs)
    out.parent.mkdir(parents=True, exist_ok=True)
    store_write(out, fs)
    step.record()
    print(f"wrote {out}: {len(fs)} samples x {len(fs.timesteps)} timestep entries, k={fs.k}")


def normalized_entries(fs: FeatureSet) -> FeatureSet:
    """Rescale every coordinate to unit energy across timestep entries.

    A plain average of the result equals the normalized average of the input.
    """
    def unit(x):
        energy = np.sqrt((x * x).sum(axis=1, keepdims=True))
        return np.where(energy > 0, x / np.where(energy > 0, energy, 1.0), 0.0)

    return FeatureSet(fs.mode, fs.ids, fs.timesteps, unit(fs.blocks), unit(fs.residuals))


_STORE_METHODS = ("das", "trak", "dtrak", "relative_if", "renormalized_if", "grad_dot", "grad_cos")


def score_from_stores(method: str, train_fs: FeatureSet, target_fs: FeatureSet, lam: float):
    if train_fs.mode != target_fs.mode or train_fs.k != target_fs.k:
        raise ConfigurationError("train and target feature stores differ in mode or projection size")
    exact = train_fs.mode.variant == "exact"
    if (method == "das") != exact:
        raise ConfigurationError(f"method {method} needs {'exact' if method == 'das' else 'scalar'} "
                                 f"features, got {train_fs.mode}")
    train, target = plain_average(train_fs), plain_average(target_fs)
    meta = dict(timesteps=len(train_fs.timesteps), fingerprint=train_fs.fingerprint())
    if method in ("grad_dot", "grad_cos"):
        return attr.gradient_similarity(target, train, method[5:], **meta)
    kernel = attr.build_kernel(train, lam)
    if method == "das":
        return attr.das_score(target, train, kernel, **meta)
    if method == "trak":
        return attr.trak_score(target, train, kernel, attr.trak_residuals(train_fs), **meta)
    if method == "dtrak":
        return attr.dtrak_score(target, train, kernel, method=f"dtrak:{train_fs.mode.scalarizer}", **meta)
    if method == "relative_if":
        return attr.relative_if_score(target, train, kernel, **meta)
    return attr.renormalized_if_score(target, train, kernel, **meta)


def cmd_attribute(args):
    train_path = require(args.train_features, "build it with `dasattr featurize`")
    target_path = require(args.target_features, "build it with `dasattr featurize`")
    out = Path(args.out)
    step = Step("attribute", [train_path, target_path], vars_of(args, "method", "lam"), [out], out.parent)
    if _skip(step):
        return
    res = score_from_stores(args.method, store_read(train_path), store_read(target_path), args.lam)
    if args.lam is not None:
        res.lam = args.lam
    reports.write_text(out, reports.scores_csv([res]))
    step.record()
    print(f"wrote {out}")


def _run_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(require(args.config, "create one with `dasattr init-config`"))
    if args.out_dir:
        cfg.output.dir = args.out_dir
    return cfg


def _experiment(args, command: str, names, body):
    cfg = _run_config(args)
    out_dir = Path(cfg.output.dir)
    outputs = [out_dir / n for n in names]
    step = Step(command, [args.config], dict(config=cfgmod.to_text(cfg)), outputs, out_dir)
    if _skip(step):
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = args.jobs or os.cpu_count() or 1
    ws = experiments.prepare(cfg)
    body(cfg, ws, out_dir, out_dir / "cache", jobs)
    step.record()
    print(f"wrote {', '.join(str(p) for p in outputs)}")


def _write_lds(ws, out_dir, cache, jobs):
    outcome = experiments.lds_experiment(ws, cache_dir=cache, jobs=jobs)
    reports.write_text(out_dir / "lds_report.csv", reports.lds_csv(outcome.reports))
    reports.write_text(out_dir / "lds_sweep.csv", reports.sweep_csv(outcome.sweeps))
    reports.write_text(out_dir / "lds_report.svg",
                       reports.lds_chart(outcome.reports, f"LDS on {ws.cfg.data.name}"))
    for method, rep in outcome.reports.items():
        print(f"  {method:22s} LDS {rep.mean:+.3f} ± {rep.sem:.3f}  (lambda={rep.lam:g})")
    return outcome


def _write_counterfactual(ws, out_dir, cache, jobs, lambdas=None):
    reps = experiments.counterfactual_experiment(ws, lambdas=lambdas, cache_dir=cache, jobs=jobs)
    reports.write_text(out_dir / "counterfactual.csv", reports.counterfactual_csv(reps))
    reports.write_text(out_dir / "counterfactual.svg",
                       reports.counterfactual_chart(reps, f"Top-{ws.cfg.counterfactual.top_k} removal"))
    for method, rep in reps.items():
        print(f"  {method:22s} L2 {rep.mean_l2:.4f}  cosine {rep.mean_cosine:.4f}")


def _write_toyexp(ws, out_dir, jobs):
    rep = experiments.toy_experiment(ws, jobs=jobs)
    pairs, summary = reports.output_function_csv(rep)
    reports.write_text(out_dir / "toyexp_pairs.csv", pairs)
    reports.write_text(out_dir / "toyexp_summary.csv", summary)
    reports.write_text(out_dir / "toyexp.svg", reports.bar_chart(
        ["output difference", "loss difference"], [rep.pearson_output, rep.pearson_loss],
        title="Correlation with regeneration distance", ylabel="Pearson r"))
    print(f"  Pearson(output diff, L2) {rep.pearson_output:+.3f}   "
          f"Pearson(loss diff, L2) {rep.pearson_loss:+.3f}")


LDS_FILES = ("lds_report.csv", "lds_sweep.csv", "lds_report.svg")
CF_FILES = ("counterfactual.csv", "counterfactual.svg")
TOY_FILES = ("toyexp_pairs.csv", "toyexp_summary.csv", "toyexp.svg")


def cmd_lds(args):
    _experiment(args, "lds", LDS_FILES, lambda cfg, ws, out, cache, jobs: _write_lds(ws, out, cache, jobs))


def cmd_counterfactual(args):
    _experiment(args, "counterfactual", CF_FILES,
                lambda cfg, ws, out, cache, jobs: _write_counterfactual(ws, out, cache, jobs))


def cmd_toyexp(args):
    _experiment(args, "toyexp", TOY_FILES, lambda cfg, ws, out, cache, jobs: _write_toyexp(ws, out, jobs))


def cmd_run(args):
    def body(cfg, ws, out, cache, jobs):
        data.write_dataset(out / "train.csv", ws.dataset)
        ddpm.save_model(out / "model.bin", ws.base.model, ws.schedule)
        reports.write_text(out / "config.cfg", cfgmod.to_text(cfg))
        outcome = _write_lds(ws, out, cache, jobs)
        _write_counterfactual(ws, out, cache, jobs, outcome.lambdas)
        _write_toyexp(ws, out, jobs)

    _experiment(args, "run", ("train.csv", "model.bin", "config.cfg") + LDS_FILES + CF_FILES + TOY_FILES,
                body)


# ---------------------------------------------------------------------------
# argument parsing


def vars_of(args, *names) -> dict:
    return {n: getattr(args, n) for n in names}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dasattr", description="Training-data attribution for miniature DDPMs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    s.add_argument("--name", required=True, choices=data.DATASETS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--split", choices=("train", "val"), default="train")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("init-config", help="write the default run config for a dataset")
    s.add_argument("--dataset", required=True, choices=data.DATASETS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", help="output directory recorded in the config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init_config)

    s = sub.add_parser("train", help="train a noise predictor and save it with its checkpoints")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="run config; its [train] section is used")
    s.add_argument("--seed", type=int, default=0, help="training seed when no config is given")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("featurize", help="extract projected per-sample gradient features")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--mode", default="exact", help="exact or scalar:<simple_loss|square_norm|output_sum|output_avg>")
    s.add_argument("--k", type=int, default=512, help="projection size; 0 keeps all parameters")
    s.add_argument("--timesteps", type=int, default=10)
    s.add_argument("--normalize", action="store_true",
                   help="store per-coordinate unit-energy entries, so averaging them gives the normalized average")
    s.add_argument("--mask-file", help="0/1 flag per parameter selecting the gradient subset")
    s.add_argument("--noise-seed", type=int, default=0, help="0 for training data, 1 for targets by convention")
    s.add_argument("--projection-seed", type=int, default=0)
    s.add_argument("--draws", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("attribute", help="score targets against training samples from feature stores")
    s.add_argument("--train-features", required=True)
    s.add_argument("--target-features", required=True)
    s.add_argument("--method", default="das", choices=_STORE_METHODS,
                   help="dtrak uses the scalarizer the stores were built with")
    s.add_argument("--lambda", dest="lam", type=float, default=1e-3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attribute)

    for name, func, text in (("lds", cmd_lds, "linear datamodeling score benchmark"),
                             ("counterfactual", cmd_counterfactual, "top-k removal and regeneration"),
                             ("toyexp", cmd_toyexp, "loss change vs output change as predictors of generation change"),
                             ("run", cmd_run, "full pipeline: data, model, LDS, counterfactual and toyexp")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True)
        s.add_argument("--out-dir", help="override the config's output directory")
        s.add_argument("--jobs", type=int, default=None, help="worker processes (default: logical cores)")
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except DasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
