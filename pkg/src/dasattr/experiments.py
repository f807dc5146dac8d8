"""End-to-end experiments driven by a RunConfig."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import data, ddpm
from . import evaluation as ev
from .config import RunConfig
from .pipeline import KERNEL_METHODS, Attributor, Targets, generated_targets, validation_targets

log = logging.getLogger(__name__)


@dataclass
class Workspace:
    """Dataset, base model, target groups and attributor for one configuration."""

    cfg: RunConfig
    dataset: data.Dataset
    base: ddpm.TrainResult
    schedule: ddpm.DiffusionSchedule
    attributor: Attributor
    val: Targets
    gen: Targets
    holdout: list

    @property
    def report_groups(self):
        return [self.val, self.gen]

    def plan(self) -> ev.SubsetPlan:
        c = self.cfg.lds
        return ev.plan_subsets(len(self.dataset), c.subsets, c.fraction, c.master_seed, c.seeds_per_subset)

    def protocol(self) -> ev.GroundTruthProtocol:
        return ev.GroundTruthProtocol(self.cfg.lds.gt_timesteps, self.cfg.lds.gt_draws,
                                      self.cfg.features.target_noise_seed)


def prepare(cfg: RunConfig, dataset: data.Dataset = None, base: ddpm.TrainResult = None) -> Workspace:
    """Build (or adopt) the training set and base model, then the target groups."""
    cfg.validate()
    d = cfg.data
    if dataset is None:
        dataset = data.make_dataset(d.name, d.seed, d.n)
    if base is None:
        base = ddpm.train(dataset.x, cfg.train, ids=dataset.ids)
    schedule = cfg.train.schedule()
    val_all = data.make_dataset(d.name, d.seed, d.val_targets + d.holdout_targets, split="val").x
    val = validation_targets(val_all[:d.val_targets])
    gen_seeds = range(d.gen_targets + d.holdout_targets)
    gen_all = generated_targets(base.model, schedule, gen_seeds, cfg.features.journey_steps)
    gen = gen_all.select(np.arange(d.gen_targets))
    holdout = []
    if d.holdout_targets:
        holdout = [validation_targets(val_all[d.val_targets:], first_key=d.val_targets, prefix="holdout"),
                   gen_all.select(np.arange(d.gen_targets, len(gen_all)))]
    attributor = Attributor(base.model, schedule, dataset.x, cfg.features, base.checkpoints, dataset.ids)
    return Workspace(cfg, dataset, base, schedule, attributor, val, gen, holdout)


@dataclass
class LdsOutcome:
    reports: dict                       # method -> LdsReport on the report targets
    lambdas: dict                       # method -> λ used (nan for λ-free methods)
    sweeps: dict = field(default_factory=dict)   # method -> {λ: held-out mean LDS}


def measured_outputs(ws: Workspace, groups, cache_dir=None, jobs: int = 1) -> np.ndarray:
    """Seed-averaged ground-truth outputs (M, targets) for the concatenated groups."""
    tx = np.concatenate([g.x for g in groups])
    tk = np.concatenate([g.keys for g in groups])
    return ev.subset_outputs(ws.dataset.x, ws.plan(), ws.cfg.train, tx, tk, ws.protocol(),
                             cache_dir, jobs).mean(axis=1)


def choose_lambdas(ws: Workspace, methods, holdout_outputs=None, cache_dir=None, jobs: int = 1) -> tuple:
    """Per-method λ: the configured value, or the best of the held-out sweep."""
    fixed = ws.cfg.methods.fixed_lambda()
    lambdas, sweeps = {}, {}
    for method in methods:
        if method not in KERNEL_METHODS:
            lambdas[method] = math.nan
        elif fixed is not None:
            lambdas[method] = fixed
    todo = [m for m in methods if m not in lambdas]
    if todo:
        if not ws.holdout:
            raise ev.ParameterError("a lambda sweep needs held-out targets (data.holdout_targets > 0)")
        if holdout_outputs is None:
            holdout_outputs = measured_outputs(ws, ws.holdout, cache_dir, jobs)
        plan = ws.plan()
        for method in todo:
            lambdas[method], sweeps[method] = ev.sweep_lambda(
                ws.attributor, method, ws.holdout, plan, holdout_outputs, ws.cfg.methods.lambda_grid)
            log.info("%s: chose lambda=%g", method, lambdas[method])
    return lambdas, sweeps


def lds_experiment(ws: Workspace, methods=None, cache_dir=None, jobs: int = 1) -> LdsOutcome:
    methods = list(ws.cfg.methods.methods if methods is None else methods)
    groups = ws.report_groups + ws.holdout
    outputs = measured_outputs(ws, groups, cache_dir, jobs)
    n_report = len(ws.val) + len(ws.gen)
    lambdas, sweeps = choose_lambdas(ws, methods, outputs[:, n_report:])
    reports = ev.run_lds(ws.attributor, ws.report_groups, ws.plan(), methods,
                         outputs[:, :n_report], lams=lambdas)
    return LdsOutcome(reports, lambdas, sweeps)


def counterfactual_experiment(ws: Workspace, lambdas=None, methods=None, cache_dir=None,
                              jobs: int = 1) -> dict:
    c = ws.cfg.counterfactual
    methods = list(c.methods if methods is None else methods)
    if lambdas is None:
        lambdas, _ = choose_lambdas(ws, methods, cache_dir=cache_dir, jobs=jobs)
    count = min(c.targets, len(ws.gen))
    targets = ws.gen.select(np.arange(count))
    if c.sample_steps != ws.cfg.features.journey_steps:
        targets = generated_targets(ws.base.model, ws.schedule,
                                    [int(n.split("-", 1)[1]) for n in targets.names], c.sample_steps)
    return ev.run_counterfactual(ws.attributor, targets, methods, c.top_k, ws.cfg.train,
                                 lams=lambdas, num_steps=c.sample_steps,
                                 random_seed=ws.cfg.data.seed, jobs=jobs)


def toy_experiment(ws: Workspace, jobs: int = 1) -> ev.OutputFunctionReport:
    t = ws.cfg.toyexp
    return ev.run_output_function_experiment(ws.dataset.x, ws.cfg.train, ws.base.model, t.pairs,
                                             t.removal_fraction, t.sample_steps,
                                             seed=ws.cfg.data.seed, jobs=jobs)


def newton_fidelity_config(seed: int = 0) -> ddpm.TrainConfig:
    """Tiny deterministic problem (p = 178) whose optimum is isolated and reached tightly."""
    return ddpm.TrainConfig(epochs=20000, hidden=(8, 8), seed=seed, noise_pool=16,
                            optimizer="lbfgs", weight_decay=2e-2)


def newton_fidelity_experiment(seed: int = 0, n: int = 40, outliers: int = 4,
                               jobs: int = 1) -> ev.NewtonFidelityReport:
    ds = data.planted_outlier_dataset(n, outliers, seed)
    return ev.newton_fidelity(ds.x, newton_fidelity_config(seed), ids=ds.ids, jobs=jobs)
