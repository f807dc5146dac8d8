"""Retraining-based evaluation: LDS, counterfactual removal and output-function correlation."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.stats

from . import ddpm
from .errors import FormatError, ParameterError, SingularityError, UndefinedCorrelation
from .features import frozen_eps, timestep_grid

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# statistics


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ParameterError("correlation needs two equal-length vectors of length >= 2")
    scale = np.sqrt(len(a)) * 1e-13
    tol_a, tol_b = scale * np.abs(a).max(), scale * np.abs(b).max()
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    # spread at rounding level of the values counts as constant
    if na <= tol_a or nb <= tol_b:
        raise UndefinedCorrelation("correlation is undefined for a constant vector")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def spearman(a, b) -> float:
    """Pearson correlation of mid-ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ParameterError("correlation needs two equal-length vectors of length >= 2")
    return pearson(scipy.stats.rankdata(a), scipy.stats.rankdata(b))


def _corr_or_flag(fn, a, b):
    try:
        return fn(a, b), False
    except UndefinedCorrelation:
        return 0.0, True


# ---------------------------------------------------------------------------
# subsets


@dataclass
class SubsetPlan:
    n: int
    fraction: float
    master_seed: int
    masks: np.ndarray           # (M, n) bool
    seeds_per_subset: int = 1

    @property
    def M(self) -> int:
        return len(self.masks)

    @property
    def size(self) -> int:
        return int(self.masks[0].sum())


def plan_subsets(n: int, M: int, fraction: float = 0.5, master_seed: int = 0,
                 seeds_per_subset: int = 1) -> SubsetPlan:
    """M pairwise-distinct random masks of exactly floor(fraction * n) samples."""
    if not 0 < fraction < 1:
        raise ParameterError("fraction must lie strictly between 0 and 1")
    if M < 2:
        raise ParameterError("need at least two subsets")
    if seeds_per_subset < 1:
        raise ParameterError("seeds_per_subset must be at least 1")
    size = int(np.floor(fraction * n))
    if size == 0:
        raise ParameterError(f"fraction {fraction} of n={n} selects no samples")
    from math import comb
    if comb(n, size) < M:
        raise ParameterError(f"only {comb(n, size)} distinct subsets of size {size} exist; asked for {M}")
    rng = np.random.default_rng([master_seed, 21])
    masks, seen = [], set()
    while len(masks) < M:
        mask = np.zeros(n, dtype=bool)
        mask[rng.choice(n, size, replace=False)] = True
        key = mask.tobytes()
        if key not in seen:
            seen.add(key)
            masks.append(mask)
    return SubsetPlan(n, fraction, master_seed, np.array(masks), seeds_per_subset)


def predict_output(scores, mask) -> np.ndarray:
    """Attribution-predicted output: the sum of scores over the kept samples.

    ``scores`` may be a vector over the training set or a (targets, n) matrix.
    """
    scores = getattr(scores, "scores", scores)
    return np.asarray(scores, dtype=np.float64)[..., np.asarray(mask, dtype=bool)].sum(axis=-1)


# ---------------------------------------------------------------------------
# ground truth


@dataclass(frozen=True)
class GroundTruthProtocol:
    """Frozen (timestep grid, noise draws) on which target losses are measured.

    ``noise_seed`` must equal the feature extractor's target noise seed so that
    draw 0 coincides with the noise used for the target features.
    """

    timesteps: int = 100
    draws: int = 3
    noise_seed: int = 1

    def key(self, T: int) -> str:
        return f"t{self.timesteps}-d{self.draws}-s{self.noise_seed}-T{T}"


def target_outputs(model, schedule, x, keys, protocol: GroundTruthProtocol) -> np.ndarray:
    """Mean simple loss of each target over the protocol's timesteps and draws."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    T = schedule.num_timesteps
    grid = timestep_grid(T, protocol.timesteps)
    eps = frozen_eps(protocol.noise_seed, keys, grid, protocol.draws, T, x.shape[1])  # (n, G, D, d)
    n, G, D, d = eps.shape
    ab = schedule.alpha_bar(grid)[None, :, None, None]
    x_t = np.sqrt(ab) * x[:, None, None, :] + np.sqrt(1.0 - ab) * eps
    t = np.broadcast_to(grid[None, :, None], (n, G, D)).reshape(-1)
    out = ddpm.predict(model, x_t.reshape(-1, d), t)
    r = out - eps.reshape(-1, d)
    return np.einsum("ij,ij->i", r, r).reshape(n, G * D).mean(axis=1)


# ---------------------------------------------------------------------------
# cache


def _hash(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else repr(p).encode())
        h.update(b"\0")
    return h.hexdigest()[:16]


def train_key(x, config: ddpm.TrainConfig) -> str:
    """Hash of the full training data and every optimiser setting except the seed."""
    fields = {k: v for k, v in vars(config).items() if k != "seed"}
    return _hash(np.ascontiguousarray(x, dtype=np.float64).tobytes(), sorted(fields.items()))


def _write_atomic(path: Path, text: str):
    tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _read_outputs(path: Path) -> dict:
    """Cached outputs keyed by (protocol key, target key, target hash)."""
    lines = path.read_text().splitlines()
    if not lines or lines[0] != "protocol,target_key,target_hash,output":
        raise ValueError("bad header")
    table = {}
    for line in lines[1:]:
        pkey, tkey, thash, value = line.split(",")
        table[(pkey, int(tkey), thash)] = float(value)
    return table


def _write_outputs(path: Path, table: dict):
    rows = ["protocol,target_key,target_hash,output"]
    rows += [f"{p},{k},{h},{v!r}" for (p, k, h), v in sorted(table.items())]
    _write_atomic(path, "\n".join(rows) + "\n")


def _subset_job(args):
    """Train (or load) one subset model and evaluate the targets on it."""
    x, ids, config, job_dir, target_x, target_keys, protocol = args
    schedule = config.schedule()
    target_x = np.ascontiguousarray(target_x, dtype=np.float64)
    pkey = protocol.key(schedule.num_timesteps)
    rows = [(pkey, int(k), _hash(target_x[j].tobytes())) for j, k in enumerate(target_keys)]
    table = {}
    if job_dir is not None:
        job_dir = Path(job_dir)
        out_path = job_dir / "outputs.csv"
        if out_path.exists():
            try:
                table = _read_outputs(out_path)
            except (ValueError, IndexError):
                log.warning("corrupt cache file %s; recomputing", out_path)
                table = {}
    missing = [j for j, row in enumerate(rows) if row not in table]
    if missing:
        model = None
        if job_dir is not None and (job_dir / "model.bin").exists():
            try:
                model, _ = ddpm.load_model(job_dir / "model.bin")
            except FormatError as exc:
                log.warning("corrupt cached model in %s (%s); retraining", job_dir, exc)
        if model is None:
            model = ddpm.train(x, config, ids=ids).model
            if job_dir is not None:
                job_dir.mkdir(parents=True, exist_ok=True)
                ddpm.save_model(job_dir / "model.bin", model, schedule)
        values = target_outputs(model, schedule, target_x[missing], np.asarray(target_keys)[missing], protocol)
        for j, v in zip(missing, values):
            table[rows[j]] = float(v)
        if job_dir is not None:
            _write_outputs(job_dir / "outputs.csv", table)
    return np.array([table[row] for row in rows])


def parallel_map(fn, items, jobs: int = 1):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _update_manifest(root: Path, entries: dict):
    path = root / "manifest.json"
    manifest = {}
    if path.exists():
        try:
            manifest = json.loads(path.read_text())
        except ValueError:
            log.warning("corrupt cache manifest %s; rebuilding", path)
    manifest.update(entries)
    _write_atomic(path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def subset_outputs(x, plan: SubsetPlan, config: ddpm.TrainConfig, target_x, target_keys,
                   protocol: GroundTruthProtocol, cache_dir=None, jobs: int = 1) -> np.ndarray:
    """Ground-truth target outputs per (subset, seed index), shape (M, seeds, targets).

    Subset models start from the initialisation of seed ``config.seed + s``;
    seed index 0 shares the base model's initialisation.
    """
    x = np.asarray(x, dtype=np.float64)
    ids = np.arange(len(x))
    tkey = train_key(x, config)
    root = None if cache_dir is None else Path(cache_dir)
    jobs_args, names = [], []
    for m, mask in enumerate(plan.masks):
        mask_hash = _hash(tkey, mask.tobytes())
        for s in range(plan.seeds_per_subset):
            cfg = ddpm.TrainConfig(**{**vars(config), "seed": config.seed + s})
            job_dir = None if root is None else root / mask_hash / str(cfg.seed)
            jobs_args.append((x[mask], ids[mask], cfg, job_dir, target_x, np.asarray(target_keys), protocol))
            names.append((mask_hash, cfg.seed))
    results = parallel_map(_subset_job, jobs_args, jobs)
    if root is not None:
        _update_manifest(root, {f"{h}/{s}": {"mask": h, "seed": s, "train_key": tkey,
                                             "protocol": protocol.key(config.num_timesteps)}
                                for h, s in names})
    return np.array(results).reshape(plan.M, plan.seeds_per_subset, -1)


# ---------------------------------------------------------------------------
# LDS


@dataclass
class LdsReport:
    method: str
    target_names: list
    rho: np.ndarray             # per-target Spearman
    degenerate: np.ndarray      # per-target undefined-correlation flags
    lam: float = float("nan")

    @property
    def mean(self) -> float:
        return float(self.rho.mean()) if len(self.rho) else float("nan")

    @property
    def sem(self) -> float:
        n = len(self.rho)
        return float(self.rho.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0

    def group(self, prefix: str) -> "LdsReport":
        keep = [i for i, name in enumerate(self.target_names) if name.startswith(prefix)]
        return LdsReport(self.method, [self.target_names[i] for i in keep], self.rho[keep],
                         self.degenerate[keep], self.lam)


def lds(scores, masks, outputs) -> tuple:
    """Per-target Spearman between predicted and measured outputs.

    ``scores`` is (targets, n), ``masks`` (M, n) and ``outputs`` (M, targets)
    holds the measured target loss; predictions are correlated with its
    negation so that helpful training samples carry positive scores.
    Undefined correlations are reported as 0 and flagged.
    """
    scores = np.atleast_2d(getattr(scores, "scores", scores))
    pred = scores @ np.asarray(masks, dtype=np.float64).T        # (targets, M)
    rho = np.zeros(len(scores))
    flags = np.zeros(len(scores), dtype=bool)
    for j in range(len(scores)):
        rho[j], flags[j] = _corr_or_flag(spearman, pred[j], -outputs[:, j])
    return rho, flags


def run_lds(attributor, targets_list, plan: SubsetPlan, methods, outputs=None, lams=1e-3,
            config: ddpm.TrainConfig = None, protocol: GroundTruthProtocol = None,
            cache_dir=None, jobs: int = 1) -> dict:
    """LDS of every method on the given target groups.

    ``targets_list`` is a list of Targets groups (for example validation and
    generated samples); methods that need a sampling trajectory are scored on
    the groups that carry one. ``lams`` is a float or a per-method dict.
    ``outputs`` (M, targets) holds measured target losses; when omitted they
    are computed by retraining with ``config`` under ``protocol``.
    """
    if outputs is None:
        if config is None or protocol is None:
            raise ParameterError("run_lds needs either outputs or a training config and protocol")
        tx = np.concatenate([t.x for t in targets_list])
        tk = np.concatenate([t.keys for t in targets_list])
        outputs = subset_outputs(attributor.train_x, plan, config, tx, tk, protocol,
                                 cache_dir, jobs).mean(axis=1)
    reports = {}
    for method in methods:
        lam = lams.get(method, 1e-3) if isinstance(lams, dict) else lams
        rho, flags, names = [], [], []
        offset = 0
        for targets in targets_list:
            cols = slice(offset, offset + len(targets))
            offset += len(targets)
            if method == "journey_trak" and targets.trajectory is None:
                continue
            res = attributor.score(method, targets, lam=lam)
            r, f = lds(res.scores, plan.masks, outputs[:, cols])
            rho.append(r)
            flags.append(f)
            names += list(targets.names)
        reports[method] = LdsReport(method, names, np.concatenate(rho) if rho else np.zeros(0),
                                    np.concatenate(flags) if flags else np.zeros(0, bool), lam)
    return reports


def sweep_lambda(attributor, method, targets_list, plan: SubsetPlan, outputs, grid=None) -> tuple:
    """Mean LDS on held-out targets for each λ; returns (best λ, {λ: mean LDS}).

    Ties go to the earlier grid entry. A λ whose kernel is singular is skipped.
    """
    grid = [10.0 ** e for e in range(-6, 7)] if grid is None else [float(v) for v in grid]
    table = {}
    for lam in grid:
        try:
            rep = run_lds(attributor, targets_list, plan, [method], outputs, lams=lam)[method]
        except SingularityError as exc:
            log.info("lambda sweep %s: lambda=%g skipped (%s)", method, lam, exc)
            continue
        table[lam] = rep.mean
        log.info("lambda sweep %s: lambda=%g mean LDS=%.4f", method, lam, table[lam])
    if not table:
        raise SingularityError(f"every lambda in the sweep gave a singular kernel for {method}")
    best = max(table, key=lambda lam: (table[lam], -grid.index(lam)))
    return best, table


# ---------------------------------------------------------------------------
# counterfactual removal


@dataclass
class CounterfactualReport:
    method: str
    top_k: int
    l2: np.ndarray              # per target
    cosine: np.ndarray

    @property
    def mean_l2(self) -> float:
        return float(self.l2.mean())

    @property
    def mean_cosine(self) -> float:
        return float(self.cosine.mean())


def _retrain_and_sample(args):
    x, ids, config, num_steps, seeds = args
    model = ddpm.train(x, config, ids=ids).model
    return ddpm.sample_batch(model, config.schedule(), num_steps, seeds)


def _cosine_rows(a, b):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    return np.where(denom > 0, np.einsum("ij,ij->i", a, b) / np.where(denom > 0, denom, 1.0), 0.0)


def run_counterfactual(attributor, targets, methods, top_k: int, config: ddpm.TrainConfig,
                       lams=1e-3, num_steps: int = 50, random_seed: int = 0, jobs: int = 1) -> dict:
    """Remove each target's top-k samples, retrain from the same init and regenerate.

    ``targets`` must be generated samples (their names carry the sampling seed).
    A ``random`` entry removes k uniformly random samples per target.
    """
    x = attributor.train_x
    n = len(x)
    if not 0 <= top_k < n:
        raise ParameterError(f"top_k must lie in [0, {n - 1}]")
    seeds = [int(name.split("-", 1)[1]) for name in targets.names]
    ids = np.arange(n)
    removals = {}
    for method in list(methods) + ["random"]:
        if method == "random":
            rng = np.random.default_rng([random_seed, 31])
            removals[method] = [np.sort(rng.choice(n, top_k, replace=False)) for _ in seeds]
        else:
            lam = lams.get(method, 1e-3) if isinstance(lams, dict) else lams
            res = attributor.score(method, targets, lam=lam)
            removals[method] = [np.sort(res.top_k(j, top_k)) for j in range(len(seeds))]
    # identical removal sets share one retrain
    unique = {}
    for method, sets in removals.items():
        for j, removed in enumerate(sets):
            unique.setdefault((removed.tobytes(), seeds[j]), removed)
    keys = list(unique)
    args = []
    for key in keys:
        keep = np.ones(n, dtype=bool)
        keep[unique[key]] = False
        args.append((x[keep], ids[keep], config, num_steps, [key[1]]))
    samples = dict(zip(keys, (s[0] for s in parallel_map(_retrain_and_sample, args, jobs))))
    # originals regenerated one seed at a time, exactly like the counterfactuals
    schedule = config.schedule()
    original = np.array([ddpm.sample_batch(attributor.model, schedule, num_steps, [s])[0] for s in seeds])
    reports = {}
    for method, sets in removals.items():
        cf = np.array([samples[(removed.tobytes(), seeds[j])] for j, removed in enumerate(sets)])
        reports[method] = CounterfactualReport(method, top_k, np.linalg.norm(cf - original, axis=1),
                                               _cosine_rows(cf, original))
    return reports


# ---------------------------------------------------------------------------
# output-function experiment


@dataclass
class OutputFunctionReport:
    l2: np.ndarray
    loss_diff: np.ndarray
    output_diff: np.ndarray
    pearson_output: float
    pearson_loss: float
    degenerate: bool = False


def _pair_job(args):
    x, ids, config, model, num_steps, seed = args
    schedule = config.schedule()
    retrained = ddpm.train(x, config, ids=ids).model
    x_gen, traj, ts = ddpm.sample_batch(model, schedule, num_steps, [seed], return_trajectory=True)
    x_new = ddpm.sample_batch(retrained, schedule, num_steps, [seed])
    pts = traj[:, 0, :]                                           # (S, d)
    ab = schedule.alpha_bar(ts)[:, None]
    eps = (pts - np.sqrt(ab) * x_gen[0]) / np.sqrt(1.0 - ab)    # noise implied by the sample
    out_a = ddpm.predict(model, pts, ts)
    out_b = ddpm.predict(retrained, pts, ts)
    loss_a = ((out_a - eps) ** 2).sum(axis=1)
    loss_b = ((out_b - eps) ** 2).sum(axis=1)
    return (float(np.linalg.norm(x_new[0] - x_gen[0])),
            float(np.abs(loss_a - loss_b).mean()),
            float(np.linalg.norm(out_a - out_b, axis=1).mean()))


def run_output_function_experiment(x, config: ddpm.TrainConfig, model, num_pairs: int = 60,
                                   removal_fraction: float = 0.2, num_steps: int = 50,
                                   seed: int = 0, jobs: int = 1) -> OutputFunctionReport:
    """Correlate loss change and noise-predictor output change with generation change.

    Pair j removes a random ``removal_fraction`` of the data, retrains from the
    base initialisation and regenerates sampling seed j. Both signals are
    measured at the latents of the original model's sampling trajectory.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    size = int(round(removal_fraction * n))
    if not 0 <= size < n:
        raise ParameterError("removal fraction must leave at least one sample")
    ids = np.arange(n)
    args = []
    for j in range(num_pairs):
        keep = np.ones(n, dtype=bool)
        keep[np.random.default_rng([seed, 41, j]).choice(n, size, replace=False)] = False
        args.append((x[keep], ids[keep], config, model, num_steps, j))
    rows = np.array(parallel_map(_pair_job, args, jobs))
    l2, loss_diff, out_diff = rows.T
    p_out, f1 = _corr_or_flag(pearson, out_diff, l2)
    p_loss, f2 = _corr_or_flag(pearson, loss_diff, l2)
    return OutputFunctionReport(l2, loss_diff, out_diff, p_out, p_loss, f1 or f2)


# ---------------------------------------------------------------------------
# Newton-step fidelity


@dataclass
class NewtonFidelityReport:
    estimated: np.ndarray   # ‖Newton delta_i‖
    actual: np.ndarray      # ‖θ* - θ*_{\i}‖ from retraining
    spearman: float
    lam: float


def pool_newton_features(model, x, ids, config: ddpm.TrainConfig):
    """Exact gradient blocks and residuals on the training noise pool.

    Scaled so that Σ_i g_iᵀ g_i is the Gauss-Newton Hessian of the mean pool
    loss (up to the factor 2 that cancels in the Newton step). Returns
    g (n, K·d, p) and r (n, K·d).
    """
    from .features import FeatureMode, ProjectionSpec, features_at, make_projection

    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    K = config.noise_pool
    if K == 0:
        raise ParameterError("pool features need config.noise_pool > 0")
    schedule = config.schedule()
    t, eps = ddpm.pool_noise(config.seed, ids, K, d, schedule.num_timesteps)
    t, eps = t.ravel(), eps.reshape(-1, d)
    x_t = ddpm.forward_noise(np.repeat(x, K, axis=0), t, eps, schedule)
    proj = make_projection(ProjectionSpec(k=None, identity=True), model.num_params)
    blocks, resid = features_at(model, x_t, t, eps, FeatureMode("exact"), proj)
    scale = 1.0 / np.sqrt(n * K)
    return (blocks.reshape(n, K * d, -1) * scale, resid.reshape(n, K * d) * scale)


def newton_fidelity(x, config: ddpm.TrainConfig, ids=None, lam: float = None,
                    jobs: int = 1) -> NewtonFidelityReport:
    """Rank agreement between Newton-step and retrained leave-one-out changes.

    Trains θ* on the full data, then for every i compares the Newton estimate
    of θ* - θ*_{\\i} with retraining on the data minus i, warm-started at θ*.
    ``lam`` defaults to weight_decay / 2, the damping implied by the penalty.
    """
    from .attribution import build_kernel, newton_loo_deltas

    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    lam = config.weight_decay / 2 if lam is None else lam
    base = ddpm.train(x, config, ids=ids).model
    g, r = pool_newton_features(base, x, ids, config)
    est = np.linalg.norm(newton_loo_deltas(g, r, build_kernel(g, lam)), axis=1)
    retrained = parallel_map(_loo_job, [(x, i, config, ids, base) for i in range(n)], jobs)
    actual = np.array([np.linalg.norm(base.params - p) for p in retrained])
    rho, _ = _corr_or_flag(spearman, est, actual)
    return NewtonFidelityReport(est, actual, rho, lam)


def _loo_job(args):
    from .attribution import true_loo_oracle

    x, i, config, ids, base = args
    return true_loo_oracle(x, i, config, ids=ids, init=base).params
