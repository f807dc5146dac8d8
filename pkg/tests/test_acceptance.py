"""Acceptance criteria 1-11, each recorded as one PASS/FAIL summary line.

The slow criteria (4-9) train many small models; together they take roughly
10 minutes on one core.
"""

import os
import time

import numpy as np
import pytest

from dasattr import attribution as attr
from dasattr import config as C
from dasattr import data, ddpm
from dasattr import experiments as X
from dasattr import features as F
from dasattr.cli import main
from dasattr.errors import FormatError
from dasattr.pipeline import Attributor, FeatureConfig, generated_targets, method_mode, validation_targets

JOBS = os.cpu_count() or 1
SEEDS = (0, 1, 2)
LDS_METHODS = ("das", "dtrak:square_norm", "raw_dot", "raw_cos", "random")


# 1. Woodbury exactness ----------------------------------------------------------------

def test_c01_woodbury_matches_reinversion(acceptance):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for case in range(100):
        lam = (0.0, 1e-3, 1.0)[case % 3]
        p = int(rng.integers(1, 17))
        d = int(rng.integers(1, 4))
        n_min = max(2, -(-(p + 4) // d) + 1)        # (n - 1) d > p keeps λ = 0 invertible
        n = int(rng.integers(n_min, 51))
        g = rng.standard_normal((n, d, p))
        r = rng.standard_normal((n, d))
        kernel = attr.build_kernel(g, lam)
        for i in rng.choice(n, 3, replace=False):
            rest = np.delete(g, i, axis=0).reshape(-1, p)
            want = np.linalg.inv(rest.T @ rest + lam * np.eye(p)) @ g[i].T @ r[i]
            got = attr.newton_loo_delta(g, r, int(i), kernel)
            worst = max(worst, np.linalg.norm(got - want) / np.linalg.norm(want))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-8 and elapsed < 10
    acceptance(1, ok, f"max relative error {worst:.2e}, {elapsed:.2f} s")
    assert worst < 1e-8
    assert elapsed < 10


# 2. gradient correctness --------------------------------------------------------------

def _random_models():
    rng = np.random.default_rng(2)
    schedule = ddpm.make_linear_schedule(1000)
    for m in range(10):
        d = 1 + m % 3
        hidden = tuple(int(h) for h in rng.integers(3, 9, size=1 + m % 2))
        skip = 0.01 if m % 4 == 3 else 0.0
        model = ddpm.init_predictor(d, hidden, 1000, 8, seed=m, skip_variance=skip, schedule=schedule)
        model = model.with_params(model.params + 0.3 * rng.standard_normal(model.num_params))
        x0 = rng.standard_normal(d)
        eps = rng.standard_normal(d)
        t = int(rng.integers(1, 1001))
        yield model, x0, t, eps, schedule, rng


def _rel(fd, an):
    return np.abs(fd - an) / np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1e-6)


def test_c02_gradients_match_finite_differences(acceptance):
    h = 1e-5
    start = time.perf_counter()
    worst, chain = 0.0, 0.0
    for model, x0, t, eps, schedule, rng in _random_models():
        p = model.num_params
        grad = ddpm.loss_gradient(model, x0[None], np.array([t]), eps[None], schedule)
        jac = ddpm.output_jacobian(model, x0, t, eps, schedule)
        x_t = ddpm.forward_noise(x0, t, eps, schedule)
        for c in rng.choice(p, min(50, p), replace=False):
            step = np.zeros(p)
            step[c] = h
            up, down = model.with_params(model.params + step), model.with_params(model.params - step)
            fd_loss = (ddpm.simple_loss(up, x0, t, eps, schedule)
                       - ddpm.simple_loss(down, x0, t, eps, schedule)) / (2 * h)
            fd_out = (ddpm.predictor_forward(up, x_t, t) - ddpm.predictor_forward(down, x_t, t)) / (2 * h)
            worst = max(worst, _rel(fd_loss, grad[c]), _rel(fd_out, jac[:, c]).max())
        r = ddpm.predictor_forward(model, x_t, t) - eps
        chain = max(chain, np.abs(grad - 2 * jac.T @ r).max() / np.abs(grad).max())
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and chain < 1e-10 and elapsed < 30
    acceptance(2, ok, f"finite-difference error {worst:.2e}, chain identity {chain:.1e}, {elapsed:.2f} s")
    assert worst < 1e-4
    assert chain < 1e-10
    assert elapsed < 30


# 3. kernel methods vs dense explicit inverses ----------------------------------------------

@pytest.fixture(scope="module")
def small_attributor():
    ds = data.make_dataset("gauss2", 0, 30)
    cfg = ddpm.TrainConfig(epochs=200, hidden=(16, 16), seed=0)
    model = ddpm.train(ds.x, cfg).model
    schedule = cfg.schedule()
    fc = FeatureConfig(timesteps=4, k=48, journey_steps=10)
    att = Attributor(model, schedule, ds.x, fc, train_ids=ds.ids)
    val = validation_targets(data.make_dataset("gauss2", 0, 4, split="val").x)
    gen = generated_targets(model, schedule, range(3), 10)
    return att, val, gen


def _dense(phi, lam):
    return np.linalg.inv(phi.T @ phi + lam * np.eye(phi.shape[1]))


def _oracle(att, method, targets, lam):
    mode = method_mode(method)
    train_fs = att.train_features(mode)
    train = F.plain_average(train_fs)
    k = train.g.shape[-1]
    if method == "das":
        tg = F.plain_average(att.target_features(targets, mode)).g
        H = train.g.reshape(-1, k).T @ train.g.reshape(-1, k) + lam * np.eye(k)
        out = np.empty((len(targets), len(train)))
        for i in range(len(train)):
            gi = train.g[i]
            delta = np.linalg.inv(H - gi.T @ gi) @ gi.T @ train.r[i]
            out[:, i] = [np.sum((tg[j] @ delta) ** 2) for j in range(len(targets))]
        return out
    phi = train.g[:, 0, :]
    Hinv = _dense(phi, lam)
    if method == "journey_trak":
        traj = att.journey_features(targets)
        return np.mean([traj[:, s] @ Hinv @ phi.T for s in range(traj.shape[1])], axis=0)
    tphi = F.plain_average(att.target_features(targets, mode)).g[:, 0, :]
    K = tphi @ Hinv @ phi.T
    if method == "trak":
        res = np.sqrt(np.mean(np.sum(train_fs.residuals ** 2, axis=2), axis=1))
        return K * res[None, :]
    if method == "relative_if":
        return K / np.linalg.norm(Hinv @ phi.T, axis=0)[None, :]
    if method == "renormalized_if":
        return K / np.linalg.norm(phi, axis=1)[None, :]
    return K


def test_c03_kernel_methods_match_dense_oracles(acceptance, small_attributor):
    att, val, gen = small_attributor
    lam = 0.1
    start = time.perf_counter()
    errors = {}
    for method in ("das", "trak", "dtrak:square_norm", "dtrak:simple_loss", "relative_if",
                   "renormalized_if", "journey_trak"):
        groups = [gen] if method == "journey_trak" else [val, gen]
        for targets in groups:
            got = att.score(method, targets, lam).scores
            want = _oracle(att, method, targets, lam)
            err = np.abs(got - want).max() / np.abs(want).max()
            errors[method] = max(errors.get(method, 0.0), err)
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    acceptance(3, worst < 1e-10 and elapsed < 10,
               f"k=48, worst relative error {worst:.1e} ({max(errors, key=errors.get)}), {elapsed:.2f} s")
    assert worst < 1e-10, errors
    assert elapsed < 10


# 4. Newton-step fidelity --------------------------------------------------------------

@pytest.mark.slow
def test_c04_newton_step_tracks_leave_one_out(acceptance):
    start = time.perf_counter()
    reports = [X.newton_fidelity_experiment(seed, jobs=JOBS) for seed in SEEDS]
    elapsed = time.perf_counter() - start
    rhos = [r.spearman for r in reports]
    mean = float(np.mean(rhos))
    acceptance(4, mean >= 0.5 and elapsed < 300,
               f"Spearman per seed {np.round(rhos, 3).tolist()}, mean {mean:.3f} "
               f"(retraining warm-started at θ*), {elapsed:.0f} s")
    assert mean >= 0.5
    assert elapsed < 300


# 5-9. LDS, counterfactual and output-function experiments -------------------------------

@pytest.fixture(scope="module")
def lds_runs(tmp_path_factory):
    """(workspace, LdsOutcome) per (dataset, seed) at the 10-timestep budget, plus wall time."""
    cache = tmp_path_factory.mktemp("gt-cache")
    runs, start = {}, time.perf_counter()
    for name in ("gauss2", "blobs8"):
        for seed in SEEDS:
            cfg = C.RunConfig.for_dataset(name, seed)
            cfg.methods.methods = LDS_METHODS
            ws = X.prepare(cfg)
            runs[name, seed] = (ws, X.lds_experiment(ws, cache_dir=cache, jobs=JOBS))
    return runs, time.perf_counter() - start, cache


def _mean_lds(runs, name, method):
    return float(np.mean([runs[name, s][1].reports[method].mean for s in SEEDS]))


@pytest.mark.slow
def test_c05_lds_ordering(acceptance, lds_runs):
    runs, elapsed, _ = lds_runs
    M = runs["gauss2", 0][0].cfg.lds.subsets
    band = 2 / np.sqrt(M)
    ok, parts = elapsed < 1800, []
    for name in ("gauss2", "blobs8"):
        das = _mean_lds(runs, name, "das")
        dtrak = _mean_lds(runs, name, "dtrak:square_norm")
        raw = max(_mean_lds(runs, name, "raw_dot"), _mean_lds(runs, name, "raw_cos"))
        gaps = [runs[name, s][1].reports["das"].mean - runs[name, s][1].reports["dtrak:square_norm"].mean
                for s in SEEDS]
        rand = [runs[name, s][1].reports["random"].mean for s in SEEDS]
        ok &= das > dtrak > raw and min(gaps) > 0 and max(map(abs, rand)) <= band
        parts.append(f"{name}: DAS {das:.3f} D-TRAK {dtrak:.3f} raw {raw:.3f} "
                     f"gaps {np.round(gaps, 3).tolist()} random {np.round(rand, 3).tolist()}")
    acceptance(5, ok, "; ".join(parts) + f"; {elapsed / 60:.1f} min")
    assert ok, parts


def _variant(ws, cache, **features):
    cfg = C.from_text(C.to_text(ws.cfg))
    for key, value in features.items():
        setattr(cfg.features, key, value)
    cfg.methods.methods = ("das",)
    variant = X.prepare(cfg, dataset=ws.dataset, base=ws.base)
    return X.lds_experiment(variant, cache_dir=cache, jobs=JOBS).reports["das"].mean


@pytest.mark.slow
def test_c06_more_timesteps_help(acceptance, lds_runs):
    runs, _, cache = lds_runs
    ten = [runs["gauss2", s][1].reports["das"].mean for s in SEEDS]
    hundred = [_variant(runs["gauss2", s][0], cache, timesteps=100) for s in SEEDS]
    ok = np.mean(hundred) >= np.mean(ten)
    acceptance(6, ok, f"gauss2 DAS at 10 steps {np.round(ten, 3).tolist()} (mean {np.mean(ten):.3f}), "
                      f"at 100 steps {np.round(hundred, 3).tolist()} (mean {np.mean(hundred):.3f})")
    assert ok


@pytest.mark.slow
def test_c07_normalized_averaging(acceptance, lds_runs):
    runs, _, cache = lds_runs
    plain = [runs["gauss2", s][1].reports["das"].mean for s in SEEDS]
    normed = [_variant(runs["gauss2", s][0], cache, normalize=True) for s in SEEDS]
    ok = np.mean(normed) >= np.mean(plain)
    acceptance(7, ok, f"gauss2 DAS plain {np.mean(plain):.3f} {np.round(plain, 3).tolist()}, "
                      f"normalized {np.mean(normed):.3f} {np.round(normed, 3).tolist()}")
    assert ok


@pytest.mark.slow
def test_c08_counterfactual_removal(acceptance, lds_runs):
    runs, _, _ = lds_runs
    rows = []
    for seed in SEEDS:
        ws, outcome = runs["gauss2", seed]
        rep = X.counterfactual_experiment(ws, lambdas=outcome.lambdas, jobs=JOBS)
        rows.append((rep["das"].mean_l2, rep["dtrak:square_norm"].mean_l2, rep["random"].mean_l2))
    das, dtrak, rand = np.array(rows).T
    ok = das.mean() > rand.mean() and int((das >= dtrak).sum()) >= 2
    acceptance(8, ok, f"mean L2 DAS {np.round(das, 3).tolist()}, D-TRAK {np.round(dtrak, 3).tolist()}, "
                      f"random {np.round(rand, 3).tolist()}")
    assert das.mean() > rand.mean()
    assert (das >= dtrak).sum() >= 2


@pytest.mark.slow
def test_c09_output_function_beats_loss(acceptance, lds_runs):
    runs, _, _ = lds_runs
    reps = {s: X.toy_experiment(runs["gauss2", s][0], jobs=JOBS) for s in SEEDS}
    main_rep = reps[0]
    ok = main_rep.pearson_output > main_rep.pearson_loss and not main_rep.degenerate
    others = ", ".join(f"seed {s}: {reps[s].pearson_output:.3f} vs {reps[s].pearson_loss:.3f}" for s in (1, 2))
    acceptance(9, ok, f"N={len(main_rep.l2)}, seed 0: Pearson(output, L2) {main_rep.pearson_output:.3f} "
                      f"vs Pearson(loss, L2) {main_rep.pearson_loss:.3f} (informational {others})")
    assert ok


# 10. projection fidelity -------------------------------------------------------------

def test_c10_projection_fidelity(acceptance):
    p, k = 100_000, 4096
    rng = np.random.default_rng(10)
    u = rng.standard_normal((100, p))
    w = rng.standard_normal((100, p))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    w -= np.sum(w * u, axis=1, keepdims=True) * u
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    angle = rng.uniform(0, np.pi, size=(100, 1))
    v = np.cos(angle) * u + np.sin(angle) * w          # unit pairs spanning all inner products
    proj = F.make_projection(F.ProjectionSpec(k=k, seed=3), p)
    pu, pv = proj.apply(u), proj.apply(v)
    err = np.abs(np.sum(pu * pv, axis=1) - np.sum(u * v, axis=1)).mean()
    ident = F.make_projection(F.ProjectionSpec(k=None, identity=True), p)
    exact = np.array_equal(ident.apply(u[:5]), u[:5])
    acceptance(10, err < 0.05 and exact, f"mean |inner-product error| {err:.4f}, identity exact: {exact}")
    assert err < 0.05
    assert exact


# 11. determinism and file formats --------------------------------------------------------

def _tiny_run_config(out_dir):
    c = C.RunConfig.for_dataset("gauss2", 0)
    c.data.n, c.data.val_targets, c.data.gen_targets, c.data.holdout_targets = 30, 3, 3, 2
    c.train.epochs = 200
    c.lds.subsets, c.lds.seeds_per_subset, c.lds.gt_timesteps, c.lds.gt_draws = 4, 1, 10, 1
    c.methods.lambda_grid = (1e-3, 1.0)
    c.counterfactual.top_k, c.counterfactual.targets, c.counterfactual.sample_steps = 3, 2, 10
    c.toyexp.pairs, c.toyexp.sample_steps = 4, 10
    c.features.journey_steps = 10
    c.output.dir = str(out_dir)
    return c


def test_c11_determinism_and_round_trips(acceptance, tmp_path, small_attributor):
    outputs = []
    for run in ("a", "b"):
        C.save(tmp_path / f"{run}.cfg", _tiny_run_config(tmp_path / run))
        assert main(["run", "--config", str(tmp_path / f"{run}.cfg"), "--jobs", "1"]) == 0
        outputs.append({f.name: f.read_bytes() for f in sorted((tmp_path / run).iterdir())
                        if f.suffix in (".csv", ".svg", ".bin")})
    identical = outputs[0] == outputs[1] and len(outputs[0]) >= 8

    att, _, _ = small_attributor
    model_bytes = ddpm.model_to_bytes(att.model, att.schedule)
    model, schedule = ddpm.model_from_bytes(model_bytes)
    model_ok = ddpm.model_to_bytes(model, schedule) == model_bytes
    fs = att.train_features(method_mode("das"))
    store_bytes = F.store_to_bytes(fs)
    store_ok = F.store_to_bytes(F.store_from_bytes(store_bytes)) == store_bytes

    truncation_errors = 0
    for blob, reader in ((model_bytes, ddpm.model_from_bytes), (store_bytes, F.store_from_bytes)):
        for cut in (0, 7, len(blob) // 2, len(blob) - 1):
            try:
                reader(blob[:cut])
            except FormatError:
                truncation_errors += 1
    ok = identical and model_ok and store_ok and truncation_errors == 8
    acceptance(11, ok, f"rerun byte-identical: {identical} ({len(outputs[0])} files), model round-trip: "
                       f"{model_ok}, store round-trip: {store_ok}, truncations rejected: {truncation_errors}/8")
    assert ok
