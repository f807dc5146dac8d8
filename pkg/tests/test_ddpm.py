import math

import numpy as np
import pytest

from dasattr import ddpm
from dasattr.errors import FormatError, ParameterError, ShapeError, TrainingDiverged


# schedule --------------------------------------------------------------------

def test_schedule_endpoints(schedule):
    assert schedule.betas[0] == pytest.approx(1e-4, abs=0)
    assert schedule.betas[-1] == pytest.approx(0.02, rel=1e-15)
    assert schedule.alpha_bar(1) == pytest.approx(0.9999, rel=1e-15)


def test_beta_500_hand_value(schedule):
    # 1e-4 + (499 / 999) * 0.0199, evaluated by hand
    assert schedule.betas[499] == pytest.approx(0.01004004004004004, rel=1e-12)


def test_single_step_schedule():
    s = ddpm.make_linear_schedule(1, 0.5, 0.5)
    np.testing.assert_array_equal(s.betas, [0.5])
    np.testing.assert_array_equal(s.alpha_bars, [0.5])


def test_alpha_bar_is_running_product(schedule):
    prod, out = 1.0, []
    for b in schedule.betas:
        prod *= 1.0 - b
        out.append(prod)
    np.testing.assert_allclose(schedule.alpha_bars, out, rtol=1e-12)


@pytest.mark.parametrize("T", [0, -3, 2.5])
def test_bad_schedule_length(T):
    with pytest.raises(ParameterError):
        ddpm.make_linear_schedule(T)


# forward process --------------------------------------------------------------

def test_forward_noise_edge_cases(schedule):
    x0 = np.array([1.5, -2.0])
    t = 300
    ab = schedule.alpha_bar(t)
    np.testing.assert_allclose(ddpm.forward_noise(x0, t, np.zeros(2), schedule), math.sqrt(ab) * x0)
    np.testing.assert_allclose(ddpm.forward_noise(np.zeros(2), t, np.array([1.0, 0.0]), schedule),
                               [math.sqrt(1 - ab), 0.0])


def test_signal_vanishes_at_last_step(schedule):
    # sqrt(alpha_bar_T) for the default linear schedule
    assert math.sqrt(schedule.alpha_bar(1000)) == pytest.approx(6.3e-3, abs=2e-4)
    assert math.sqrt(schedule.alpha_bar(1000)) < 0.01


# network ---------------------------------------------------------------------

def test_zero_parameters_give_zero_output(small_model):
    zero = small_model.with_params(np.zeros(small_model.num_params))
    np.testing.assert_array_equal(ddpm.predict(zero, np.ones((3, 2)), 17), np.zeros((3, 2)))


def test_forward_is_deterministic(small_model):
    x = np.array([[0.3, -1.2]])
    a = ddpm.predict(small_model, x, 250)
    b = ddpm.predict(small_model, x, 250)
    assert a.tobytes() == b.tobytes()


def test_shape_errors(small_model):
    with pytest.raises(ShapeError):
        ddpm.predict(small_model, np.ones((2, 3)), 1)
    with pytest.raises(ShapeError):
        ddpm.NoisePredictor((10, 4, 2), np.zeros(5), 1000)


def test_skip_path_needs_coefficients():
    p = ddpm.num_params((10, 4, 2))
    with pytest.raises(ParameterError):
        ddpm.NoisePredictor((10, 4, 2), np.zeros(p), 1000, skip_variance=0.1)


def test_skip_path_is_parameter_free(schedule):
    m = ddpm.init_predictor(3, (4,), 1000, seed=1, skip_variance=0.01, schedule=schedule)
    x = np.array([[1.0, -1.0, 0.5]])
    zero = m.with_params(np.zeros(m.num_params))
    expect = ddpm.skip_coefficients(schedule, 0.01)[99] * x
    np.testing.assert_allclose(ddpm.predict(zero, x, 100), expect, rtol=1e-14)
    # Jacobian w.r.t. theta is unaffected by the skip path
    plain = ddpm.init_predictor(3, (4,), 1000, seed=1)
    _, ja = ddpm.jacobians_at(m, x, 100)
    _, jb = ddpm.jacobians_at(plain, x, 100)
    np.testing.assert_array_equal(ja, jb)


# loss and derivatives ----------------------------------------------------------

def test_loss_of_zero_model(small_model, schedule):
    zero = small_model.with_params(np.zeros(small_model.num_params))
    assert ddpm.simple_loss(zero, np.array([0.4, 0.1]), 10, np.array([1.0, 0.0]), schedule) == 1.0


def test_loss_matches_scalar_loop(small_model, schedule):
    rng = np.random.default_rng(5)
    x0, eps = rng.standard_normal(2), rng.standard_normal(2)
    t = 431
    ab = schedule.alpha_bar(t)
    x_t = [math.sqrt(ab) * x0[j] + math.sqrt(1 - ab) * eps[j] for j in range(2)]
    out = ddpm.predict(small_model, np.array([x_t]), t)[0]
    expect = sum((out[j] - eps[j]) ** 2 for j in range(2))
    assert ddpm.simple_loss(small_model, x0, t, eps, schedule) == pytest.approx(expect, rel=1e-14)


def _echo_model(schedule):
    """A 1-hidden-layer rig whose output is the bias; with bias = eps the loss is 0."""
    return ddpm.init_predictor(2, (3,), 1000, seed=0)


def test_perfect_prediction_has_zero_gradient(schedule):
    m = _echo_model(schedule)
    params = m.params.copy()
    params[:] = 0.0
    eps = np.array([0.7, -0.2])
    params[-2:] = eps          # final bias
    m = m.with_params(params)
    x0 = np.array([1.0, 2.0])
    assert ddpm.simple_loss(m, x0, 50, eps, schedule) == 0.0
    np.testing.assert_array_equal(ddpm.loss_gradient(m, x0, 50, eps, schedule), 0.0)


def test_linear_predictor_closed_form_gradient(schedule):
    # no hidden layers: eps_theta = W [x_t; emb] + b, so dL/dW = 2 (out - eps) inputᵀ
    m = ddpm.init_predictor(2, (), 1000, seed=4)
    x0, eps, t = np.array([0.5, -1.0]), np.array([0.2, 0.3]), 600
    x_t = ddpm.forward_noise(x0, t, eps, schedule)
    inp = np.concatenate([x_t, ddpm.timestep_embedding(t, 8, 1000)[0]])
    W, b = m.layers()[0]
    r = W @ inp + b - eps
    expect = np.concatenate([np.outer(2 * r, inp).ravel(), 2 * r])
    np.testing.assert_allclose(ddpm.loss_gradient(m, x0, t, eps, schedule), expect, rtol=1e-13)


def _fd(f, theta, idx, h=1e-5):
    out = []
    for i in idx:
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        out.append((f(up) - f(dn)) / (2 * h))
    return np.array(out)


def test_gradient_matches_finite_differences(small_model, schedule):
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal(2), rng.standard_normal(2)
    idx = rng.choice(small_model.num_params, 30, replace=False)
    fd = _fd(lambda th: ddpm.simple_loss(small_model.with_params(th), x0, 321, eps, schedule),
             small_model.params, idx)
    g = ddpm.loss_gradient(small_model, x0, 321, eps, schedule)[idx]
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_chain_identity(small_model, schedule):
    rng = np.random.default_rng(1)
    x0, eps = rng.standard_normal(2), rng.standard_normal(2)
    J = ddpm.output_jacobian(small_model, x0, 77, eps, schedule)
    r = ddpm.predict(small_model, ddpm.forward_noise(x0, 77, eps, schedule), 77)[0] - eps
    np.testing.assert_allclose(ddpm.loss_gradient(small_model, x0, 77, eps, schedule), 2 * J.T @ r,
                               rtol=0, atol=1e-10)


def test_zero_model_jacobian_bias_block(small_model, schedule):
    zero = small_model.with_params(np.zeros(small_model.num_params))
    J = ddpm.output_jacobian(zero, np.ones(2), 5, np.zeros(2), schedule)
    np.testing.assert_array_equal(J[:, -2:], np.eye(2))


def test_one_dim_jacobian_is_output_gradient(schedule):
    m = ddpm.init_predictor(1, (5,), 1000, seed=2)
    x0, eps = np.array([0.3]), np.array([-0.4])
    J = ddpm.output_jacobian(m, x0, 400, eps, schedule)
    x_t = ddpm.forward_noise(x0, 400, eps, schedule)
    _, g = ddpm.scalar_gradients_at(m, x_t[None], 400, lambda out: np.ones_like(out))
    np.testing.assert_allclose(J[0], g[0], rtol=1e-14)


# training --------------------------------------------------------------------

def _two_clusters(n=40, seed=0):
    rng = np.random.default_rng(seed)
    lab = np.arange(n) % 2
    return np.where(lab[:, None] == 0, -2.0, 2.0) * np.array([1.0, 0.0]) + 0.5 * rng.standard_normal((n, 2))


def test_training_is_deterministic(tiny_config):
    x = _two_clusters()
    a = ddpm.train(x, tiny_config).model.params
    b = ddpm.train(x, tiny_config).model.params
    assert a.tobytes() == b.tobytes()


def test_training_lowers_the_loss(tiny_config, schedule):
    x = _two_clusters()
    res = ddpm.train(x, tiny_config)
    init = ddpm.init_predictor(2, tiny_config.hidden, 1000, seed=tiny_config.seed)
    rng = np.random.default_rng(9)
    t = rng.integers(1, 1001, size=(20, len(x))).ravel()
    eps = rng.standard_normal((len(t), 2))
    x0 = np.tile(x, (20, 1))
    before = ddpm.simple_losses(init, x0, t, eps, schedule).mean()
    after = ddpm.simple_losses(res.model, x0, t, eps, schedule).mean()
    assert after < before


def test_zero_epochs_returns_initialisation(tiny_config):
    from dataclasses import replace
    cfg = replace(tiny_config, epochs=0)
    res = ddpm.train(_two_clusters(), cfg)
    init = ddpm.init_predictor(2, cfg.hidden, 1000, seed=cfg.seed)
    assert res.model.params.tobytes() == init.params.tobytes()


def test_checkpoints_end_at_final_model(tiny_config):
    res = ddpm.train(_two_clusters(), tiny_config)
    assert len(res.checkpoints) == tiny_config.num_checkpoints
    assert res.checkpoints[-1].params.tobytes() == res.model.params.tobytes()


def test_divergence_is_reported():
    cfg = ddpm.TrainConfig(epochs=50, lr=1e4, hidden=(8,), momentum=0.0, lr_schedule="constant")
    with pytest.raises(TrainingDiverged):
        ddpm.train(_two_clusters() * 100, cfg)


def test_subset_training_sees_the_same_noise(tiny_config):
    # common random numbers: a sample's (t, eps) at a step depends on its id only
    t_all, eps_all = ddpm.step_noise(0, 3, 10, 2, 1000)
    t_sub, eps_sub = ddpm.step_noise(0, 3, 10, 2, 1000)
    np.testing.assert_array_equal(t_all[[2, 5]], t_sub[[2, 5]])
    np.testing.assert_array_equal(eps_all[[2, 5]], eps_sub[[2, 5]])


# sampling --------------------------------------------------------------------


def _pool_config(**kw):
    base = dict(epochs=5000, hidden=(6,), noise_pool=4, optimizer="lbfgs", weight_decay=1e-2)
    base.update(kw)
    return ddpm.TrainConfig(**base)


def test_pool_noise_is_keyed_by_id():
    t, eps = ddpm.pool_noise(3, [0, 5, 9], 4, 2, 1000)
    t2, eps2 = ddpm.pool_noise(3, [9, 0], 4, 2, 1000)
    np.testing.assert_array_equal(t2, t[[2, 0]])
    np.testing.assert_array_equal(eps2, eps[[2, 0]])
    assert t.min() >= 1 and t.max() <= 1000


def test_lbfgs_reaches_a_stationary_point():
    x = np.random.default_rng(0).standard_normal((12, 2))
    cfg = _pool_config()
    res = ddpm.train(x, cfg)
    ids = np.arange(12)
    t, eps = ddpm.pool_noise(cfg.seed, ids, 4, 2, 1000)
    x0 = np.repeat(x, 4, axis=0)
    grad = ddpm.loss_gradient(res.model, x0, t.ravel(), eps.reshape(-1, 2), cfg.schedule())
    grad = grad / 48 + cfg.weight_decay * res.model.params  # loss_gradient sums over rows
    assert np.linalg.norm(grad) < 1e-6
    assert res.losses[-1] < res.losses[0]


def test_pool_sgd_uses_the_fixed_draws():
    x = np.random.default_rng(1).standard_normal((8, 2))
    a = ddpm.train(x, ddpm.TrainConfig(epochs=3, hidden=(4,), noise_pool=2, seed=1)).model
    b = ddpm.train(x, ddpm.TrainConfig(epochs=3, hidden=(4,), noise_pool=2, seed=1)).model
    c = ddpm.train(x, ddpm.TrainConfig(epochs=3, hidden=(4,), seed=1)).model
    np.testing.assert_array_equal(a.params, b.params)
    assert not np.array_equal(a.params, c.params)


def test_pool_settings_are_validated():
    with pytest.raises(ParameterError, match="noise_pool"):
        ddpm.TrainConfig(optimizer="lbfgs").validate()
    with pytest.raises(ParameterError, match="optimizer"):
        ddpm.TrainConfig(optimizer="adam").validate()
    with pytest.raises(ParameterError):
        ddpm.TrainConfig(noise_pool=-1).validate()

def test_sampling_is_deterministic(small_model, schedule):
    a = ddpm.sample(small_model, schedule, 20, seed=4)
    b = ddpm.sample(small_model, schedule, 20, seed=4)
    assert a.tobytes() == b.tobytes()


def test_different_models_give_different_samples(small_model, schedule):
    other = ddpm.init_predictor(2, (6, 5), 1000, seed=8)
    d = np.linalg.norm(ddpm.sample(small_model, schedule, 20, 4) - ddpm.sample(other, schedule, 20, 4))
    assert d > 0


def test_full_length_sampling(schedule):
    m = ddpm.init_predictor(2, (4,), 1000, seed=0)
    assert np.isfinite(ddpm.sample(m, schedule, 1000, 0)).all()


def test_trajectory_shape(small_model, schedule):
    x, traj, ts = ddpm.sample_batch(small_model, schedule, 10, [0, 1, 2], return_trajectory=True)
    assert traj.shape == (10, 3, 2) and ts[0] == 1000 and ts[-1] == 1
    np.testing.assert_array_equal(x, ddpm.sample_batch(small_model, schedule, 10, [0, 1, 2]))


# model file ------------------------------------------------------------------

@pytest.mark.parametrize("skip", [0.0, 0.01])
def test_model_file_round_trip(tmp_path, schedule, skip):
    m = ddpm.init_predictor(3, (5, 4), 1000, seed=2, skip_variance=skip, schedule=schedule)
    path = tmp_path / "m.bin"
    ddpm.save_model(path, m, schedule)
    m2, s2 = ddpm.load_model(path)
    assert m2.params.tobytes() == m.params.tobytes()
    assert m2.sizes == m.sizes and m2.skip_variance == skip
    np.testing.assert_array_equal(s2.betas, schedule.betas)
    assert ddpm.model_to_bytes(m2, s2) == path.read_bytes()


def test_model_file_errors(schedule, small_model):
    blob = ddpm.model_to_bytes(small_model, schedule)
    for cut in (0, 3, 10, 30, len(blob) - 1):
        with pytest.raises(FormatError):
            ddpm.model_from_bytes(blob[:cut])
    with pytest.raises(FormatError):
        ddpm.model_from_bytes(b"XXXX" + blob[4:])
