"""Discrete-time DDPM at desk scale.

A small tanh MLP predicts the noise added by the forward process. All
derivatives are written out by hand so that per-sample gradients and full
output Jacobians (d x p) are cheap to get for every sample in a batch.

Timesteps are 1-based throughout: ``t`` ranges over ``1..T`` and
``schedule.alpha_bars[t - 1]`` is the cumulative product up to ``t``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, ShapeError, TrainingDiverged

MODEL_MAGIC = b"DAS1"


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def num_timesteps(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def alpha_bar(self, t):
        """ᾱ_t for 1-based ``t`` (scalar or integer array)."""
        return self.alpha_bars[np.asarray(t) - 1]


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    if int(T) != T or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    if T == 1:
        betas = np.array([float(beta_start)])
    else:
        steps = np.arange(T, dtype=np.float64)
        betas = beta_start + steps / (T - 1) * (beta_end - beta_start)
    return DiffusionSchedule(betas=betas, beta_start=float(beta_start), beta_end=float(beta_end))


def forward_noise(x0, t, eps, schedule: DiffusionSchedule) -> np.ndarray:
    """x_t = sqrt(ᾱ_t) x_0 + sqrt(1 - ᾱ_t) eps.

    Works on a single vector or row-wise on a batch (``t`` then an int array).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 has shape {x0.shape} but eps has shape {eps.shape}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.num_timesteps):
        raise ParameterError(f"timestep outside [1, {schedule.num_timesteps}]")
    ab = schedule.alpha_bar(t)
    if ab.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# noise predictor


def timestep_embedding(t, dim: int, num_timesteps: int) -> np.ndarray:
    """Sinusoidal features of t/T at octave-spaced frequencies, shape (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.pi * 2.0 ** np.arange(half) / num_timesteps
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


@dataclass
class NoisePredictor:
    """Fully connected ε_θ(x_t, t) with tanh hidden layers.

    ``sizes`` runs from the input width (data dim + embedding dim) to the
    output width (data dim). ``params`` is the flat vector θ laid out layer by
    layer as W (row-major, out x in) followed by b.

    With ``skip_variance`` s² > 0 the prediction is c_t x_t + MLP(x_t, t)
    where c_t = sqrt(1 - ᾱ_t) / (ᾱ_t s² + 1 - ᾱ_t) is the optimal noise
    predictor for isotropic N(0, s² I) data. The skip path has no parameters,
    so gradients and Jacobians w.r.t. θ are unaffected; it lets a narrow
    network handle high-dimensional data whose noise-like directions it could
    not otherwise represent.
    """

    sizes: tuple
    params: np.ndarray
    num_timesteps: int
    t_embed_dim: int = 8
    skip_variance: float = 0.0
    skip: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.sizes[0] != self.sizes[-1] + self.t_embed_dim:
            raise ShapeError("input width must equal data dim + embedding dim")
        if self.params.shape != (num_params(self.sizes),):
            raise ShapeError(
                f"expected {num_params(self.sizes)} parameters, got {self.params.shape}")
        self.skip_variance = float(self.skip_variance)
        if self.skip_variance < 0:
            raise ParameterError("skip_variance must be non-negative")
        if self.skip is None and self.skip_variance > 0:
            raise ParameterError("a skip path needs its per-timestep coefficients")

    @property
    def data_dim(self) -> int:
        return self.sizes[-1]

    @property
    def num_params(self) -> int:
        return len(self.params)

    def layers(self):
        """(W, b) views into ``params``."""
        out, off = [], 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            W = self.params[off:off + fan_in * fan_out].reshape(fan_out, fan_in)
            off += fan_in * fan_out
            b = self.params[off:off + fan_out]
            off += fan_out
            out.append((W, b))
        return out

    def with_params(self, params) -> "NoisePredictor":
        return NoisePredictor(self.sizes, np.array(params, dtype=np.float64),
                              self.num_timesteps, self.t_embed_dim, self.skip_variance, self.skip)


def num_params(sizes) -> int:
    return sum(i * o + o for i, o in zip(sizes[:-1], sizes[1:]))


def skip_coefficients(schedule: "DiffusionSchedule", variance: float) -> np.ndarray:
    """Per-timestep gain of the optimal noise predictor for N(0, variance·I) data."""
    ab = schedule.alpha_bars
    return np.sqrt(1.0 - ab) / (ab * variance + 1.0 - ab)


def init_predictor(data_dim: int, hidden=(32, 32), num_timesteps: int = 1000,
                   t_embed_dim: int = 8, seed: int = 0, skip_variance: float = 0.0,
                   schedule: "DiffusionSchedule" = None) -> NoisePredictor:
    sizes = (data_dim + t_embed_dim, *hidden, data_dim)
    rng = np.random.default_rng([seed, 0])
    chunks = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        chunks.append(rng.standard_normal(fan_in * fan_out) / math.sqrt(fan_in))
        chunks.append(np.zeros(fan_out))
    skip = None
    if skip_variance > 0:
        if schedule is None:
            raise ParameterError("a skip path needs the diffusion schedule")
        skip = skip_coefficients(schedule, skip_variance)
    return NoisePredictor(sizes, np.concatenate(chunks), num_timesteps, t_embed_dim,
                          skip_variance, skip)


def _as_batch(model, x_t, t):
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim == 1:
        x_t = x_t[None, :]
    if x_t.shape[1] != model.data_dim:
        raise ShapeError(f"expected data dim {model.data_dim}, got {x_t.shape[1]}")
    t = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
    return x_t, t


def _forward(model: NoisePredictor, x_t, t):
    """Batched forward pass. Returns the output and each layer's input."""
    x_t, t = _as_batch(model, x_t, t)
    a = np.concatenate([x_t, timestep_embedding(t, model.t_embed_dim, model.num_timesteps)], axis=1)
    acts = [a]
    layers = model.layers()
    for W, b in layers[:-1]:
        a = np.tanh(a @ W.T + b)
        acts.append(a)
    W, b = layers[-1]
    out = a @ W.T + b
    if model.skip is not None:
        out += model.skip[t - 1, None] * x_t
    return out, acts


def predict(model: NoisePredictor, x_t, t) -> np.ndarray:
    """ε_θ(x_t, t) for a batch (B, d); ``t`` is a scalar or (B,) int array."""
    return _forward(model, x_t, t)[0]


def predictor_forward(model: NoisePredictor, x_t, t) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim != 1:
        raise ShapeError("predictor_forward takes a single vector; use predict for batches")
    return predict(model, x_t, t)[0]


def _param_grad_per_sample(model, acts, dout) -> np.ndarray:
    """Per-sample gradients (B, p) of sum_j dout[b, j] * out[b, j]."""
    B = dout.shape[0]
    grads = np.empty((B, model.num_params))
    offsets = _offsets(model.sizes)
    dz = dout
    layers = model.layers()
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        a = acts[li]
        off_w, off_b, off_end = offsets[li]
        grads[:, off_w:off_b] = (dz[:, :, None] * a[:, None, :]).reshape(B, -1)
        grads[:, off_b:off_end] = dz
        if li:
            dz = (dz @ W) * (1.0 - a * a)
    return grads


def _param_grad_summed(model, acts, dout) -> np.ndarray:
    """Gradient (p,) of sum_b sum_j dout[b, j] * out[b, j]."""
    grad = np.empty(model.num_params)
    offsets = _offsets(model.sizes)
    dz = dout
    layers = model.layers()
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        a = acts[li]
        off_w, off_b, off_end = offsets[li]
        grad[off_w:off_b] = (dz.T @ a).ravel()
        grad[off_b:off_end] = dz.sum(axis=0)
        if li:
            dz = (dz @ W) * (1.0 - a * a)
    return grad


def _jacobian(model, acts) -> np.ndarray:
    """Per-sample output Jacobians (B, d, p)."""
    B = acts[0].shape[0]
    d = model.data_dim
    jac = np.empty((B, d, model.num_params))
    offsets = _offsets(model.sizes)
    dz = np.broadcast_to(np.eye(d), (B, d, d))
    layers = model.layers()
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        a = acts[li]
        off_w, off_b, off_end = offsets[li]
        jac[:, :, off_w:off_b] = (dz[:, :, :, None] * a[:, None, None, :]).reshape(B, d, -1)
        jac[:, :, off_b:off_end] = dz
        if li:
            dz = (dz @ W) * (1.0 - a * a)[:, None, :]
    return jac


def _offsets(sizes):
    out, off = [], 0
    for i, o in zip(sizes[:-1], sizes[1:]):
        out.append((off, off + i * o, off + i * o + o))
        off += i * o + o
    return out


# ---------------------------------------------------------------------------
# loss and derivatives


def simple_loss(model, x0, t, eps, schedule) -> float:
    """‖ε_θ(x_t, t) - eps‖² for one sample and one (t, eps) draw."""
    x_t = forward_noise(x0, t, eps, schedule)
    r = predictor_forward(model, x_t, t) - eps
    return float(r @ r)


def simple_losses(model, x0, t, eps, schedule) -> np.ndarray:
    """Row-wise simple loss for a batch of (x0, t, eps)."""
    x_t = forward_noise(x0, t, eps, schedule)
    r = predict(model, x_t, t) - eps
    return np.einsum("ij,ij->i", r, r)


def loss_gradient(model, x0, t, eps, schedule) -> np.ndarray:
    x_t = forward_noise(x0, t, eps, schedule)
    out, acts = _forward(model, x_t, t)
    return _param_grad_summed(model, acts, 2.0 * (out - eps))


def output_jacobian(model, x0, t, eps, schedule) -> np.ndarray:
    """∇_θ ε_θ(x_t, t) as a (d, p) matrix for one sample."""
    x_t = forward_noise(x0, t, eps, schedule)
    _, acts = _forward(model, x_t, t)
    return _jacobian(model, acts)[0]


def jacobians_at(model, x_t, t):
    """Batched (outputs (B, d), Jacobians (B, d, p)) at given noisy inputs."""
    out, acts = _forward(model, x_t, t)
    return out, _jacobian(model, acts)


def scalar_gradients_at(model, x_t, t, dout_fn):
    """Per-sample gradients of a scalar function of the output.

    ``dout_fn(out)`` returns the derivative of the scalar w.r.t. the output
    (B, d). Returns (outputs, per-sample gradients (B, p)).
    """
    out, acts = _forward(model, x_t, t)
    return out, _param_grad_per_sample(model, acts, dout_fn(out))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 256
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-6
    seed: int = 0
    num_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    hidden: tuple = (32, 32)
    skip_variance: float = 0.0
    t_embed_dim: int = 8
    lr_schedule: str = "cosine"
    num_checkpoints: int = 4
    noise_pool: int = 0     # >0: fixed per-example (t, eps) draws reused every step
    optimizer: str = "sgd"  # "lbfgs" minimises the noise-pool objective to a tight tolerance
    gtol: float = 1e-9

    def schedule(self) -> DiffusionSchedule:
        return make_linear_schedule(self.num_timesteps, self.beta_start, self.beta_end)

    def validate(self):
        if self.noise_pool < 0:
            raise ParameterError("noise_pool must be non-negative")
        for name in ("epochs", "batch_size", "num_timesteps", "t_embed_dim"):
            if getattr(self, name) < 0 or (name != "epochs" and getattr(self, name) == 0):
                raise ParameterError(f"{name} must be positive")
        if self.skip_variance < 0:
            raise ParameterError("skip_variance must be non-negative")
        if self.lr <= 0 or self.weight_decay < 0 or not (0 <= self.momentum < 1):
            raise ParameterError("invalid optimiser settings")
        if self.optimizer not in ("sgd", "lbfgs"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        if self.optimizer == "lbfgs" and self.noise_pool == 0:
            raise ParameterError("lbfgs needs a deterministic objective (noise_pool > 0)")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ParameterError(f"unknown lr schedule {self.lr_schedule!r}")


@dataclass
class TrainResult:
    model: NoisePredictor
    checkpoints: list = field(default_factory=list)
    losses: np.ndarray = None


def step_noise(seed: int, step: int, id_space: int, data_dim: int, T: int):
    """(t, eps) for every example id at one optimiser step.

    Keyed by (seed, step) and indexed by example id, so a sample sees the same
    draws whichever subset of the data it is trained in.
    """
    rng = np.random.default_rng([seed, 1, step])
    t = rng.integers(1, T + 1, size=id_space)
    eps = rng.standard_normal((id_space, data_dim))
    return t, eps


def pool_noise(seed: int, ids, pool: int, data_dim: int, T: int):
    """Fixed (t, eps) draws per example id: t is (n, pool), eps is (n, pool, d).

    Training with these turns the objective into a deterministic finite sum,
    so its optimum (and leave-one-out retraining) is well defined.
    """
    t = np.empty((len(ids), pool), dtype=np.int64)
    eps = np.empty((len(ids), pool, data_dim))
    for j, i in enumerate(ids):
        rng = np.random.default_rng([seed, 4, int(i)])
        t[j] = rng.integers(1, T + 1, size=pool)
        eps[j] = rng.standard_normal((pool, data_dim))
    return t, eps


def train(x, config: TrainConfig, ids=None, init: NoisePredictor = None) -> TrainResult:
    """Mini-batch SGD (momentum, decoupled weight decay) on the simple loss.

    ``x`` is (n, d); ``ids`` are the global example ids used to key the per-step
    noise (defaults to ``arange(n)``). With ``batch_size >= n`` every step is a
    full-batch step.
    """
    config.validate()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ParameterError("train needs a non-empty (n, d) dataset")
    n, d = x.shape
    ids = np.arange(n) if ids is None else np.asarray(ids, dtype=np.int64)
    id_space = int(ids.max()) + 1
    schedule = config.schedule()
    T = schedule.num_timesteps
    if init is None:
        init = init_predictor(d, config.hidden, T, config.t_embed_dim, config.seed,
                              config.skip_variance, schedule)
    model = init.with_params(init.params)
    theta = model.params  # updated in place; model views stay valid

    if config.optimizer == "lbfgs":
        return _train_lbfgs(model, x, ids, config, schedule)

    batch = min(config.batch_size, n)
    per_epoch = math.ceil(n / batch)
    total = config.epochs * per_epoch
    ckpt_steps = sorted({round(total * (c + 1) / config.num_checkpoints)
                         for c in range(config.num_checkpoints)}) if total and config.num_checkpoints else []
    checkpoints = []
    velocity = np.zeros_like(theta)
    losses = np.empty(total)
    sab = np.sqrt(schedule.alpha_bars)
    s1ab = np.sqrt(1.0 - schedule.alpha_bars)
    K = config.noise_pool
    if K:
        pool_t, pool_eps = pool_noise(config.seed, ids, K, d, T)
        pool_xt = sab[pool_t - 1, None] * x[:, None, :] + s1ab[pool_t - 1, None] * pool_eps

    step = 0
    for epoch in range(config.epochs):
        if batch < n:
            order = np.random.default_rng([config.seed, 2, epoch]).permutation(n)
        else:
            order = np.arange(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            if K:
                t = pool_t[idx].ravel()
                eps = pool_eps[idx].reshape(-1, d)
                x_t = pool_xt[idx].reshape(-1, d)
            else:
                t_all, eps_all = step_noise(config.seed, step, id_space, d, T)
                t = t_all[ids[idx]]
                eps = eps_all[ids[idx]]
                x_t = sab[t - 1, None] * x[idx] + s1ab[t - 1, None] * eps
            out, acts = _forward(model, x_t, t)
            r = out - eps
            loss = float(np.einsum("ij,ij->", r, r)) / len(t)
            if not math.isfinite(loss):
                raise TrainingDiverged(step, loss)
            losses[step] = loss
            grad = _param_grad_summed(model, acts, (2.0 / len(t)) * r)
            if config.lr_schedule == "cosine":
                lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
            else:
                lr = config.lr
            velocity *= config.momentum
            velocity += grad
            theta *= 1.0 - lr * config.weight_decay
            theta -= lr * velocity
            step += 1
            if step in ckpt_steps:
                checkpoints.append(model.with_params(theta))
    return TrainResult(model=model, checkpoints=checkpoints, losses=losses)


def _train_lbfgs(model, x, ids, config: TrainConfig, schedule) -> TrainResult:
    """Full-batch L-BFGS on mean simple loss over the noise pool + (wd/2)‖θ‖².

    The penalty matches the decoupled decay of the SGD path. ``epochs`` caps
    the iteration count.
    """
    from scipy.optimize import minimize

    n, d = x.shape
    t, eps = pool_noise(config.seed, ids, config.noise_pool, d, schedule.num_timesteps)
    x_t = forward_noise(np.repeat(x, config.noise_pool, axis=0), t.ravel(), eps.reshape(-1, d), schedule)
    t, eps = t.ravel(), eps.reshape(-1, d)
    N, wd = len(t), config.weight_decay
    losses = []

    def objective(theta):
        model.params[:] = theta
        out, acts = _forward(model, x_t, t)
        r = out - eps
        loss = float(np.einsum("ij,ij->", r, r)) / N
        if not math.isfinite(loss):
            raise TrainingDiverged(len(losses), loss)
        losses.append(loss)
        grad = _param_grad_summed(model, acts, (2.0 / N) * r) + wd * theta
        return loss + 0.5 * wd * float(theta @ theta), grad

    res = minimize(objective, model.params.copy(), jac=True, method="L-BFGS-B",
                   options=dict(maxiter=max(config.epochs, 1), gtol=config.gtol, ftol=0.0))
    model.params[:] = res.x
    return TrainResult(model=model, checkpoints=[model.with_params(res.x)], losses=np.asarray(losses))


# ---------------------------------------------------------------------------
# sampling


def sample_batch(model, schedule, num_steps: int, seeds, return_trajectory: bool = False):
    """Deterministic DDIM (eta = 0) from seeded Gaussian starts.

    The sampler visits ``timestep_grid(T, num_steps)`` from the top down. With
    ``return_trajectory`` it also returns the visited latents (S, B, d) and
    their timesteps (S,), highest timestep first.
    """
    from .features import timestep_grid

    T = schedule.num_timesteps
    if not 1 <= num_steps <= T:
        raise ParameterError(f"num_steps must lie in [1, {T}]")
    seeds = list(seeds)
    d = model.data_dim
    x = np.stack([np.random.default_rng([int(s), 3]).standard_normal(d) for s in seeds])
    grid = timestep_grid(T, num_steps)[::-1]
    ab = schedule.alpha_bars
    traj = []
    for i, t in enumerate(grid):
        traj.append(x.copy())
        eps = predict(model, x, t)
        a_t = ab[t - 1]
        a_prev = ab[grid[i + 1] - 1] if i + 1 < len(grid) else 1.0
        x0_hat = (x - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
        x = math.sqrt(a_prev) * x0_hat + math.sqrt(1.0 - a_prev) * eps
    if return_trajectory:
        return x, np.stack(traj), np.array(grid)
    return x


def sample(model, schedule, num_steps: int = 50, seed: int = 0) -> np.ndarray:
    return sample_batch(model, schedule, num_steps, [seed])[0]


# ---------------------------------------------------------------------------
# model file


def save_model(path, model: NoisePredictor, schedule: DiffusionSchedule):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(model_to_bytes(model, schedule))
    tmp.replace(path)


def model_to_bytes(model: NoisePredictor, schedule: DiffusionSchedule) -> bytes:
    buf = bytearray(MODEL_MAGIC)
    buf += struct.pack("<I", len(model.sizes))
    buf += struct.pack(f"<{len(model.sizes)}I", *model.sizes)
    buf += struct.pack("<I", schedule.num_timesteps)
    buf += struct.pack("<3d", schedule.beta_start, schedule.beta_end,
                       model.skip_variance)
    buf += model.params.astype("<f8").tobytes()
    return bytes(buf)


def model_from_bytes(data: bytes):
    def need(off, size, what):
        if off + size > len(data):
            raise FormatError(f"truncated model file while reading {what}", off)

    need(0, 4, "magic")
    if data[:4] != MODEL_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MODEL_MAGIC!r}", 0)
    off = 4
    need(off, 4, "layer count")
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    if count < 2:
        raise FormatError(f"layer count {count} < 2", off - 4)
    need(off, 4 * count, "layer sizes")
    sizes = struct.unpack_from(f"<{count}I", data, off)
    off += 4 * count
    need(off, 28, "schedule")
    (T,) = struct.unpack_from("<I", data, off)
    beta_start, beta_end, skip_variance = struct.unpack_from("<3d", data, off + 4)
    if not skip_variance >= 0:
        raise FormatError(f"invalid skip variance {skip_variance}", off + 20)
    off += 28
    p = num_params(sizes)
    need(off, 8 * p, "parameters")
    if len(data) != off + 8 * p:
        raise FormatError("trailing bytes after parameter vector", off + 8 * p)
    params = np.frombuffer(data, dtype="<f8", count=p, offset=off).astype(np.float64)
    embed = sizes[0] - sizes[-1]
    if embed < 0:
        raise FormatError("input width smaller than output width", 8)
    try:
        schedule = make_linear_schedule(T, beta_start, beta_end)
    except ParameterError as exc:
        raise FormatError(f"invalid schedule in model file: {exc}", 12 + 4 * count) from None
    skip = skip_coefficients(schedule, skip_variance) if skip_variance > 0 else None
    return NoisePredictor(sizes, params, T, embed, skip_variance, skip), schedule


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())
