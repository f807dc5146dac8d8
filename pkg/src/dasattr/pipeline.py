"""Feature extraction and scoring for every attribution method on one base model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attribution as attr
from . import ddpm
from .errors import ConfigurationError, ParameterError
from .features import (FeatureMode, FeatureSet, ProjectionSpec, average, extract_features,
                       features_at, make_projection, timestep_grid)

KERNEL_METHODS = ("das", "das_per_timestep", "trak", "dtrak:simple_loss", "dtrak:square_norm",
                  "dtrak:output_avg", "journey_trak", "relative_if", "renormalized_if")
OTHER_METHODS = ("grad_dot", "grad_cos", "tracincp", "gas", "raw_dot", "raw_cos", "random")
METHODS = KERNEL_METHODS + OTHER_METHODS

GEN_KEY_OFFSET = 100_000


@dataclass
class FeatureConfig:
    timesteps: int = 10
    k: int = 512                 # 0 means the identity projection
    projection_seed: int = 0
    noise_seed: int = 0
    target_noise_seed: int = 1
    draws: int = 1
    normalize: bool = False
    mask: np.ndarray = None
    journey_steps: int = 50

    def projection_spec(self, p: int, seed_offset: int = 0) -> ProjectionSpec:
        identity = self.k == 0 or self.k >= _masked_dim(self.mask, p)
        return ProjectionSpec(k=None if identity else self.k, seed=self.projection_seed + seed_offset,
                              mask=self.mask, identity=identity)


def _masked_dim(mask, p):
    return p if mask is None else int(np.asarray(mask, dtype=bool).sum())


@dataclass
class Targets:
    """Samples whose generation/loss we attribute.

    ``keys`` are integer ids used to key each target's frozen noise stream.
    Generated targets carry their DDIM trajectory for Journey TRAK.
    """

    names: list
    keys: np.ndarray
    x: np.ndarray
    trajectory: np.ndarray = None       # (nt, S, d)
    trajectory_t: np.ndarray = None     # (S,)

    def __len__(self):
        return len(self.keys)

    def select(self, index) -> "Targets":
        index = np.asarray(index)
        traj = None if self.trajectory is None else self.trajectory[index]
        return Targets([self.names[i] for i in index], self.keys[index], self.x[index],
                       traj, self.trajectory_t)


def validation_targets(x, first_key: int = 0, prefix: str = "val") -> Targets:
    x = np.asarray(x, dtype=np.float64)
    keys = first_key + np.arange(len(x))
    return Targets([f"{prefix}-{k}" for k in keys], keys, x)


def generated_targets(model, schedule, seeds, journey_steps=50) -> Targets:
    seeds = list(seeds)
    x, traj, ts = ddpm.sample_batch(model, schedule, journey_steps, seeds, return_trajectory=True)
    return Targets([f"gen-{s}" for s in seeds], GEN_KEY_OFFSET + np.asarray(seeds), x,
                   traj.transpose(1, 0, 2), ts)


def concat_targets(a: Targets, b: Targets) -> Targets:
    """Join two groups; the trajectory survives only when both carry one on the same grid."""
    traj, ts = None, None
    if (a.trajectory is not None and b.trajectory is not None
            and np.array_equal(a.trajectory_t, b.trajectory_t)):
        traj, ts = np.concatenate([a.trajectory, b.trajectory]), a.trajectory_t
    return Targets(list(a.names) + list(b.names), np.concatenate([a.keys, b.keys]),
                   np.concatenate([a.x, b.x]), traj, ts)


def method_mode(method: str) -> FeatureMode:
    if method in ("das", "das_per_timestep"):
        return FeatureMode("exact")
    if method.startswith("dtrak:"):
        return FeatureMode("scalar", method.split(":", 1)[1])
    if method in ("trak", "journey_trak", "relative_if", "renormalized_if",
                  "grad_dot", "grad_cos", "tracincp", "gas", "dtrak"):
        return FeatureMode("scalar", "simple_loss")
    return None


class Attributor:
    """Lazily extracts and caches features, then scores targets per method."""

    def __init__(self, model, schedule, train_x, fconfig: FeatureConfig, checkpoints=(),
                 train_ids=None):
        self.model = model
        self.schedule = schedule
        self.train_x = np.asarray(train_x, dtype=np.float64)
        self.train_ids = np.arange(len(self.train_x)) if train_ids is None else np.asarray(train_ids)
        self.fc = fconfig
        self.checkpoints = list(checkpoints)
        self.grid = timestep_grid(schedule.num_timesteps, fconfig.timesteps)
        self._proj = {}
        self._train = {}
        self._target = {}
        self._kernels = {}

    # features ---------------------------------------------------------------

    def projection(self, ckpt=None):
        key = -1 if ckpt is None else ckpt
        if key not in self._proj:
            p = self.model.num_params
            self._proj[key] = make_projection(self.fc.projection_spec(p, 0 if ckpt is None else 101 + ckpt), p)
        return self._proj[key]

    def _model(self, ckpt):
        return self.model if ckpt is None else self.checkpoints[ckpt]

    def train_features(self, mode: FeatureMode, ckpt=None) -> FeatureSet:
        key = (str(mode), ckpt)
        if key not in self._train:
            self._train[key] = extract_features(
                self._model(ckpt), self.schedule, self.train_x, self.train_ids, self.grid, mode,
                self.projection(ckpt), self.fc.noise_seed, self.fc.draws)
        return self._train[key]

    def target_features(self, targets: Targets, mode: FeatureMode, ckpt=None) -> FeatureSet:
        key = (str(mode), ckpt, targets.keys.tobytes())
        if key not in self._target:
            self._target[key] = extract_features(
                self._model(ckpt), self.schedule, targets.x, targets.keys, self.grid, mode,
                self.projection(ckpt), self.fc.target_noise_seed, self.fc.draws)
        return self._target[key]

    def journey_features(self, targets: Targets) -> np.ndarray:
        """Projected simple-loss gradients at each visited latent, (nt, S, k)."""
        if targets.trajectory is None:
            raise ConfigurationError("journey_trak needs generated targets with a sampling trajectory")
        nt, S, d = targets.trajectory.shape
        t = np.tile(targets.trajectory_t, nt)
        x_t = targets.trajectory.reshape(nt * S, d)
        ab = self.schedule.alpha_bar(t)[:, None]
        x0 = np.repeat(targets.x, S, axis=0)
        eps = (x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)   # noise implied by the final sample
        blocks, _ = features_at(self.model, x_t, t, eps, FeatureMode("scalar", "simple_loss"),
                                self.projection())
        return blocks[:, 0, :].reshape(nt, S, -1)

    def averaged(self, fs: FeatureSet):
        return average(fs, self.fc.normalize)

    def kernel(self, mode: FeatureMode, lam: float):
        key = (str(mode), float(lam))
        if key not in self._kernels:
            self._kernels[key] = attr.build_kernel(self.averaged(self.train_features(mode)), lam)
        return self._kernels[key]

    # scoring ----------------------------------------------------------------

    def score(self, method: str, targets: Targets, lam: float = 1e-3, seed: int = 0):
        meta = dict(timesteps=len(self.grid))
        if method == "random":
            rng = np.random.default_rng([seed, 11])
            return attr.AttributionResult("random", targets.keys, self.train_ids,
                                          rng.standard_normal((len(targets), len(self.train_x))), **meta)
        if method in ("raw_dot", "raw_cos"):
            return attr.raw_similarity(targets.x, self.train_x, method[4:], targets.keys, self.train_ids, **meta)
        if method not in METHODS:
            raise ParameterError(f"unknown method {method!r}")
        mode = method_mode(method)
        if method in ("tracincp", "gas"):
            if not self.checkpoints:
                raise ConfigurationError(f"{method} needs training checkpoints")
            pairs = [(self.averaged(self.target_features(targets, mode, c)),
                      self.averaged(self.train_features(mode, c))) for c in range(len(self.checkpoints))]
            res = (attr.tracincp if method == "tracincp" else attr.gas)(pairs, **meta)
            res.target_ids = targets.keys
            return res
        train_fs = self.train_features(mode)
        meta["fingerprint"] = train_fs.fingerprint()
        if method == "das_per_timestep":
            return attr.das_timestep_average(self.target_features(targets, mode), train_fs, lam, **meta)
        train = self.averaged(train_fs)
        if method in ("grad_dot", "grad_cos"):
            return attr.gradient_similarity(self.averaged(self.target_features(targets, mode)), train,
                                            method[5:], **meta)
        kernel = self.kernel(mode, lam)
        if method == "journey_trak":
            return attr.journey_trak_score(self.journey_features(targets), train, kernel,
                                           target_ids=targets.keys, **meta)
        target = self.averaged(self.target_features(targets, mode))
        if method == "das":
            return attr.das_score(target, train, kernel, **meta)
        if method == "trak":
            return attr.trak_score(target, train, kernel, attr.trak_residuals(train_fs), **meta)
        if method.startswith("dtrak"):
            return attr.dtrak_score(target, train, kernel, method=method, **meta)
        if method == "relative_if":
            return attr.relative_if_score(target, train, kernel, **meta)
        if method == "renormalized_if":
            return attr.renormalized_if_score(target, train, kernel, **meta)
        raise ParameterError(f"unknown method {method!r}")
