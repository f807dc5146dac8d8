"""Per-sample, per-timestep gradient features, projection and averaging.

A :class:`FeatureSet` holds, for every sample and every (timestep, noise draw)
entry, a projected gradient block and the residual ε_θ(x_t, t) - ε. In exact
mode a block is the projected output Jacobian (d x k); in scalarised mode it
is the projected gradient of one scalar function of the output (1 x k).
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ddpm
from .errors import CapacityError, FormatError, ParameterError, ShapeError

STORE_MAGIC = b"DASF"
STORE_VERSION = 1

SCALARIZERS = ("simple_loss", "square_norm", "output_sum", "output_avg")


@dataclass(frozen=True)
class FeatureMode:
    variant: str = "exact"          # "exact" or "scalar"
    scalarizer: str = None          # one of SCALARIZERS when variant == "scalar"

    def __post_init__(self):
        if self.variant not in ("exact", "scalar"):
            raise ParameterError(f"unknown feature mode {self.variant!r}")
        if self.variant == "scalar" and self.scalarizer not in SCALARIZERS:
            raise ParameterError(f"unknown scalarizer {self.scalarizer!r}")
        if self.variant == "exact" and self.scalarizer is not None:
            raise ParameterError("exact mode takes no scalarizer")

    @property
    def code(self) -> int:
        return 0 if self.variant == "exact" else 1 + SCALARIZERS.index(self.scalarizer)

    @classmethod
    def from_code(cls, code: int) -> "FeatureMode":
        if code == 0:
            return cls("exact")
        if 1 <= code <= len(SCALARIZERS):
            return cls("scalar", SCALARIZERS[code - 1])
        raise ParameterError(f"unknown feature mode code {code}")

    @classmethod
    def parse(cls, text: str) -> "FeatureMode":
        # "exact" or "scalar:<scalarizer>"
        if text == "exact":
            return cls("exact")
        variant, _, scal = text.partition(":")
        return cls(variant, scal or None)

    def __str__(self):
        return "exact" if self.variant == "exact" else f"scalar:{self.scalarizer}"

    def rows(self, data_dim: int) -> int:
        return data_dim if self.variant == "exact" else 1


EXACT = FeatureMode("exact")


def _scalar_dout(scalarizer, eps):
    """Derivative of the scalariser w.r.t. the network output."""
    if scalarizer == "simple_loss":
        return lambda out: 2.0 * (out - eps)
    if scalarizer == "square_norm":
        return lambda out: 2.0 * out
    if scalarizer == "output_sum":
        return lambda out: np.ones_like(out)
    if scalarizer == "output_avg":
        return lambda out: np.full_like(out, 1.0 / out.shape[1])
    raise ParameterError(f"unknown scalarizer {scalarizer!r}")


# ---------------------------------------------------------------------------
# projection


@dataclass(frozen=True)
class ProjectionSpec:
    k: int
    seed: int = 0
    scale: bool = True
    mask: np.ndarray = None
    identity: bool = False

    def effective_dim(self, p: int) -> int:
        if self.mask is None:
            return p
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != (p,):
            raise ShapeError(f"mask has shape {mask.shape}, expected ({p},)")
        return int(mask.sum())


class Projection:
    """Gaussian sketch P (p_eff x k) with N(0, 1) entries, optionally / sqrt(k).

    Rows of P are generated in fixed blocks from ``(seed, block index)`` so the
    same matrix comes back whether it is cached or streamed. Small matrices are
    cached; large ones are regenerated block by block on every call.
    """

    BLOCK_ROWS = 2048
    CACHE_LIMIT = 1 << 22  # entries

    def __init__(self, spec: ProjectionSpec, p: int):
        self.spec = spec
        self.p = int(p)
        self.p_eff = spec.effective_dim(self.p)
        self.k = self.p_eff if spec.identity else int(spec.k)
        if spec.identity and spec.k not in (None, self.p_eff):
            raise ParameterError(f"identity projection needs k = p_eff = {self.p_eff}")
        if not 1 <= self.k <= self.p_eff:
            raise ParameterError(f"projection dim k={spec.k} must lie in [1, {self.p_eff}]")
        self._mask = None if spec.mask is None else np.flatnonzero(np.asarray(spec.mask, dtype=bool))
        self._scale = 1.0 / math.sqrt(self.k) if spec.scale else 1.0
        self._cached = None
        if not spec.identity and self.p_eff * self.k <= self.CACHE_LIMIT:
            self._cached = np.concatenate([self._block(b) for b in range(self._num_blocks())], axis=0)

    def _num_blocks(self):
        return -(-self.p_eff // self.BLOCK_ROWS)

    def _block(self, b):
        rows = min(self.BLOCK_ROWS, self.p_eff - b * self.BLOCK_ROWS)
        rng = np.random.default_rng([self.spec.seed, 7, b])
        return rng.standard_normal((rows, self.k)) * self._scale

    def matrix(self) -> np.ndarray:
        """Materialised P (p_eff x k); only sensible for small sizes."""
        if self.spec.identity:
            return np.eye(self.p_eff)
        if self._cached is not None:
            return self._cached
        return np.concatenate([self._block(b) for b in range(self._num_blocks())], axis=0)

    def apply(self, v) -> np.ndarray:
        """Pᵀ v along the last axis: (..., p) -> (..., k)."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.p:
            raise ShapeError(f"expected last axis {self.p}, got {v.shape[-1]}")
        if self._mask is not None:
            v = v[..., self._mask]
        if self.spec.identity:
            return np.array(v, copy=True)
        lead = v.shape[:-1]
        flat = v.reshape(-1, self.p_eff)
        if self._cached is not None:
            out = flat @ self._cached
        else:
            out = np.zeros((flat.shape[0], self.k))
            for b in range(self._num_blocks()):
                lo = b * self.BLOCK_ROWS
                blk = self._block(b)
                out += flat[:, lo:lo + blk.shape[0]] @ blk
        return out.reshape(*lead, self.k)


def make_projection(spec: ProjectionSpec, p: int) -> Projection:
    return Projection(spec, p)


# ---------------------------------------------------------------------------
# timesteps and noise


def timestep_grid(T: int, count: int) -> np.ndarray:
    """``count`` evenly spaced integer timesteps in [1, T], endpoints included.

    A single timestep sits at the midpoint ``(T + 1) // 2``.
    """
    if count < 1 or count > T:
        raise ParameterError(f"timestep count must lie in [1, {T}], got {count}")
    if count == 1:
        return np.array([(T + 1) // 2])
    return np.floor(np.linspace(1, T, count) + 0.5).astype(np.int64)


def noise_table(seed: int, sample_id: int, T: int, draws: int, d: int) -> np.ndarray:
    """Frozen noise for one sample: eps[draw, t - 1] has shape (draws, T, d).

    Draw j is the same whatever the total number of draws, so a one-draw
    feature pass shares its noise with a three-draw evaluation protocol.
    """
    rng = np.random.default_rng([int(seed), 4, int(sample_id)])
    return rng.standard_normal((draws, T, d))


def frozen_eps(seed, ids, timesteps, draws, T, d) -> np.ndarray:
    """eps for every (sample, timestep, draw): shape (n, len(timesteps), draws, d)."""
    ts = np.asarray(timesteps) - 1
    out = np.empty((len(ids), len(ts), draws, d))
    for i, sid in enumerate(ids):
        tab = noise_table(seed, sid, T, draws, d)
        out[i] = tab[:, ts, :].transpose(1, 0, 2)
    return out


# ---------------------------------------------------------------------------
# feature containers


@dataclass
class SampleFeatures:
    sample_id: int
    blocks: np.ndarray      # (m, rows, k)
    residuals: np.ndarray   # (m, d)
    timesteps: np.ndarray   # (m,)


@dataclass
class FeatureSet:
    mode: FeatureMode
    ids: np.ndarray         # (n,)
    timesteps: np.ndarray   # (m,) may repeat when several noise draws are used
    blocks: np.ndarray      # (n, m, rows, k)
    residuals: np.ndarray   # (n, m, d)

    @property
    def k(self) -> int:
        return self.blocks.shape[3]

    @property
    def d(self) -> int:
        return self.residuals.shape[2]

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i) -> SampleFeatures:
        return SampleFeatures(int(self.ids[i]), self.blocks[i], self.residuals[i], self.timesteps)

    def select(self, index) -> "FeatureSet":
        index = np.asarray(index)
        return FeatureSet(self.mode, self.ids[index], self.timesteps,
                          self.blocks[index], self.residuals[index])

    def at_timestep(self, j: int) -> "FeatureSet":
        """Keep only timestep entry ``j``."""
        return FeatureSet(self.mode, self.ids, self.timesteps[j:j + 1],
                          self.blocks[:, j:j + 1], self.residuals[:, j:j + 1])

    def fingerprint(self) -> str:
        return hashlib.sha256(store_to_bytes(self)).hexdigest()[:16]


@dataclass
class AveragedFeatures:
    ids: np.ndarray
    g: np.ndarray           # (n, rows, k)
    r: np.ndarray           # (n, d)
    normalized: bool
    mode: FeatureMode = EXACT

    def __len__(self):
        return len(self.ids)

    def select(self, index) -> "AveragedFeatures":
        index = np.asarray(index)
        return AveragedFeatures(self.ids[index], self.g[index], self.r[index], self.normalized, self.mode)


def _normalized_mean(x, axis):
    """Mean over ``axis`` of x / sqrt(sum over axis of x^2), zero-energy -> 0."""
    energy = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    safe = np.where(energy > 0, energy, 1.0)
    return np.where(energy > 0, x / safe, 0.0).mean(axis=axis)


def normalize_and_average(features) -> AveragedFeatures:
    """Per-coordinate unit-energy normalisation across timesteps, then the mean.

    Accepts a :class:`FeatureSet` or a single :class:`SampleFeatures`.
    """
    if isinstance(features, SampleFeatures):
        fs = FeatureSet(EXACT, np.array([features.sample_id]), features.timesteps,
                        features.blocks[None], features.residuals[None])
    else:
        fs = features
    if fs.blocks.shape[1] < 1:
        raise ParameterError("need at least one timestep")
    return AveragedFeatures(fs.ids, _normalized_mean(fs.blocks, 1),
                            _normalized_mean(fs.residuals, 1), True, fs.mode)


def plain_average(features) -> AveragedFeatures:
    if isinstance(features, SampleFeatures):
        fs = FeatureSet(EXACT, np.array([features.sample_id]), features.timesteps,
                        features.blocks[None], features.residuals[None])
    else:
        fs = features
    return AveragedFeatures(fs.ids, fs.blocks.mean(axis=1), fs.residuals.mean(axis=1), False, fs.mode)


def average(features, normalize: bool) -> AveragedFeatures:
    return normalize_and_average(features) if normalize else plain_average(features)


# ---------------------------------------------------------------------------
# extraction


DEFAULT_MEMORY_BUDGET = 2 << 30  # bytes
_CHUNK_BYTES = 64 << 20


def features_at(model, x_t, t, eps, mode: FeatureMode, projection: Projection):
    """Projected gradient blocks (B, rows, k) and residuals (B, d) at given inputs."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t), (len(x_t),))
    B, d = x_t.shape
    p = model.num_params
    per_row = (d if mode.variant == "exact" else 1) * p * 8
    chunk = max(1, _CHUNK_BYTES // per_row)
    blocks = np.empty((B, mode.rows(d), projection.k))
    resid = np.empty((B, d))
    for lo in range(0, B, chunk):
        sl = slice(lo, lo + chunk)
        if mode.variant == "exact":
            out, jac = ddpm.jacobians_at(model, x_t[sl], t[sl])
            blocks[sl] = projection.apply(jac)
        else:
            out, grads = ddpm.scalar_gradients_at(model, x_t[sl], t[sl],
                                                  _scalar_dout(mode.scalarizer, eps[sl]))
            blocks[sl, 0] = projection.apply(grads)
        resid[sl] = out - eps[sl]
    return blocks, resid


def extract_features(model, schedule, x0, ids, timesteps, mode: FeatureMode,
                     projection: Projection, noise_seed: int, draws: int = 1,
                     memory_budget: int = DEFAULT_MEMORY_BUDGET) -> FeatureSet:
    """Features for every sample at every (timestep, draw).

    Noise for sample ``i`` comes from the stream keyed by its id, so extracting
    a slice gives the same rows as extracting everything.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    timesteps = np.asarray(timesteps, dtype=np.int64)
    T = schedule.num_timesteps
    if len(timesteps) == 0 or timesteps.min() < 1 or timesteps.max() > T:
        raise ParameterError(f"timesteps must be a non-empty subset of [1, {T}]")
    if projection.p != model.num_params:
        raise ShapeError("projection was built for a different parameter count")
    n, d = x0.shape
    m = len(timesteps) * draws
    rows = mode.rows(d)
    need = n * m * rows * projection.k * 8
    if need > memory_budget:
        raise CapacityError(
            f"feature store needs {need / 2**20:.1f} MiB, budget is {memory_budget / 2**20:.1f} MiB")
    eps = frozen_eps(noise_seed, ids, timesteps, draws, T, d)       # (n, nt, draws, d)
    eps = eps.reshape(n, m, d)
    t_entries = np.repeat(timesteps, draws)
    t_flat = np.tile(t_entries, n)
    x_rep = np.repeat(x0, m, axis=0)
    x_t = ddpm.forward_noise(x_rep, t_flat, eps.reshape(n * m, d), schedule)
    blocks, resid = features_at(model, x_t, t_flat, eps.reshape(n * m, d), mode, projection)
    return FeatureSet(mode, ids, t_entries,
                      blocks.reshape(n, m, rows, projection.k), resid.reshape(n, m, d))


# ---------------------------------------------------------------------------
# feature store


def store_to_bytes(fs: FeatureSet) -> bytes:
    n, m, rows, k = fs.blocks.shape
    d = fs.residuals.shape[2]
    head = bytearray(STORE_MAGIC)
    head += struct.pack("<5I", STORE_VERSION, fs.mode.code, k, d, m)
    head += np.asarray(fs.timesteps, dtype="<u4").tobytes()
    head += struct.pack("<Q", n)
    parts = [bytes(head)]
    for i in range(n):
        parts.append(struct.pack("<Q", int(fs.ids[i])))
        parts.append(np.ascontiguousarray(fs.blocks[i], dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(fs.residuals[i], dtype="<f8").tobytes())
    return b"".join(parts)


def store_from_bytes(data: bytes) -> FeatureSet:
    def need(off, size, what):
        if off + size > len(data):
            raise FormatError(f"truncated feature store while reading {what}", off)

    need(0, 4, "magic")
    if data[:4] != STORE_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {STORE_MAGIC!r}", 0)
    need(4, 20, "header")
    version, code, k, d, m = struct.unpack_from("<5I", data, 4)
    if version != STORE_VERSION:
        raise FormatError(f"unsupported feature store version {version}", 4)
    try:
        mode = FeatureMode.from_code(code)
    except ParameterError as exc:
        raise FormatError(str(exc), 8) from None
    off = 24
    need(off, 4 * m, "timestep list")
    timesteps = np.frombuffer(data, dtype="<u4", count=m, offset=off).astype(np.int64)
    off += 4 * m
    need(off, 8, "record count")
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    rows = mode.rows(d)
    rec = 8 + 8 * (m * rows * k + m * d)
    need(off, n * rec, f"{n} records")
    if len(data) != off + n * rec:
        raise FormatError("trailing bytes after last record", off + n * rec)
    ids = np.empty(n, dtype=np.int64)
    blocks = np.empty((n, m, rows, k))
    resid = np.empty((n, m, d))
    for i in range(n):
        (ids[i],) = struct.unpack_from("<Q", data, off)
        off += 8
        blocks[i] = np.frombuffer(data, dtype="<f8", count=m * rows * k, offset=off).reshape(m, rows, k)
        off += 8 * m * rows * k
        resid[i] = np.frombuffer(data, dtype="<f8", count=m * d, offset=off).reshape(m, d)
        off += 8 * m * d
    return FeatureSet(mode, ids, timesteps, blocks, resid)


def store_write(path, fs: FeatureSet):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(store_to_bytes(fs))
    tmp.replace(path)


def store_read(path) -> FeatureSet:
    return store_from_bytes(Path(path).read_bytes())
