"""Damped Gram kernels and the attribution scores built on them.

Feature conventions: a training set contributes ``n`` blocks of shape
(rows, k). For exact-Jacobian features ``rows = d``; for scalarised gradient
features ``rows = 1``. Every sample contributes all of its rows to the kernel

    H = sum_i g_iᵀ g_i + λ I.

Score matrices are laid out (targets, training samples).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import ddpm
from .errors import ConfigurationError, ParameterError, SingularityError

log = logging.getLogger(__name__)

LEVERAGE_TOL = 1e-10


# ---------------------------------------------------------------------------
# kernel


class Kernel:
    """H = ΦᵀΦ + λI, Cholesky-factorised once."""

    def __init__(self, H: np.ndarray, lam: float):
        self.H = H
        self.lam = float(lam)
        k = H.shape[0]
        diag = np.diag(H)
        scale = diag.max() if k and diag.max() > 0 else 1.0
        try:
            self._factor = scipy.linalg.cho_factor(H, lower=True, check_finite=True)
        except np.linalg.LinAlgError:
            pivot = float(np.linalg.eigvalsh(H).min())
            raise SingularityError(
                f"kernel is singular (smallest pivot {pivot:.3e}) at lambda={self.lam:g}; "
                "use a positive damping lambda", pivot) from None
        pivots = np.diag(self._factor[0]) ** 2
        if pivots.min() <= k * np.finfo(float).eps * scale:
            raise SingularityError(
                f"kernel is numerically singular (smallest pivot {pivots.min():.3e}) at "
                f"lambda={self.lam:g}; use a positive damping lambda", float(pivots.min()))

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self._factor, b)


def feature_rows(features) -> np.ndarray:
    """Stack every row of a feature container into a (N, k) matrix."""
    if hasattr(features, "blocks"):
        g = features.blocks
    elif hasattr(features, "g"):
        g = features.g
    else:
        g = np.asarray(features)
    return g.reshape(-1, g.shape[-1])


def build_kernel(features, lam: float) -> Kernel:
    if lam < 0:
        raise ParameterError("lambda must be non-negative")
    phi = feature_rows(features)
    H = phi.T @ phi
    H[np.diag_indices_from(H)] += lam
    return Kernel(H, lam)


# ---------------------------------------------------------------------------
# results


@dataclass
class AttributionResult:
    method: str
    target_ids: np.ndarray
    train_ids: np.ndarray
    scores: np.ndarray              # (targets, n)
    lam: float = float("nan")
    timesteps: int = 0
    fingerprint: str = ""
    flags: np.ndarray = None        # leverage-one markers, same shape as scores

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim == 1:
            self.scores = self.scores[None, :]
        if self.flags is None:
            self.flags = np.zeros(self.scores.shape, dtype=bool)
        if np.isnan(self.scores).any():
            raise ValueError(f"{self.method}: NaN in attribution scores")

    def ranks(self) -> np.ndarray:
        """1-based ranks per target, highest score first, ties by train index."""
        order = np.argsort(-self.scores, axis=1, kind="stable")
        ranks = np.empty_like(order)
        rows = np.arange(order.shape[0])[:, None]
        ranks[rows, order] = np.arange(1, order.shape[1] + 1)[None, :]
        return ranks

    def top_k(self, j: int, k: int) -> np.ndarray:
        """Positions (into the training set) of the k highest scores of target j."""
        return np.argsort(-self.scores[j], kind="stable")[:k]


# ---------------------------------------------------------------------------
# DAS


def _as_blocks(features):
    """(g (n, rows, k), r (n, d)) from averaged features or raw arrays."""
    if hasattr(features, "g"):
        return features.g, features.r
    g, r = features
    return np.asarray(g, dtype=np.float64), np.asarray(r, dtype=np.float64)


def das_matrix(target_g, train_g, train_r, kernel: Kernel):
    """DAS for every (target, train) pair; returns (scores, leverage-one flags).

    score_i = ‖ g_gen H⁻¹ g_iᵀ (I - g_i H⁻¹ g_iᵀ)⁻¹ R_i ‖²

    with R_i = r_i as a column in exact mode (rows = d) and as a row in
    scalarised mode (rows = 1), where the denominator is a scalar.
    """
    target_g = np.asarray(target_g)
    n, rows, k = train_g.shape
    nt, rows_t, _ = target_g.shape
    A = kernel.solve(train_g.reshape(n * rows, k).T).reshape(k, n, rows)  # H⁻¹ g_iᵀ
    self_lev = np.einsum("irk,kis->irs", train_g, A)                     # g_i H⁻¹ g_iᵀ
    D = np.eye(rows)[None] - self_lev
    R = train_r.reshape(n, rows, -1)
    W = np.empty_like(R)
    flags = np.zeros(n, dtype=bool)
    for i in range(n):
        s = np.linalg.svd(D[i], compute_uv=False)
        if s.min() < LEVERAGE_TOL:
            flags[i] = True
            W[i] = 0.0
        else:
            W[i] = np.linalg.solve(D[i], R[i])
    delta = np.einsum("kis,isc->kic", A, W)                               # (k, n, c)
    V = np.einsum("tak,kic->taic", target_g, delta)                      # (nt, rows_t, n, c)
    scores = np.einsum("taic,taic->ti", V, V)
    if flags.any():
        log.warning("%d training samples have leverage one; their DAS is set to 0 and flagged",
                    int(flags.sum()))
    return scores, np.broadcast_to(flags, (nt, n)).copy()


def das_score(target, train, kernel: Kernel, **meta) -> AttributionResult:
    """Full-generation DAS from averaged (ḡ, r̄) features."""
    tg, _ = _as_blocks(target)
    g, r = _as_blocks(train)
    scores, flags = das_matrix(tg, g, r, kernel)
    return AttributionResult("das", _ids(target, len(tg)), _ids(train, len(g)),
                             scores, lam=kernel.lam, flags=flags, **meta)


def das_per_timestep(target_fs, train_fs, j: int, lam: float, **meta) -> AttributionResult:
    """DAS from the blocks of timestep entry ``j`` alone (its own kernel G_tᵀG_t + λI)."""
    g = train_fs.blocks[:, j]
    kernel = build_kernel(g, lam)
    scores, flags = das_matrix(target_fs.blocks[:, j], g, train_fs.residuals[:, j], kernel)
    return AttributionResult("das_per_timestep", target_fs.ids, train_fs.ids, scores,
                             lam=lam, flags=flags, **meta)


def das_timestep_average(target_fs, train_fs, lam: float, **meta) -> AttributionResult:
    """Mean over timestep entries of the per-timestep DAS."""
    m = train_fs.blocks.shape[1]
    total = None
    flags = None
    for j in range(m):
        res = das_per_timestep(target_fs, train_fs, j, lam)
        total = res.scores if total is None else total + res.scores
        flags = res.flags if flags is None else flags | res.flags
    return AttributionResult("das_per_timestep", target_fs.ids, train_fs.ids, total / m,
                             lam=lam, flags=flags, **meta)


def newton_loo_delta(train_g, train_r, i: int, kernel: Kernel) -> np.ndarray:
    """θ* - θ*_{\\i} from one Newton step, with sample i removed by Woodbury.

    ``train_g`` is (n, m, k): sample i contributes the m rows U_i; ``train_r``
    is (n, m). The result is H⁻¹ U_iᵀ (I - U_i H⁻¹ U_iᵀ)⁻¹ r_i.
    """
    U = np.asarray(train_g)[i]
    r = np.asarray(train_r)[i]
    HU = kernel.solve(U.T)                      # (k, m)
    D = np.eye(U.shape[0]) - U @ HU
    if np.linalg.svd(D, compute_uv=False).min() < LEVERAGE_TOL:
        raise SingularityError(f"sample {i} has leverage one; its removal is not a finite Newton step")
    return HU @ np.linalg.solve(D, r)


def newton_loo_deltas(train_g, train_r, kernel: Kernel) -> np.ndarray:
    """All n Newton deltas as an (n, k) array."""
    n, m, k = train_g.shape
    HU = kernel.solve(train_g.reshape(n * m, k).T).reshape(k, n, m)
    out = np.empty((n, k))
    for i in range(n):
        D = np.eye(m) - train_g[i] @ HU[:, i, :]
        out[i] = HU[:, i, :] @ np.linalg.solve(D, train_r[i])
    return out


# ---------------------------------------------------------------------------
# kernel baselines on scalarised gradients


def _scalar_phi(features):
    g = features.g if hasattr(features, "g") else np.asarray(features)
    if g.ndim == 3:
        if g.shape[1] != 1:
            raise ConfigurationError("this method needs scalarised gradient features (one row per sample)")
        g = g[:, 0, :]
    return g


def _ids(features, n):
    return np.asarray(features.ids) if hasattr(features, "ids") else np.arange(n)


def kernel_products(target_phi, train_phi, kernel: Kernel):
    """(φ_target H⁻¹ Φᵀ, H⁻¹ Φᵀ)."""
    HPhi = kernel.solve(train_phi.T)
    return target_phi @ HPhi, HPhi


def trak_residuals(train_fs) -> np.ndarray:
    """Scalar TRAK residual per sample: RMS of ‖ε_θ - ε‖ over timestep entries."""
    r = train_fs.residuals
    return np.sqrt(np.einsum("nmd,nmd->n", r, r) / r.shape[1])


def dtrak_score(target, train, kernel: Kernel, method="dtrak", **meta) -> AttributionResult:
    tp, p = _scalar_phi(target), _scalar_phi(train)
    K, _ = kernel_products(tp, p, kernel)
    return AttributionResult(method, _ids(target, len(tp)), _ids(train, len(p)), K, lam=kernel.lam, **meta)


def trak_score(target, train, kernel: Kernel, residuals, **meta) -> AttributionResult:
    tp, p = _scalar_phi(target), _scalar_phi(train)
    K, _ = kernel_products(tp, p, kernel)
    return AttributionResult("trak", _ids(target, len(tp)), _ids(train, len(p)),
                             K * np.asarray(residuals)[None, :], lam=kernel.lam, **meta)


def _safe_divide(K, norms, what):
    zero = norms == 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} training features have zero {what}; scored 0")
    return np.where(zero[None, :], 0.0, K / np.where(zero, 1.0, norms)[None, :])


def relative_if_score(target, train, kernel: Kernel, **meta) -> AttributionResult:
    tp, p = _scalar_phi(target), _scalar_phi(train)
    K, HPhi = kernel_products(tp, p, kernel)
    scores = _safe_divide(K, np.linalg.norm(HPhi, axis=0), "H⁻¹φ norm")
    return AttributionResult("relative_if", _ids(target, len(tp)), _ids(train, len(p)),
                             scores, lam=kernel.lam, **meta)


def renormalized_if_score(target, train, kernel: Kernel, **meta) -> AttributionResult:
    tp, p = _scalar_phi(target), _scalar_phi(train)
    K, _ = kernel_products(tp, p, kernel)
    scores = _safe_divide(K, np.linalg.norm(p, axis=1), "norm")
    return AttributionResult("renormalized_if", _ids(target, len(tp)), _ids(train, len(p)),
                             scores, lam=kernel.lam, **meta)


def journey_trak_score(trajectory_phi, train, kernel: Kernel, target_ids=None, **meta) -> AttributionResult:
    """Mean over inference steps of the TRAK kernel form.

    ``trajectory_phi`` is (targets, steps, k): one scalarised gradient per
    visited latent along each target's sampling path.
    """
    if trajectory_phi is None:
        raise ConfigurationError("journey_trak needs the sampling trajectory of each target")
    tphi = np.asarray(trajectory_phi)
    p = _scalar_phi(train)
    nt, S, k = tphi.shape
    K, _ = kernel_products(tphi.reshape(nt * S, k), p, kernel)
    scores = K.reshape(nt, S, -1).mean(axis=1)
    ids = np.arange(nt) if target_ids is None else target_ids
    return AttributionResult("journey_trak", ids, _ids(train, len(p)), scores, lam=kernel.lam, **meta)


# ---------------------------------------------------------------------------
# kernel-free baselines


def _cosine(a, b):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    dots = a @ b.T
    denom = na[:, None] * nb[None, :]
    return np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)


def similarity(a, b, method: str) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if method == "dot":
        return a @ b.T
    if method == "cos":
        return _cosine(a, b)
    raise ParameterError(f"unknown similarity {method!r}")


def gradient_similarity(target, train, method="dot", **meta) -> AttributionResult:
    tp, p = _scalar_phi(target), _scalar_phi(train)
    return AttributionResult(f"grad_{method}", _ids(target, len(tp)), _ids(train, len(p)),
                             similarity(tp, p, method), **meta)


def tracincp(checkpoint_features, **meta) -> AttributionResult:
    """Mean over checkpoints of gradient dot products.

    ``checkpoint_features`` is a list of (target features, train features)
    pairs, one per checkpoint, each projected with its own matrix.
    """
    scores = np.mean([similarity(_scalar_phi(t), _scalar_phi(s), "dot")
                      for t, s in checkpoint_features], axis=0)
    t0, s0 = checkpoint_features[0]
    return AttributionResult("tracincp", _ids(t0, len(scores)), _ids(s0, scores.shape[1]), scores, **meta)


def gas(checkpoint_features, **meta) -> AttributionResult:
    """TracInCP with cosine similarity in place of the dot product."""
    scores = np.mean([similarity(_scalar_phi(t), _scalar_phi(s), "cos")
                      for t, s in checkpoint_features], axis=0)
    t0, s0 = checkpoint_features[0]
    return AttributionResult("gas", _ids(t0, len(scores)), _ids(s0, scores.shape[1]), scores, **meta)


def raw_similarity(target_x, train_x, method="dot", target_ids=None, train_ids=None, **meta):
    scores = similarity(target_x, train_x, method)
    return AttributionResult(f"raw_{method}",
                             np.arange(len(scores)) if target_ids is None else target_ids,
                             np.arange(scores.shape[1]) if train_ids is None else train_ids,
                             scores, **meta)


def candidate_filter(target_x, train_x, m: int) -> np.ndarray:
    """Indices of the m training samples most cosine-similar to the target."""
    train_x = np.atleast_2d(train_x)
    n = len(train_x)
    if not 1 <= m <= n:
        raise ParameterError(f"candidate count must lie in [1, {n}]")
    sims = similarity(target_x, train_x, "cos")[0]
    return np.sort(np.argsort(-sims, kind="stable")[:m])


def restrict_to_candidates(result: AttributionResult, candidates) -> AttributionResult:
    """Zero every score outside the per-target candidate sets (list of index arrays)."""
    keep = np.zeros(result.scores.shape, dtype=bool)
    for j, idx in enumerate(candidates):
        keep[j, idx] = True
    return AttributionResult(result.method, result.target_ids, result.train_ids,
                             np.where(keep, result.scores, 0.0), result.lam, result.timesteps,
                             result.fingerprint, result.flags & keep)


# ---------------------------------------------------------------------------
# dense oracles (validation only)


def dense_inverse(phi_rows, lam):
    phi_rows = np.asarray(phi_rows)
    return np.linalg.inv(phi_rows.T @ phi_rows + lam * np.eye(phi_rows.shape[1]))


def das_dense_oracle(target_g, train_g, train_r, lam):
    """Explicit-inverse DAS, one pair at a time."""
    n, rows, k = train_g.shape
    Hinv = dense_inverse(train_g.reshape(-1, k), lam)
    out = np.zeros((len(target_g), n))
    for i in range(n):
        gi = train_g[i]
        D = np.eye(rows) - gi @ Hinv @ gi.T
        Ri = train_r[i].reshape(rows, -1)
        for j in range(len(target_g)):
            v = target_g[j] @ Hinv @ gi.T @ np.linalg.inv(D) @ Ri
            out[j, i] = np.sum(v * v)
    return out


def newton_delta_by_removal(train_g, train_r, i, lam):
    """θ* - θ*_{\\i} by rebuilding and inverting the kernel without sample i."""
    train_g = np.asarray(train_g)
    k = train_g.shape[-1]
    H = lam * np.eye(k)
    for j in range(len(train_g)):
        if j != i:
            H += train_g[j].T @ train_g[j]
    return np.linalg.inv(H) @ train_g[i].T @ np.asarray(train_r)[i]


def true_loo_oracle(x, i: int, config: ddpm.TrainConfig, ids=None, max_n=60, max_p=500,
                    init: ddpm.NoisePredictor = None):
    """Retrain on the data with sample i removed.

    Starts from the base initialisation, or from ``init`` (typically the trained
    θ*) to follow the local optimum the Newton step describes.
    """
    x = np.asarray(x)
    n = len(x)
    if not 0 <= i < n:
        raise IndexError(f"sample index {i} out of range for {n} samples")
    p = ddpm.num_params((x.shape[1] + config.t_embed_dim, *config.hidden, x.shape[1]))
    if n > max_n or p > max_p:
        raise ParameterError(f"leave-one-out oracle is for tiny problems (n={n}, p={p})")
    ids = np.arange(n) if ids is None else np.asarray(ids)
    keep = np.arange(n) != i
    return ddpm.train(x[keep], config, ids=ids[keep], init=init).model
