"""Accuracy, rate, normalized gain and trajectory error.

Per-episode quantities are horizon means; batch quantities are unweighted
means over episodes.
"""

from __future__ import annotations

import numpy as np

from nfbeam import kernels
from nfbeam.codebook import PolarCodebook, rate_from_gain
from nfbeam.sysgeo import SystemConfig


def _topk_sets(p: np.ndarray, k: int, rng: np.random.Generator | None) -> np.ndarray:
    """Indices (0-based) of the ``k`` largest entries along the last axis.

    Ties break toward lower indices, or uniformly at random when ``rng`` is given.
    """
    if rng is not None:
        jitter = rng.random(p.shape)
        order = np.lexsort((jitter, -p), axis=-1)
    else:
        order = np.argsort(-p, axis=-1, kind="stable")
    return order[..., :k]


def topk_decomposed(probs, gt: np.ndarray, k: int, tie_seed: int | None = None) -> tuple[float, float, float]:
    """Per-dimension Top-K accuracy.

    ``probs`` is ``(p_az, p_el, p_dist)`` with shapes ``(E, L_p, n_d)`` and
    ``gt`` is ``(E, L_p, 3)`` with 1-based indices.
    """
    rng = None if tie_seed is None else np.random.default_rng(tie_seed)
    out = []
    for d, p in enumerate(probs):
        p = np.asarray(p)
        if k > p.shape[-1]:
            raise ValueError(f"K={k} exceeds dimension size {p.shape[-1]}")
        top = _topk_sets(p, k, rng)
        hit = np.any(top == (np.asarray(gt)[..., d] - 1)[..., None], axis=-1)
        out.append(float(hit.reshape(hit.shape[0], -1).mean(-1).mean()) if hit.ndim > 1 else float(hit.mean()))
    return tuple(out)


def joint_distribution(p_az: np.ndarray, p_el: np.ndarray, p_dist: np.ndarray) -> np.ndarray:
    """Full product ``p_i p_j p_q`` flattened in global-index order (last axis)."""
    j = p_az[..., :, None, None] * p_el[..., None, :, None] * p_dist[..., None, None, :]
    return j.reshape(*p_az.shape[:-1], -1)


def topk_joint(probs, gt: np.ndarray, k: int) -> float:
    """Top-K accuracy over the exact ranking of every codebook entry."""
    p_az, p_el, p_dist = (np.asarray(p) for p in probs)
    dims = (p_az.shape[-1], p_el.shape[-1], p_dist.shape[-1])
    if k > dims[0] * dims[1] * dims[2]:
        raise ValueError("K exceeds the codebook size")
    joint = joint_distribution(p_az, p_el, p_dist)
    gt = np.asarray(gt)
    g = ((gt[..., 0] - 1) * dims[1] + (gt[..., 1] - 1)) * dims[2] + (gt[..., 2] - 1)
    if k == 1:
        hit = np.argmax(joint, axis=-1) == g
    else:
        top = np.argsort(-joint, axis=-1, kind="stable")[..., :k]
        hit = np.any(top == g[..., None], axis=-1)
    return float(hit.reshape(hit.shape[0], -1).mean(-1).mean()) if hit.ndim > 1 else float(hit.mean())


def chosen_accuracy(chosen: np.ndarray, gt: np.ndarray) -> float:
    """Fraction of slots where the chosen triplet equals the GT triplet (episode mean first)."""
    hit = np.all(np.asarray(chosen) == np.asarray(gt), axis=-1)
    return float(hit.reshape(hit.shape[0], -1).mean(-1).mean()) if hit.ndim > 1 else float(hit.mean())


def chosen_gains(chosen: np.ndarray, channels: np.ndarray, cb: PolarCodebook) -> np.ndarray:
    """``|w(chosen)^H h|^2`` for ``chosen`` ``(L, 3)`` and channels ``(L, M)``."""
    chosen = np.asarray(chosen)
    rows = ((chosen[:, 0] - 1) * cb.n_phi + (chosen[:, 1] - 1)) * cb.n_r + (chosen[:, 2] - 1)
    # same kernel as the oracle, so ratios against it never exceed 1 by rounding
    return np.array([kernels.subset_gains(cb.codewords, rows[l:l + 1], channels[l])[0] for l in range(len(rows))])


def avg_rate(gains: np.ndarray, cfg: SystemConfig) -> float:
    """Mean achievable rate over the horizon from per-slot gains."""
    return float(np.mean(rate_from_gain(np.asarray(gains), cfg)))


def avg_norm_gain(gains: np.ndarray, oracle_gains: np.ndarray) -> tuple[float, int]:
    """Mean of ``G(chosen) / G(oracle)`` over non-outage slots; returns ``(value, n_excluded)``.

    NaN when every slot is an outage.
    """
    g = np.asarray(gains, dtype=np.float64)
    o = np.asarray(oracle_gains, dtype=np.float64)
    ok = o > 0
    if not ok.any():
        return float("nan"), int(ok.size)
    return float(np.mean(g[ok] / o[ok])), int((~ok).sum())


def traj_mae(u_hat: np.ndarray, u_true: np.ndarray) -> float:
    """Mean Euclidean error over slots (and episodes)."""
    u_hat, u_true = np.asarray(u_hat), np.asarray(u_true)
    if u_hat.shape != u_true.shape:
        raise ValueError("shape mismatch")
    return float(np.linalg.norm(u_hat - u_true, axis=-1).mean())
