"""Confidence-gated refinement and budget-capped beam-training baselines.

Every probe of a codeword counts one pilot; a :class:`PilotBudget` counter
enforces caps so reported overheads are measured rather than assumed.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from nfbeam import kernels
from nfbeam.codebook import BeamTriplet, PolarCodebook, global_to_triplet, triplet_to_global
from nfbeam.predictor import PredictionBundle
from nfbeam.rng import counter_rng
from nfbeam.sysgeo import SystemConfig

log = logging.getLogger(__name__)


class RefineMode(str, enum.Enum):
    NONE = "none"
    PROBABILITY_ONLY = "prob"
    PILOT_SWEEP = "sweep"


@dataclass(frozen=True)
class RefinementConfig:
    s_thre: float = 0.9
    pool_top_k: int = 5
    mode: RefineMode = RefineMode.PILOT_SWEEP
    sweep_snr: float | None = None  # P_r / sigma^2 for measurements; None uses the system config

    def __post_init__(self):
        if not 0.0 < self.s_thre < 1.0:
            raise ValueError("s_thre must lie in (0, 1)")
        if self.pool_top_k < 1:
            raise ValueError("pool_top_k must be >= 1")
        object.__setattr__(self, "mode", RefineMode(self.mode))

    @property
    def pool_size(self) -> int:
        return self.pool_top_k**3


@dataclass(frozen=True)
class RefinementOutcome:
    triplet: BeamTriplet
    triggered: bool
    pilots_used: int
    pool: tuple[BeamTriplet, ...] | None
    mode: RefineMode
    flagged: bool = False  # outage fallback


class BudgetExceeded(RuntimeError):
    pass


class PilotBudget:
    """Running pilot counter with an optional hard cap."""

    def __init__(self, budget: int | None = None):
        if budget is not None and budget < 1:
            raise ValueError("budget must be positive")
        self.budget = budget
        self.consumed = 0

    @property
    def remaining(self) -> int | float:
        return math.inf if self.budget is None else self.budget - self.consumed

    def consume(self, n: int) -> None:
        if n < 0:
            raise ValueError("cannot consume a negative number of pilots")
        if self.budget is not None and self.consumed + n > self.budget:
            raise BudgetExceeded(f"{self.consumed} + {n} pilots exceeds budget {self.budget}")
        self.consumed += n


def measurement_config(cfg: SystemConfig, sweep_snr: float | None) -> SystemConfig:
    if sweep_snr is None:
        return cfg
    if sweep_snr <= 0:
        raise ValueError("sweep_snr must be positive")
    return replace(cfg, noise_variance=cfg.tx_power / sweep_snr)


class Prober:
    """Measures ``|sqrt(P) w^H h + z|^2`` for codebook rows, charging a budget.

    With zero noise the gains come straight from the kernel sweep so they are
    bit-identical to the noiseless oracle.
    """

    def __init__(self, cb: PolarCodebook, h: np.ndarray, cfg: SystemConfig, seed: int, index: int = 0,
                 stream: str = "sweep-noise", budget: PilotBudget | None = None,
                 cache: "SlotCache | None" = None):
        self.cb = cb
        self.h = np.ascontiguousarray(h, dtype=np.complex128)
        self.cfg = cfg
        self.cache = cache
        self.budget = budget or PilotBudget()
        self._rng = counter_rng(seed, stream, index) if cfg.noise_variance > 0 else None
        self.rows: list[int] = []
        self.values: list[float] = []

    def probe(self, rows: Sequence[int]) -> np.ndarray:
        """Measure 0-based rows; truncates to the remaining budget."""
        rows = np.asarray(rows, dtype=np.int64)
        room = self.budget.remaining
        if rows.size > room:
            rows = rows[: int(room)]
        if rows.size == 0:
            return np.zeros(0)
        self.budget.consume(int(rows.size))
        if self._rng is None:
            if self.cache is not None:
                vals = self.cfg.tx_power * self.cache.gains[rows]
            else:
                vals = self.cfg.tx_power * kernels.subset_gains(self.cb.codewords, rows, self.h)
        else:
            if self.cache is not None:
                amp = self.cache.amplitudes[rows]
            else:
                amp = np.conj(self.cb.codewords[rows]) @ self.h
            z = self._rng.normal(size=(2, rows.size)) * math.sqrt(self.cfg.noise_variance / 2.0)
            vals = np.abs(math.sqrt(self.cfg.tx_power) * amp + z[0] + 1j * z[1]) ** 2
        self.rows.extend(int(r) for r in rows)
        self.values.extend(float(v) for v in vals)
        return vals

    @property
    def exhausted(self) -> bool:
        return self.budget.remaining <= 0

    def best(self, rows: Sequence[int] | None = None) -> int:
        """Row with the largest measured value (ties: smallest row)."""
        if not self.rows:
            raise RuntimeError("nothing measured")
        r = np.asarray(self.rows)
        v = np.asarray(self.values)
        if rows is not None:
            keep = np.isin(r, np.asarray(rows))
            if keep.any():
                r, v = r[keep], v[keep]
        order = np.lexsort((r, -v))
        return int(r[order[0]])


@dataclass(frozen=True)
class SlotCache:
    """Precomputed ``w_k^H h`` and noiseless kernel gains for every codeword of one slot."""

    amplitudes: np.ndarray
    gains: np.ndarray

    @classmethod
    def build(cls, cb: PolarCodebook, h: np.ndarray, table_conj: np.ndarray | None = None) -> "SlotCache":
        tc = np.conj(cb.codewords) if table_conj is None else table_conj
        return cls(tc @ h, kernels.gain_sweep(cb.codewords, h))


@dataclass(frozen=True)
class SearchResult:
    triplet: BeamTriplet
    pilots_used: int
    outage: bool = False


# --------------------------------------------------------------------------
# Gating and pools


def top1_triplet(bundle: PredictionBundle, slot: int) -> BeamTriplet:
    return BeamTriplet(*(int(np.argmax(p[slot])) + 1 for p in bundle.probs))


def gathered_confidences(bundle: PredictionBundle, slot: int) -> tuple[float, float, float]:
    return tuple(float(s[slot][int(np.argmax(p[slot]))]) for s, p in zip(bundle.confs, bundle.probs))


def gate_confidence(bundle: PredictionBundle, slot: int, cfg: RefinementConfig = RefinementConfig()) -> bool:
    """Accept the Top-1 combination iff every gathered confidence exceeds ``s_thre``."""
    return all(c > cfg.s_thre for c in gathered_confidences(bundle, slot))


def _topk(p: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-p, kind="stable")[:k]


def candidate_pool(bundle: PredictionBundle, slot: int, k: int = 5) -> list[BeamTriplet]:
    """Cartesian product of per-dimension Top-k, by descending joint probability then global index."""
    pa, pe, pd = (p[slot] for p in bundle.probs)
    dims = (pa.size, pe.size, pd.size)
    if k > min(dims):
        raise ValueError(f"k={k} exceeds the smallest dimension {min(dims)}")
    ia, ie, idd = _topk(pa, k), _topk(pe, k), _topk(pd, k)
    A, E, D = np.meshgrid(ia, ie, idd, indexing="ij")
    A, E, D = A.ravel(), E.ravel(), D.ravel()
    joint = pa[A] * pe[E] * pd[D]
    glob = (A * dims[1] + E) * dims[2] + D
    order = np.lexsort((glob, -joint))
    return [BeamTriplet(int(A[o]) + 1, int(E[o]) + 1, int(D[o]) + 1) for o in order]


def refine_joint_prob(pool: Sequence[BeamTriplet], bundle: PredictionBundle, slot: int) -> BeamTriplet:
    """Pool member with maximal ``p_i p_j p_q``; ties go to the smallest global index."""
    if not pool:
        raise ValueError("empty pool")
    pa, pe, pd = (p[slot] for p in bundle.probs)
    dims = (pa.size, pe.size, pd.size)
    best, best_key = None, None
    for t in pool:
        key = (-(pa[t.i - 1] * pe[t.j - 1] * pd[t.q - 1]), triplet_to_global(t, dims))
        if best_key is None or key < best_key:
            best, best_key = t, key
    return best


def refine_pilot_sweep(pool: Sequence[BeamTriplet], h: np.ndarray, cb: PolarCodebook, cfg: SystemConfig,
                       seed: int, index: int = 0, fallback: BeamTriplet | None = None,
                       stream: str = "refine-noise", cache: SlotCache | None = None) -> tuple[BeamTriplet, int, bool]:
    """Sweep every pool member once; returns ``(triplet, pilots_used, flagged)``.

    An outage channel still costs the sweep but returns ``fallback`` (the
    joint-probability choice) or the first pool member, flagged.
    """
    if not pool:
        raise ValueError("empty pool")
    rows = np.array([triplet_to_global(t, cb) - 1 for t in pool], dtype=np.int64)
    prober = Prober(cb, h, cfg, seed, index, stream, cache=cache)
    prober.probe(rows)
    if not np.any(h):
        log.debug("outage during refinement sweep; using fallback")
        return (fallback or pool[0]), len(pool), True
    return global_to_triplet(prober.best() + 1, cb), len(pool), False


def refine_slot(bundle: PredictionBundle, slot: int, h: np.ndarray, cb: PolarCodebook, sys_cfg: SystemConfig,
                cfg: RefinementConfig, seed: int, index: int = 0, cache: SlotCache | None = None) -> RefinementOutcome:
    """Gate, then refine if triggered according to ``cfg.mode``."""
    top1 = top1_triplet(bundle, slot)
    if cfg.mode == RefineMode.NONE or gate_confidence(bundle, slot, cfg):
        return RefinementOutcome(top1, False, 0, None, cfg.mode)
    pool = candidate_pool(bundle, slot, cfg.pool_top_k)
    jp = refine_joint_prob(pool, bundle, slot)
    if cfg.mode == RefineMode.PROBABILITY_ONLY:
        return RefinementOutcome(jp, True, 0, tuple(pool), cfg.mode)
    t, used, flagged = refine_pilot_sweep(pool, h, cb, measurement_config(sys_cfg, cfg.sweep_snr), seed, index,
                                          fallback=jp, cache=cache)
    return RefinementOutcome(t, True, used, tuple(pool), cfg.mode, flagged)


def account_overhead(outcomes: Sequence[RefinementOutcome]) -> tuple[float, float]:
    """``(average pilots per slot, trigger rate)``."""
    if not outcomes:
        raise ValueError("no outcomes")
    n = len(outcomes)
    return sum(o.pilots_used for o in outcomes) / n, sum(o.triggered for o in outcomes) / n


# --------------------------------------------------------------------------
# Baselines


def _rows(cb: PolarCodebook, ii, jj, qq) -> np.ndarray:
    ii, jj, qq = np.broadcast_arrays(np.asarray(ii), np.asarray(jj), np.asarray(qq))
    return ((ii * cb.n_phi + jj) * cb.n_r + qq).ravel().astype(np.int64)


def exhaustive_search(h: np.ndarray, cb: PolarCodebook, cfg: SystemConfig, seed: int, index: int = 0,
                      stream: str = "exhaustive-noise", cache: SlotCache | None = None) -> SearchResult:
    prober = Prober(cb, h, cfg, seed, index, stream, cache=cache)
    prober.probe(np.arange(cb.size))
    if not np.any(h):
        return SearchResult(BeamTriplet(1, 1, 1), cb.size, True)
    if cfg.noise_variance == 0.0:
        k = kernels.first_argmax(np.asarray(prober.values))
    else:
        k = prober.best()
    return SearchResult(global_to_triplet(k + 1, cb), cb.size, False)


def _coarse_count(n: int, s: int) -> int:
    return len(range(0, n, s))


def hierarchical_plan(cb: PolarCodebook, budget: int) -> tuple[int, int]:
    """Smallest angular stride whose three stages fit in ``budget``; returns ``(stride, planned_cost)``.

    The coarsest stride keeps at least two probes per angular axis; if even
    that does not fit the later stages stop early on the counter.
    """
    nt, nph, nr = cb.dims
    s_max = max(1, math.ceil(max(nt, nph) / 2))
    min_coarse = _coarse_count(nt, s_max) * _coarse_count(nph, s_max)
    if budget < min_coarse:
        raise ValueError(f"budget {budget} is below one coarse sweep ({min_coarse} pilots)")
    for s in range(1, s_max + 1):
        cost = _coarse_count(nt, s) * _coarse_count(nph, s) + 9 + nr
        if cost <= budget:
            return s, cost
    return s_max, min_coarse + 9 + nr


def hierarchical_search(h: np.ndarray, cb: PolarCodebook, budget: int, cfg: SystemConfig, seed: int,
                        index: int = 0, stream: str = "hier-noise", cache: SlotCache | None = None) -> SearchResult:
    """Coarse angle grid at the farthest ring, 3x3 angular refinement, then a distance sweep."""
    nt, nph, nr = cb.dims
    stride, _ = hierarchical_plan(cb, budget)
    prober = Prober(cb, h, cfg, seed, index, stream, PilotBudget(budget), cache)
    far = nr - 1
    ci, cj = np.meshgrid(np.arange(0, nt, stride), np.arange(0, nph, stride), indexing="ij")
    prober.probe(_rows(cb, ci, cj, far))
    # stage 2
    i0, j0, _ = global_to_triplet(prober.best() + 1, cb)
    ni = np.arange(max(i0 - 2, 0), min(i0 + 1, nt))
    nj = np.arange(max(j0 - 2, 0), min(j0 + 1, nph))
    gi, gj = np.meshgrid(ni, nj, indexing="ij")
    stage2 = _rows(cb, gi, gj, far)
    prober.probe(stage2)
    # stage 3
    i1, j1, _ = global_to_triplet(prober.best(stage2) + 1, cb)
    prober.probe(_rows(cb, i1 - 1, j1 - 1, np.arange(nr)))
    used = prober.budget.consumed
    if not np.any(h):
        return SearchResult(BeamTriplet(1, 1, 1), used, True)
    return SearchResult(global_to_triplet(prober.best() + 1, cb), used, False)


def two_stage_counts(n_theta: int, n_phi: int, max_probes: int) -> tuple[int, int]:
    """Azimuth/elevation probe counts with the largest product not above ``max_probes``.

    Ties prefer the more balanced split, then more azimuth probes.
    """
    best = None
    for na in range(1, n_theta + 1):
        ne = min(n_phi, max_probes // na)
        if ne < 1:
            continue
        key = (na * ne, -abs(na - ne), na)
        if best is None or key > best[0]:
            best = (key, (na, ne))
    if best is None:
        raise ValueError("no angular probe fits the budget")
    return best[1]


def _spread(n: int, count: int) -> np.ndarray:
    return np.unique(np.round(np.linspace(0, n - 1, count)).astype(np.int64))


def two_stage_search(h: np.ndarray, cb: PolarCodebook, budget: int, cfg: SystemConfig, seed: int,
                     index: int = 0, stream: str = "two-stage-noise", cache: SlotCache | None = None) -> SearchResult:
    """Uniform angular sweep at the farthest ring, then every distance at the winning angle."""
    nt, nph, nr = cb.dims
    if budget < nr + 1:
        raise ValueError(f"budget {budget} must be at least N_r + 1 = {nr + 1}")
    na, ne = two_stage_counts(nt, nph, budget - nr)
    prober = Prober(cb, h, cfg, seed, index, stream, PilotBudget(budget), cache)
    ai, ej = np.meshgrid(_spread(nt, na), _spread(nph, ne), indexing="ij")
    prober.probe(_rows(cb, ai, ej, nr - 1))
    i0, j0, _ = global_to_triplet(prober.best() + 1, cb)
    prober.probe(_rows(cb, i0 - 1, j0 - 1, np.arange(nr)))
    used = prober.budget.consumed
    if not np.any(h):
        return SearchResult(BeamTriplet(1, 1, 1), used, True)
    return SearchResult(global_to_triplet(prober.best() + 1, cb), used, False)
