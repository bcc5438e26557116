import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nfbeam.codebook import BeamTriplet, CodebookSpec, all_gains, build_codebook, oracle_optimal, triplet_to_global
from nfbeam.inference import (
    BudgetExceeded,
    PilotBudget,
    Prober,
    RefinementConfig,
    RefinementOutcome,
    RefineMode,
    SlotCache,
    account_overhead,
    candidate_pool,
    exhaustive_search,
    gate_confidence,
    hierarchical_plan,
    hierarchical_search,
    measurement_config,
    refine_joint_prob,
    refine_pilot_sweep,
    refine_slot,
    two_stage_counts,
    two_stage_search,
)
from nfbeam.predictor import PredictionBundle
from nfbeam.sysgeo import SystemConfig

from conftest import random_channel

NOISELESS = SystemConfig(antenna_rows=8, antenna_cols=8, noise_variance=0.0)


def random_bundle(rng, dims, L=1, conf=None):
    probs = [rng.dirichlet(np.ones(n) * 0.3, size=L) for n in dims]
    confs = [np.full((L, n), conf) if conf is not None else rng.random((L, n)) for n in dims]
    return PredictionBundle(np.zeros((L, 3)), *probs, *confs)


def one_hot_bundle(triplet, dims, conf):
    probs = []
    for t, n in zip(triplet, dims):
        p = np.full((1, n), 0.01)
        p[0, t - 1] = 1.0
        probs.append(p / p.sum())
    return PredictionBundle(np.zeros((1, 3)), *probs, *[np.full((1, n), conf) for n in dims])


class TestGate:
    @pytest.mark.parametrize("conf, accepted", [(0.95, True), (0.9, False), (0.5, False)])
    def test_strict_threshold(self, conf, accepted):
        b = one_hot_bundle((2, 2, 2), (6, 5, 3), conf)
        assert gate_confidence(b, 0) is accepted

    def test_single_low_dimension_triggers(self):
        b = one_hot_bundle((2, 2, 2), (6, 5, 3), 0.99)
        b.s_dist[0, 1] = 0.2
        assert not gate_confidence(b, 0)
        b.s_dist[0, 1] = 0.99
        b.s_dist[0, 0] = 0.2  # not at the argmax, so ignored
        assert gate_confidence(b, 0)

    def test_config_validation(self):
        for kw in ({"s_thre": 0.0}, {"s_thre": 1.0}, {"pool_top_k": 0}):
            with pytest.raises(ValueError):
                RefinementConfig(**kw)
        assert RefinementConfig().pool_size == 125
        assert RefinementConfig(mode="prob").mode is RefineMode.PROBABILITY_ONLY


class TestPool:
    def test_size_and_membership(self):
        b = random_bundle(np.random.default_rng(0), (20, 20, 10))
        pool = candidate_pool(b, 0)
        assert len(pool) == 125 == len(set(pool))
        tops = [set(np.argsort(-p[0])[:5] + 1) for p in b.probs]
        assert all(t.i in tops[0] and t.j in tops[1] and t.q in tops[2] for t in pool)
        assert pool[0] == BeamTriplet(*b.top1()[0])

    def test_pool_sizes_and_bounds(self):
        b = random_bundle(np.random.default_rng(1), (6, 5, 3))
        assert [len(candidate_pool(b, 0, k)) for k in (1, 2, 3)] == [1, 8, 27]
        with pytest.raises(ValueError):
            candidate_pool(b, 0, 4)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_joint_prob_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        b = random_bundle(rng, (20, 20, 10))
        pool = candidate_pool(b, 0)
        rng.shuffle(pool)
        got = refine_joint_prob(pool, b, 0)
        scores = [b.p_az[0, t.i - 1] * b.p_el[0, t.j - 1] * b.p_dist[0, t.q - 1] for t in pool]
        best = max(scores)
        expect = min((triplet_to_global(t, (20, 20, 10)), t) for t, s in zip(pool, scores) if s == best)[1]
        assert got == expect

    def test_joint_prob_tie_goes_to_smallest_index(self):
        dims = (6, 5, 3)
        b = PredictionBundle(np.zeros((1, 3)), *[np.full((1, n), 1.0 / n) for n in dims],
                             *[np.zeros((1, n)) for n in dims])
        pool = [BeamTriplet(3, 2, 1), BeamTriplet(1, 4, 2), BeamTriplet(2, 1, 1)]
        assert refine_joint_prob(pool, b, 0) == BeamTriplet(1, 4, 2)
        with pytest.raises(ValueError):
            refine_joint_prob([], b, 0)


class TestRefine:
    def test_accepted_slot_costs_nothing(self, small_cb):
        b = one_hot_bundle((2, 3, 1), small_cb.dims, 0.99)
        h = random_channel(np.random.default_rng(0), 64)
        out = refine_slot(b, 0, h, small_cb, NOISELESS, RefinementConfig(pool_top_k=3), seed=0)
        assert out == RefinementOutcome(BeamTriplet(2, 3, 1), False, 0, None, RefineMode.PILOT_SWEEP)

    def test_triggered_sweep_finds_pool_best(self, small_cb):
        rng = np.random.default_rng(2)
        for _ in range(10):
            b = random_bundle(rng, small_cb.dims, conf=0.1)
            h = random_channel(rng, 64)
            out = refine_slot(b, 0, h, small_cb, NOISELESS, RefinementConfig(pool_top_k=3), seed=0)
            assert out.triggered and out.pilots_used == 27
            g = all_gains(small_cb, h)
            best = max(out.pool, key=lambda t: (g[triplet_to_global(t, small_cb) - 1],
                                                -triplet_to_global(t, small_cb)))
            assert out.triplet == best

    def test_probability_only_is_free(self, small_cb):
        b = random_bundle(np.random.default_rng(3), small_cb.dims, conf=0.1)
        out = refine_slot(b, 0, np.zeros(64, complex), small_cb, NOISELESS,
                          RefinementConfig(pool_top_k=3, mode="prob"), seed=0)
        assert out.triggered and out.pilots_used == 0
        assert out.triplet == refine_joint_prob(out.pool, b, 0)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_noiseless_sweep_never_loses(self, small_cb, seed):
        rng = np.random.default_rng(seed)
        b = random_bundle(rng, small_cb.dims, L=4)
        H = [random_channel(rng, 64) for _ in range(4)]
        cfg = RefinementConfig(pool_top_k=3)
        g_none = g_sweep = 0.0
        for t, h in enumerate(H):
            g = all_gains(small_cb, h)
            top1 = BeamTriplet(*b.top1()[t])
            chosen = refine_slot(b, t, h, small_cb, NOISELESS, cfg, seed=0).triplet
            g_none += g[triplet_to_global(top1, small_cb) - 1]
            g_sweep += g[triplet_to_global(chosen, small_cb) - 1]
        assert g_sweep >= g_none

    def test_outage_returns_flagged_fallback(self, small_cb):
        pool = [BeamTriplet(1, 1, 1), BeamTriplet(2, 2, 2)]
        t, used, flagged = refine_pilot_sweep(pool, np.zeros(64, complex), small_cb, NOISELESS, 0,
                                              fallback=BeamTriplet(2, 2, 2))
        assert (t, used, flagged) == (BeamTriplet(2, 2, 2), 2, True)

    def test_noisy_sweep_is_seeded(self, small_cb, small_cfg):
        b = random_bundle(np.random.default_rng(4), small_cb.dims, conf=0.1)
        h = random_channel(np.random.default_rng(5), 64) * 1e-2
        cfg = RefinementConfig(pool_top_k=3)
        a = [refine_slot(b, 0, h, small_cb, small_cfg, cfg, seed=7, index=i).triplet for i in range(5)]
        assert a == [refine_slot(b, 0, h, small_cb, small_cfg, cfg, seed=7, index=i).triplet for i in range(5)]

    def test_cache_matches_direct(self, small_cb, small_cfg):
        h = random_channel(np.random.default_rng(6), 64)
        cache = SlotCache.build(small_cb, h)
        rows = [5, 1, 77]
        for cfg in (NOISELESS, small_cfg):
            a = Prober(small_cb, h, cfg, 3).probe(rows)
            b = Prober(small_cb, h, cfg, 3, cache=cache).probe(rows)
            np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_measurement_config(self, small_cfg):
        assert measurement_config(small_cfg, None) is small_cfg
        assert measurement_config(small_cfg, float("inf")).noise_variance == 0.0
        assert measurement_config(small_cfg, 1e7).noise_variance == pytest.approx(1e-7)
        with pytest.raises(ValueError):
            measurement_config(small_cfg, 0.0)


class TestOverhead:
    def outcomes(self, n_trig, n):
        t = BeamTriplet(1, 1, 1)
        return ([RefinementOutcome(t, True, 125, None, RefineMode.PILOT_SWEEP)] * n_trig
                + [RefinementOutcome(t, False, 0, None, RefineMode.PILOT_SWEEP)] * (n - n_trig))

    def test_forced_trigger_rate(self):
        pilots, rate = account_overhead(self.outcomes(716, 1000))
        assert rate == pytest.approx(0.716)
        assert pilots == pytest.approx(89.5)

    @given(st.integers(0, 200), st.integers(1, 200))
    def test_sum_identity(self, k, extra):
        outs = self.outcomes(k, k + extra)
        assert sum(o.pilots_used for o in outs) == 125 * sum(o.triggered for o in outs)
        assert all(o.pilots_used == 0 for o in outs if not o.triggered)

    def test_empty(self):
        with pytest.raises(ValueError):
            account_overhead([])


class TestBudget:
    def test_counter(self):
        b = PilotBudget(10)
        b.consume(4)
        assert b.remaining == 6
        with pytest.raises(BudgetExceeded):
            b.consume(7)
        with pytest.raises(ValueError):
            PilotBudget(0)
        assert PilotBudget().remaining == float("inf")

    def test_prober_truncates(self, small_cb):
        p = Prober(small_cb, random_channel(np.random.default_rng(0), 64), NOISELESS, 0, budget=PilotBudget(3))
        assert p.probe(range(10)).size == 3 and p.exhausted
        assert p.probe([4]).size == 0


class TestBaselines:
    def test_exhaustive_matches_oracle(self, backend, small_cb):
        rng = np.random.default_rng(8)
        for _ in range(30):
            h = random_channel(rng, 64)
            res = exhaustive_search(h, small_cb, NOISELESS, 0)
            assert res.triplet == oracle_optimal(small_cb, h).triplet and res.pilots_used == small_cb.size

    def test_hierarchical_plan_default_grid(self, cb16):
        assert hierarchical_plan(cb16, 90) == (3, 68)
        assert hierarchical_plan(cb16, 4000)[0] == 1
        assert hierarchical_plan(cb16, 419) == (1, 419)
        with pytest.raises(ValueError):
            hierarchical_plan(cb16, 3)

    @pytest.mark.parametrize("budget, counts", [(90, (10, 8)), (410, (20, 20)), (30, (5, 4))])
    def test_two_stage_counts(self, budget, counts):
        assert two_stage_counts(20, 20, budget - 10) == counts

    @given(st.integers(0, 10_000), st.integers(6, 200))
    @settings(max_examples=50, deadline=None)
    def test_budget_caps(self, small_cb, seed, budget):
        h = random_channel(np.random.default_rng(seed), 64)
        for search in (hierarchical_search, two_stage_search):
            try:
                res = search(h, small_cb, budget, NOISELESS, 0)
            except ValueError:
                continue
            assert res.pilots_used <= budget

    def test_full_budget_hierarchical_is_exhaustive_on_angles(self, small_cb):
        h = random_channel(np.random.default_rng(9), 64)
        res = hierarchical_search(h, small_cb, small_cb.size, NOISELESS, 0)
        stride, _ = hierarchical_plan(small_cb, small_cb.size)
        assert stride == 1 and 1 <= res.triplet.q <= small_cb.n_r

    def test_outage(self, small_cb):
        z = np.zeros(64, complex)
        assert exhaustive_search(z, small_cb, NOISELESS, 0).outage
        assert hierarchical_search(z, small_cb, 50, NOISELESS, 0).outage
        assert two_stage_search(z, small_cb, 50, NOISELESS, 0).outage

    def test_two_stage_small_budget_rejected(self, small_cb):
        with pytest.raises(ValueError):
            two_stage_search(random_channel(np.random.default_rng(0), 64), small_cb, 3, NOISELESS, 0)


def test_tiny_grid_pool_exhausts_codebook():
    cfg = SystemConfig(antenna_rows=2, antenna_cols=2, noise_variance=0.0)
    cb = build_codebook(cfg, spec=CodebookSpec(3, 3, 3, r_min=1.0, r_max=10.0))
    rng = np.random.default_rng(0)
    b = random_bundle(rng, cb.dims, conf=0.0)
    h = random_channel(rng, 4)
    out = refine_slot(b, 0, h, cb, cfg, RefinementConfig(pool_top_k=3), seed=0)
    assert set(out.pool) == {BeamTriplet(*t) for t in itertools.product(range(1, 4), repeat=3)}
    assert out.triplet == oracle_optimal(cb, h).triplet
