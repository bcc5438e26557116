"""Acceptance criteria, each at its stated tolerance.

Every test records one ``C<n> PASS|FAIL`` line that is printed in the
terminal summary. Criterion 9 trains two models on the default dataset and
takes a few minutes on one CPU.
"""

import itertools
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from nfbeam import cli
from nfbeam.channel import PathComponent, PathKind, synthesize_channel, trace_paths
from nfbeam.codebook import (
    BeamTriplet,
    all_gains,
    build_codebook,
    global_to_triplet,
    oracle_optimal,
    triplet_to_global,
)
from nfbeam.dataset import DatasetConfig, make_dataset
from nfbeam.experiment import ExperimentConfig, evaluate, generate, predict_split, run_predictor_method, train
from nfbeam.inference import (
    RefinementConfig,
    RefinementOutcome,
    RefineMode,
    SlotCache,
    account_overhead,
    candidate_pool,
    exhaustive_search,
    hierarchical_search,
    refine_joint_prob,
    refine_slot,
    two_stage_search,
)
from nfbeam.metrics import avg_norm_gain, chosen_gains
from nfbeam.predictor import BeamPredictor, PredictionBundle
from nfbeam.sysgeo import SystemConfig, antenna_positions, random_scene
from nfbeam.training import beam_kl_loss, confidence_target, model_config_for, soft_target

from conftest import ACCEPTANCE_LINES
from helpers import gradient_check, loss_fn, tiny_batch, tiny_model


def verdict(tag: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"C{tag} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def default_cfg():
    return SystemConfig()


@pytest.fixture(scope="module")
def default_cb(default_cfg):
    return build_codebook(default_cfg)


def scene_snapshots(cfg, n, seed):
    """Multipath snapshots at random UAV positions in random canyon scenes."""
    geom = antenna_positions(cfg)
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        scene = random_scene(len(out) % 20, seed)
        u = rng.uniform(scene.bounds.lo, scene.bounds.hi)
        paths = trace_paths(scene, u, geom, cfg)
        if paths:
            out.append(synthesize_channel(paths, cfg).h)
    return out


def los_snapshot(point, geom, cfg):
    point = np.asarray(point, dtype=np.float64)
    gain = cfg.wavelength / (4 * math.pi * np.linalg.norm(point))
    path = PathComponent(PathKind.LOS, np.linalg.norm(point - geom.positions, axis=1), gain, point)
    return synthesize_channel([path], cfg).h


def polar_point(az, el, r):
    return r * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])


# --------------------------------------------------------------------------


def test_c1_index_bijection():
    t0 = time.perf_counter()
    dims = (20, 20, 10)
    fails = 0
    for k, t in enumerate(itertools.product(range(1, 21), range(1, 21), range(1, 11)), start=1):
        fails += triplet_to_global(t, dims) != k or global_to_triplet(k, dims) != t
    exact = triplet_to_global((2, 1, 1), dims) == 201 and triplet_to_global((20, 20, 10), dims) == 4000
    dt = time.perf_counter() - t0
    verdict("1", fails == 0 and exact and dt < 1.0, f"{fails} round-trip failures, examples exact={exact}, {dt:.3f} s")


def test_c2_oracle_on_sample_points():
    t0 = time.perf_counter()
    cfg = SystemConfig(antenna_rows=16, antenna_cols=16)
    cb = build_codebook(cfg)
    geom = antenna_positions(cfg)
    rng = np.random.default_rng(2)
    hits, ratios = 0, []
    for _ in range(200):
        k = int(rng.integers(1, cb.size + 1))
        h = los_snapshot(cb.sample_points[k - 1], geom, cfg)
        res = oracle_optimal(cb, h)
        hits += triplet_to_global(res.triplet, cb) == k
        ratios.append(res.gain / all_gains(cb, h).max())
    dt = time.perf_counter() - t0
    ok = hits >= 198 and all(r == 1.0 for r in ratios) and dt < 60
    verdict("2", ok, f"{hits}/200 generating triplets, normalized gain min {float(min(ratios))!r}, {dt:.1f} s")


def test_c3_noiseless_exhaustive(default_cfg, default_cb):
    cfg = replace(default_cfg, noise_variance=0.0)
    snaps = scene_snapshots(default_cfg, 500, seed=3)
    match = sum(exhaustive_search(h, default_cb, cfg, 0, i).triplet == oracle_optimal(default_cb, h).triplet
                for i, h in enumerate(snaps))
    verdict("3", match == 500, f"{match}/500 exhaustive(sigma2=0) == oracle")


def test_c4_gradient_fidelity():
    torch.manual_seed(0)
    model = tiny_model()
    cfg = model.cfg
    assert (cfg.d_model, cfg.L_h, cfg.L_p, cfg.n_theta, cfg.n_phi, cfg.n_r) == (8, 3, 3, 4, 4, 2)
    errs = gradient_check(model, loss_fn(model, tiny_batch(cfg)), step=1e-5)
    worst = max(errs, key=errs.get)
    verdict("4", errs[worst] <= 1e-4, f"{len(errs)} parameter groups, max rel err {errs[worst]:.2e} ({worst})")


def test_c5_loss_identities(small_cb):
    rng = np.random.default_rng(5)
    p = [torch.softmax(torch.randn(4, n, dtype=torch.float64), -1) for n in (20, 20, 10)]
    kl_self = abs(float(beam_kl_loss(p, p)))
    kl_err = 0.0
    for n in (2, 10, 20, 4000):
        onehot = torch.zeros(1, n, dtype=torch.float64)
        onehot[0, n // 3] = 1.0
        kl = float(beam_kl_loss([torch.full((1, n), 1.0 / n, dtype=torch.float64)], [onehot]))
        kl_err = max(kl_err, abs(kl - math.log(n)))
    soft = soft_target(1, 20)[:3]
    soft = tuple(float(x) for x in soft)
    soft_ok = soft == (0.75, 0.125, 0.125)
    conf_ok = True
    for _ in range(50):
        h = (rng.normal(size=64) + 1j * rng.normal(size=64)) * 1e-4
        gt = oracle_optimal(small_cb, h).triplet
        conf_ok &= confidence_target(gt, gt, small_cb, h) == (1.0, 1.0, 1.0)
    ok = kl_self <= 1e-12 and kl_err <= 1e-10 and soft_ok and conf_ok
    verdict("5", ok, f"KL(p,p)={kl_self:.1e}, |KL-log n|<={kl_err:.1e}, soft={soft}, conf=1 {conf_ok}")


@pytest.fixture(scope="module")
def eval_episodes(default_cfg, default_cb):
    """Test-split episodes on the default array with an untrained predictor's outputs."""
    dcfg = DatasetConfig(n_train_scenes=1, n_val_scenes=1, n_test_scenes=2, train_episodes_per_scene=1,
                         eval_episodes_per_scene=25, seed=7)
    ds = make_dataset(dcfg, codebook=default_cb)
    model = BeamPredictor(model_config_for(ds))
    episodes, bundle = predict_split(model, ds)
    geom = antenna_positions(default_cfg)
    channels = [ds.future_channels(int(e), geom) for e in episodes]
    caches = [[SlotCache.build(default_cb, h) for h in ch] for ch in channels]
    return ds, episodes, bundle, channels, caches


def random_bundle(rng, L, conf_lo=0.0):
    probs = [rng.dirichlet(np.ones(n) * 0.3, size=L) for n in (20, 20, 10)]
    confs = [rng.uniform(conf_lo, 1.0, size=(L, n)) for n in (20, 20, 10)]
    return PredictionBundle(np.zeros((L, 3)), *probs, *confs)


def test_c6_refinement_accounting(default_cfg, default_cb, eval_episodes):
    _, episodes, _, channels, caches = eval_episodes
    rng = np.random.default_rng(6)
    # confidences near the threshold so both branches occur
    bundle = [random_bundle(rng, 10, conf_lo=0.85) for _ in episodes]
    outs = []
    for a, e in enumerate(episodes):
        for t in range(10):
            outs.append(refine_slot(bundle[a], t, channels[a][t], default_cb, default_cfg, RefinementConfig(), 0,
                                    int(e) * 10 + t, cache=caches[a][t]))
    n_trig = sum(o.triggered for o in outs)
    total = sum(o.pilots_used for o in outs)
    accepted_zero = all(o.pilots_used == 0 for o in outs if not o.triggered)
    identity = total == 125 * n_trig and 0 < n_trig < len(outs)
    t = BeamTriplet(1, 1, 1)
    forced = [RefinementOutcome(t, k < 716, 125 if k < 716 else 0, None, RefineMode.PILOT_SWEEP)
              for k in range(1000)]
    avg, rate = account_overhead(forced)
    ok = identity and accepted_zero and avg == 89.5 and abs(avg - 90) <= 0.6
    verdict("6", ok, f"{total} pilots = 125 x {n_trig} triggered of {len(outs)}, accepted use 0: {accepted_zero}, "
                     f"forced {rate:.3f} -> {avg}")


def test_c7_refinement_dominance(default_cfg, default_cb, eval_episodes):
    ds, episodes, bundle, channels, caches = eval_episodes
    noiseless = replace(default_cfg, noise_variance=0.0)
    oracle = ds.arrays["oracle_gain"][episodes, ds.config.L_h:]
    res = {m: run_predictor_method(bundle, episodes, channels, caches, default_cb, noiseless,
                                   RefinementConfig(mode=m), 0) for m in ("none", "sweep")}
    wins = 0
    for a in range(len(episodes)):
        g = {m: avg_norm_gain(chosen_gains(r.chosen[a], channels[a], default_cb), oracle[a])[0]
             for m, r in res.items()}
        wins += g["sweep"] >= g["none"]
    rng = np.random.default_rng(7)
    agree = 0
    for _ in range(10_000):
        b = random_bundle(rng, 1)
        pool = candidate_pool(b, 0)
        score = [b.p_az[0, t.i - 1] * b.p_el[0, t.j - 1] * b.p_dist[0, t.q - 1] for t in pool]
        best = max(score)
        brute = min((triplet_to_global(t, (20, 20, 10)), t) for t, s in zip(pool, score) if s == best)[1]
        agree += refine_joint_prob(pool, b, 0) == brute
    n = len(episodes)
    verdict("7", wins == n and agree == 10_000,
            f"sweep >= none on {wins}/{n} episodes, joint-prob == brute force on {agree}/10000 bundles")


def test_c8_budget_caps(default_cfg, default_cb):
    snaps = scene_snapshots(default_cfg, 1000, seed=8)
    worst = 0
    for i, h in enumerate(snaps):
        for search in (hierarchical_search, two_stage_search):
            r = search(h, default_cb, 90, default_cfg, 0, i)
            worst = max(worst, r.pilots_used)
    geom = antenna_positions(default_cfg)
    rng = np.random.default_rng(8)
    r_lo, r_hi = default_cb.distance_grid[0], default_cb.distance_grid[-1]
    # matching the noiseless oracle is judged with noiseless pilots; the default-noise rate is reported
    noiseless = replace(default_cfg, noise_variance=0.0)
    n, match, match_noisy = 200, 0, 0
    for i in range(n):
        az, el = rng.uniform(-math.pi / 3, math.pi / 3), rng.uniform(-math.pi / 6, math.pi / 6)
        r = 1.0 / rng.uniform(1.0 / r_hi, 1.0 / r_lo)
        h = los_snapshot(polar_point(az, el, r), geom, default_cfg)
        best = oracle_optimal(default_cb, h).triplet
        match += hierarchical_search(h, default_cb, 4000, noiseless, 0, i).triplet == best
        match_noisy += hierarchical_search(h, default_cb, 4000, default_cfg, 0, i).triplet == best
    ok = worst <= 90 and match >= 0.9 * n
    verdict("8", ok, f"max pilots at B=90 {worst}; hierarchical(B=4000) == oracle on {match}/{n} LoS snapshots "
                     f"with noiseless pilots ({match_noisy}/{n} at the 70 dB default)")


@pytest.mark.slow
def test_c9_learning_sanity(tmp_path):
    t0 = time.perf_counter()
    cfg = replace(ExperimentConfig(), snr_db=())
    ds = generate(cfg, tmp_path / "data")
    n_train = ds.split_indices("train").size
    full, _ = train(cfg, ds)
    gps, _ = train(cfg, ds, modalities=())
    noiseless = replace(cfg, refine=replace(cfg.refine, sweep_snr=math.inf))
    rep = evaluate(noiseless, ds, full, ["none", "sweep"])
    rep_gps = evaluate(cfg, ds, gps, ["none"], modalities=())
    rep_70 = evaluate(cfg, ds, full, ["sweep"])
    dt = time.perf_counter() - t0

    def top1(r, m):
        return next(x["top1_joint"] for x in r.rows if x["method"] == m and x["scenario"] == "Overall")

    none, sweep, sweep70 = top1(rep, "none"), top1(rep, "sweep"), top1(rep_70, "sweep")
    top5 = rep.detail["top5_decomposed"]
    mae, mae_gps = rep.detail["traj_mae"], rep_gps.detail["traj_mae"]
    checks = {
        "a": (none >= 10 / 4000, f"top-1 joint {none:.4f} vs 10x uniform {10 / 4000:.4f}"),
        "b": (min(top5) >= 0.6, "top-5 decomposed " + "/".join(f"{v:.3f}" for v in top5)),
        "c": (sweep >= 1.5 * none, f"noiseless-pilot sweep {sweep:.4f} = {sweep / none:.2f}x none; "
                                   f"at the 70 dB default {sweep70:.4f} = {sweep70 / none:.2f}x"),
        "d": (mae <= mae_gps, f"trajectory MAE full {mae:.3f} m vs GPS-only {mae_gps:.3f} m"),
        "": (dt <= 1800 and n_train == 2000, f"{n_train} training episodes, total {dt / 60:.1f} min"),
    }
    failed = []
    for k, (ok, detail) in checks.items():
        ACCEPTANCE_LINES.append(f"C9{k} {'PASS' if ok else 'FAIL'}: {detail}")
        if not ok:
            failed.append(k or "runtime")
    assert not failed, failed


def test_c10_cli_determinism(tmp_path):
    conf = tmp_path / "c10.json"
    conf.write_text(json.dumps({
        "dataset": {"n_train_scenes": 2, "n_val_scenes": 1, "n_test_scenes": 1,
                    "train_episodes_per_scene": 8, "eval_episodes_per_scene": 4},
        "train": {"epochs": 2},
        "snr_db": [70.0],
    }))
    digests = []
    for run in ("a", "b"):
        root = tmp_path / run
        c = str(conf)
        assert cli.main(["gen-data", "--config", c, "--seed", "11", "--out", str(root / "data")]) == 0
        assert cli.main(["train", "--config", c, "--seed", "11", "--data", str(root / "data"),
                         "--out", str(root / "model")]) == 0
        assert cli.main(["eval", "--config", c, "--seed", "11", "--data", str(root / "data"),
                         "--checkpoint", str(root / "model" / "checkpoint.bin"), "--out", str(root / "eval")]) == 0
        digests.append([(root / p).read_bytes() for p in ("data/dataset.bin", "data/dataset.meta.json",
                                                          "model/checkpoint.bin", "model/loss_curve.csv",
                                                          "eval/metrics.csv")])
    same = [a == b for a, b in zip(*digests)]
    verdict("10", all(same), f"dataset, meta, checkpoint, loss curve, metrics.csv identical: {same}")
