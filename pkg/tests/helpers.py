"""Tiny model, synthetic batches and a central-difference gradient oracle."""

import numpy as np
import torch

from nfbeam.codebook import CodebookSpec, build_codebook, isolation_gains, oracle_optimal
from nfbeam.predictor import BeamPredictor, ModelConfig, encode_kinematics
from nfbeam.sysgeo import SystemConfig
from nfbeam.training import LossConfig, SoftTargets, batch_losses

TINY_SYS = SystemConfig(antenna_rows=2, antenna_cols=2)  # M = 4
TINY_SPEC = CodebookSpec(n_theta=4, n_phi=4, n_r=2, r_min=1.0, r_max=10.0)


def tiny_config(**kw) -> ModelConfig:
    base = dict(d_model=8, d_in=6, n_heads=2, L_h=3, L_p=3, n_image_tokens=6, n_lidar_tokens=5,
                n_theta=4, n_phi=4, n_r=2, d_text=4, ffn_mult=2, dropout=0.0, seed=3)
    base.update(kw)
    return ModelConfig(**base)


def tiny_batch(cfg: ModelConfig, n: int = 2, seed: int = 0, dtype=torch.float64) -> dict:
    """Random inputs plus labels computed from random M=4 channels on the tiny codebook."""
    rng = np.random.default_rng(seed)
    cb = build_codebook(TINY_SYS, spec=CodebookSpec(cfg.n_theta, cfg.n_phi, cfg.n_r, r_min=1.0, r_max=10.0))
    start = rng.uniform([10, -5, 0], [20, 5, 5], size=(n, 1, 3))
    vel = rng.normal(size=(n, 1, 3))
    t = np.arange(cfg.L_h + cfg.L_p)[None, :, None] * cfg.dt
    path = start + vel * t
    hist = path[:, : cfg.L_h] + 0.1 * rng.normal(size=(n, cfg.L_h, 3))
    gt = np.zeros((n, cfg.L_p, 3), np.int64)
    og = np.zeros((n, cfg.L_p))
    iso = [np.zeros((n, cfg.L_p, k)) for k in (cfg.n_theta, cfg.n_phi, cfg.n_r)]
    for a in range(n):
        for s in range(cfg.L_p):
            h = (rng.normal(size=4) + 1j * rng.normal(size=4)) * 1e-3
            res = oracle_optimal(cb, h)
            gt[a, s] = res.triplet
            og[a, s] = res.gain
            for d, line in enumerate(isolation_gains(cb, h, res.triplet)):
                iso[d][a, s] = line
    T = lambda x: torch.as_tensor(x, dtype=dtype)  # noqa: E731
    return {
        "kin": T(encode_kinematics(hist, cfg.dt)),
        "image_feats": T(rng.normal(size=(n, cfg.n_image_tokens, cfg.d_in))),
        "image_bias": T(-rng.random((n, cfg.n_image_tokens))),
        "lidar_feats": T(rng.normal(size=(n, cfg.n_lidar_tokens, cfg.d_in))),
        "lidar_bias": T(-rng.random((n, cfg.n_lidar_tokens))),
        "mode": torch.as_tensor(rng.integers(0, cfg.n_modes, size=n)),
        "future_true": T(path[:, cfg.L_h:]),
        "gt": torch.as_tensor(gt),
        "oracle_gain": T(og),
        "iso": tuple(T(x) for x in iso),
    }


def tiny_model(cfg: ModelConfig | None = None) -> BeamPredictor:
    model = BeamPredictor(cfg or tiny_config()).double()
    # move zero-initialised output layers off zero so their inputs receive gradient
    with torch.no_grad():
        g = torch.Generator().manual_seed(11)
        model.traj_out.weight.copy_(0.1 * torch.randn(model.traj_out.weight.shape, generator=g, dtype=torch.float64))
        model.traj_gain.weight.copy_(0.1 * torch.randn(model.traj_gain.weight.shape, generator=g, dtype=torch.float64))
    return model


def loss_fn(model: BeamPredictor, batch: dict, cfg: LossConfig = LossConfig()):
    targets = SoftTargets((model.cfg.n_theta, model.cfg.n_phi, model.cfg.n_r), cfg, dtype=torch.float64)
    return lambda: batch_losses(model, batch, targets, cfg, ("image", "lidar", "mode"))[0]


def gradient_check(model: BeamPredictor, f, step: float = 1e-5, max_entries: int | None = None,
                   seed: int = 0) -> dict[str, float]:
    """Relative error ``||g_analytic - g_numeric|| / max(norms)`` per parameter tensor."""
    model.zero_grad()
    f().backward()
    rng = np.random.default_rng(seed)
    errs = {}
    for name, p in model.named_parameters():
        ga = p.grad.detach().clone().reshape(-1)
        flat = p.data.view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and idx.size > max_entries:
            idx = np.sort(rng.choice(idx, max_entries, replace=False))
        gn = torch.zeros(idx.size, dtype=torch.float64)
        with torch.no_grad():
            for n, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                gn[n] = (up - down) / (2 * step)
        ga = ga[torch.as_tensor(idx)]
        scale = max(ga.norm().item(), gn.norm().item())
        errs[name] = 0.0 if scale == 0 else (ga - gn).norm().item() / scale
    return errs
