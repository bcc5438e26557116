"""Soft beam targets, isolation confidence targets, the three-part loss and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from nfbeam.codebook import BeamTriplet, PolarCodebook, isolation_gains, oracle_optimal
from nfbeam.dataset import Dataset
from nfbeam.predictor import (
    MODALITIES,
    BeamPredictor,
    ModelConfig,
    SensorConfig,
    encode_kinematics,
    image_spatial_bias,
    lidar_spatial_bias,
    static_image_features,
    static_lidar,
    synth_sensor_tokens,
)
from nfbeam.rng import counter_rng

log = logging.getLogger(__name__)

LOSS_CURVE_COLUMNS = ("epoch", "train_total", "train_traj", "train_beam", "train_conf", "val_total")


@dataclass(frozen=True)
class LossConfig:
    lambda_traj: float = 0.2
    lambda_beam: float = 0.6
    lambda_conf: float = 0.2
    soft_mass_center: float = 0.6
    soft_mass_neighbor: float = 0.1
    kl_epsilon: float = 1e-12

    def __post_init__(self):
        if min(self.lambda_traj, self.lambda_beam, self.lambda_conf) < 0:
            raise ValueError("loss weights must be nonnegative")
        if abs(self.soft_mass_center + 4 * self.soft_mass_neighbor - 1.0) > 1e-12:
            raise ValueError("center + 4 x neighbor mass must equal 1")


# --------------------------------------------------------------------------
# Targets


def soft_target(gt_index: int, n_bins: int, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Smoothed label over ``n_bins`` (1-based ``gt_index``): center plus two neighbors each side."""
    if not 1 <= gt_index <= n_bins:
        raise ValueError(f"gt_index {gt_index} outside 1..{n_bins}")
    # rational arithmetic so truncated edges renormalize exactly, e.g. 0.1 / 0.8 -> 0.125
    center, neighbor = Fraction(repr(cfg.soft_mass_center)), Fraction(repr(cfg.soft_mass_neighbor))
    g = gt_index - 1
    mass = {g: center}
    for off in (-2, -1, 1, 2):
        if 0 <= g + off < n_bins:
            mass[g + off] = neighbor
    total = sum(mass.values())
    p = np.zeros(n_bins)
    for k, m in mass.items():
        p[k] = float(m / total)
    return p


def soft_target_table(n_bins: int, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Row ``g`` is ``soft_target(g + 1, n_bins)``."""
    return np.stack([soft_target(g + 1, n_bins, cfg) for g in range(n_bins)])


def confidence_target(pred: BeamTriplet, gt: BeamTriplet, cb: PolarCodebook, snap) -> tuple[float, float, float]:
    """Isolated gain ratios, clamped to [0, 1]; a zero oracle gain gives zeros."""
    best = oracle_optimal(cb, snap)
    if best.outage or best.gain <= 0:
        log.warning("confidence target requested for a zero-gain snapshot")
        return 0.0, 0.0, 0.0
    line_i, line_j, line_q = isolation_gains(cb, snap, gt)
    g_star = best.gain
    return tuple(
        float(min(max(line[int(k) - 1] / g_star, 0.0), 1.0))
        for line, k in zip((line_i, line_j, line_q), pred)
    )


def confidence_targets_from_lines(pred_idx: Sequence[torch.Tensor], lines: Sequence[torch.Tensor],
                                  oracle_gain: torch.Tensor) -> tuple[torch.Tensor, ...]:
    """Batched form: ``pred_idx[d]`` 0-based ``(N, L_p)``, ``lines[d]`` ``(N, L_p, n_d)``."""
    safe = torch.where(oracle_gain > 0, oracle_gain, torch.ones_like(oracle_gain))
    out = []
    for idx, line in zip(pred_idx, lines):
        g = torch.gather(line, -1, idx.unsqueeze(-1)).squeeze(-1)
        out.append(torch.where(oracle_gain > 0, (g / safe).clamp(0.0, 1.0), torch.zeros_like(g)))
    return tuple(out)


# --------------------------------------------------------------------------
# Losses (torch; float64 inputs keep them exact enough for identity checks)


def traj_loss(u_hat: torch.Tensor, u_true: torch.Tensor, eps: float = 1e-9) -> torch.Tensor:
    """Mean over slots (and batch) of ``||u_hat - u||^2 / ||u||^2``."""
    num = ((u_hat - u_true) ** 2).sum(-1)
    den = (u_true**2).sum(-1)
    if bool((den == 0).any()):
        log.warning("trajectory target at the origin; denominator guarded")
    return (num / torch.clamp(den, min=eps)).mean()


def beam_kl_loss(p_hat: Sequence[torch.Tensor], p: Sequence[torch.Tensor], eps: float = 1e-12) -> torch.Tensor:
    """Mean over dimensions and slots of ``sum p log(p / p_hat)`` with ``0 log 0 = 0``."""
    terms = []
    for ph, pt in zip(p_hat, p):
        ratio = torch.where(pt > 0, pt / torch.clamp(ph, min=eps), torch.ones_like(pt))
        terms.append((pt * torch.log(ratio)).sum(-1).mean())
    return torch.stack(terms).mean()


def gather_top1(s: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Confidence entry at each slot's argmax probability."""
    return torch.gather(s, -1, torch.argmax(p, dim=-1, keepdim=True)).squeeze(-1)


def conf_loss(s_hat: Sequence[torch.Tensor], p_hat: Sequence[torch.Tensor],
              targets: Sequence[torch.Tensor]) -> torch.Tensor:
    terms = [((gather_top1(s, p) - t) ** 2).mean() for s, p, t in zip(s_hat, p_hat, targets)]
    return torch.stack(terms).mean()


def total_loss(l_traj, l_beam, l_conf, cfg: LossConfig = LossConfig()):
    return cfg.lambda_traj * l_traj + cfg.lambda_beam * l_beam + cfg.lambda_conf * l_conf


# --------------------------------------------------------------------------
# Model inputs


@dataclass
class EpisodeTensors:
    """Per-episode model inputs and training targets, all as numpy arrays."""

    kin: np.ndarray  # (E, L_h, 9)
    image_feats: np.ndarray
    image_bias: np.ndarray
    lidar_feats: np.ndarray
    lidar_bias: np.ndarray
    mode: np.ndarray
    future_true: np.ndarray  # (E, L_p, 3)
    gt: np.ndarray  # (E, L_p, 3) 1-based
    oracle_gain: np.ndarray  # (E, L_p)
    iso: tuple[np.ndarray, np.ndarray, np.ndarray]
    image_ok: np.ndarray

    def batch(self, idx: np.ndarray, dtype=torch.float32) -> dict:
        t = lambda a: torch.from_numpy(np.ascontiguousarray(a[idx])).to(dtype)  # noqa: E731
        return {
            "kin": t(self.kin),
            "image_feats": t(self.image_feats),
            "image_bias": t(self.image_bias),
            "lidar_feats": t(self.lidar_feats),
            "lidar_bias": t(self.lidar_bias),
            "mode": torch.from_numpy(self.mode[idx].astype(np.int64)),
            "future_true": t(self.future_true),
            "gt": torch.from_numpy(self.gt[idx].astype(np.int64)),
            "oracle_gain": t(self.oracle_gain),
            "iso": tuple(t(a) for a in self.iso),
        }


def episode_tensors(ds: Dataset, indices: np.ndarray | None = None,
                    sensor: SensorConfig | None = None) -> EpisodeTensors:
    """Assemble encoder inputs from the noisy history and per-scene sensor features.

    The spatial biases and the image UAV channel use the latest noisy position.
    """
    cfg = ds.config
    if indices is None:
        indices = np.arange(ds.n_episodes)
    sensor = sensor or SensorConfig(seed=cfg.seed)
    A = ds.arrays
    L_h, L_p = cfg.L_h, cfg.L_p
    static: dict[int, tuple] = {}
    img, ib, lid, lb, ok = [], [], [], [], []
    for e in indices:
        sid = int(A["scene_id"][e])
        if sid not in static:
            sc = ds.scene(sid)
            kp, lf = static_lidar(sc, sensor)
            static[sid] = (static_image_features(sc, sensor), kp, lf)
        u = A["noisy_pos"][e, L_h - 1]
        fi, fl, kp = synth_sensor_tokens(ds.scene(sid), u, sensor, static=static[sid])
        bias, front = image_spatial_bias(u, sensor.intrinsics, sensor.grid)
        img.append(fi)
        ib.append(bias)
        lid.append(fl)
        lb.append(lidar_spatial_bias(u, kp, sensor.lidar_rho))
        ok.append(front)
    return EpisodeTensors(
        kin=encode_kinematics(A["noisy_pos"][indices, :L_h], cfg.dt),
        image_feats=np.stack(img),
        image_bias=np.stack(ib),
        lidar_feats=np.stack(lid),
        lidar_bias=np.stack(lb),
        mode=A["mode"][indices].astype(np.int64),
        future_true=A["true_pos"][indices, L_h:],
        gt=A["gt"][indices, L_h:],
        oracle_gain=A["oracle_gain"][indices, L_h:],
        iso=(A["iso_az"][indices], A["iso_el"][indices], A["iso_dist"][indices]),
        image_ok=np.asarray(ok),
    )


def model_config_for(ds: Dataset, **overrides) -> ModelConfig:
    cfg = ds.config
    base = dict(L_h=cfg.L_h, L_p=cfg.L_p, dt=cfg.dt, n_theta=cfg.codebook.n_theta,
                n_phi=cfg.codebook.n_phi, n_r=cfg.codebook.n_r, seed=cfg.seed)
    base.update(overrides)
    return ModelConfig(**base)


# --------------------------------------------------------------------------
# Loop


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 3e-4
    weight_decay: float = 0.01
    plateau_factor: float = 0.5
    plateau_patience: int = 2
    grad_clip: float | None = 1.0
    seed: int = 0
    modalities: tuple[str, ...] = MODALITIES
    loss: LossConfig = field(default_factory=LossConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossConfig(**d["loss"])
        if "modalities" in d:
            d["modalities"] = tuple(d["modalities"])
        return cls(**d)


@dataclass
class TrainResult:
    model: BeamPredictor
    curve: list[dict]
    best_epoch: int
    best_val: float


class SoftTargets:
    """Lookup tables turning 1-based GT indices into smoothed target rows."""

    def __init__(self, dims: tuple[int, int, int], cfg: LossConfig, dtype=torch.float32):
        self.tables = [torch.from_numpy(soft_target_table(n, cfg)).to(dtype) for n in dims]

    def __call__(self, gt: torch.Tensor) -> tuple[torch.Tensor, ...]:
        return tuple(tab[gt[..., d] - 1] for d, tab in enumerate(self.tables))


def batch_losses(model: BeamPredictor, batch: dict, targets: SoftTargets, cfg: LossConfig,
                 modalities: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    out = model(batch, modalities)
    l_traj = traj_loss(out["traj"], batch["future_true"])
    l_beam = beam_kl_loss(out["p"], targets(batch["gt"]), cfg.kl_epsilon)
    pred = tuple(torch.argmax(p, dim=-1).detach() for p in out["p"])
    s_t = confidence_targets_from_lines(pred, batch["iso"], batch["oracle_gain"])
    l_conf = conf_loss(out["s"], out["p"], s_t)
    return total_loss(l_traj, l_beam, l_conf, cfg), l_traj, l_beam, l_conf


def evaluate_loss(model: BeamPredictor, data: EpisodeTensors, cfg: TrainConfig, targets: SoftTargets,
                  dtype=torch.float32) -> float:
    n = data.kin.shape[0]
    total, count = 0.0, 0
    was = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, n, 256):
            idx = np.arange(start, min(n, start + 256))
            tot, *_ = batch_losses(model, data.batch(idx, dtype), targets, cfg.loss, cfg.modalities)
            total += float(tot) * idx.size
            count += idx.size
    model.train(was)
    return total / max(count, 1)


def train_loop(train: EpisodeTensors, val: EpisodeTensors, model_cfg: ModelConfig,
               cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Seeded mini-batch Adam with plateau halving; keeps the best-validation weights."""
    torch.manual_seed(cfg.seed)
    torch.use_deterministic_algorithms(True)
    model = BeamPredictor(model_cfg)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, factor=cfg.plateau_factor,
                                                       patience=cfg.plateau_patience)
    targets = SoftTargets((model_cfg.n_theta, model_cfg.n_phi, model_cfg.n_r), cfg.loss)
    n = train.kin.shape[0]
    curve: list[dict] = []
    best_val, best_epoch, best_state = math.inf, 0, None
    for epoch in range(1, cfg.epochs + 1):
        order = counter_rng(cfg.seed, "shuffle", epoch).permutation(n)
        sums = np.zeros(4)
        batches = 0
        model.train()
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tot, lt, lb, lc = batch_losses(model, train.batch(idx), targets, cfg.loss, cfg.modalities)
            if not torch.isfinite(tot):
                raise FloatingPointError(
                    f"loss diverged at epoch {epoch}, batch {batches}: traj={lt.item()} beam={lb.item()} conf={lc.item()}"
                )
            opt.zero_grad()
            tot.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            sums += [float(x.detach()) for x in (tot, lt, lb, lc)]
            batches += 1
        val_total = evaluate_loss(model, val, cfg, targets)
        sched.step(val_total)
        row = {"epoch": epoch, "train_total": sums[0] / batches, "train_traj": sums[1] / batches,
               "train_beam": sums[2] / batches, "train_conf": sums[3] / batches, "val_total": val_total}
        curve.append(row)
        log.info("epoch %d train %.5f val %.5f lr %.2e", epoch, row["train_total"], val_total,
                 opt.param_groups[0]["lr"])
        if val_total < best_val:
            best_val, best_epoch = val_total, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, curve, best_epoch, best_val)


def write_loss_curve(path: str | Path, curve: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_CURVE_COLUMNS)
        for row in curve:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in LOSS_CURVE_COLUMNS[1:]])
