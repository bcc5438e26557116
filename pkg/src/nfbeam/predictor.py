"""Multimodal beam predictor.

Pipeline: kinematic history -> MLP tokens; image and LiDAR feature maps ->
position-guided attention (PGA) context tokens; trajectory mode -> cached text
embedding projected to a context token. Tokens are fused, passed through a
small pre-norm causal transformer, and the future-query outputs feed a
trajectory head and a decoupled azimuth/elevation/distance beam head with
per-index confidence scores.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from nfbeam.rng import counter_rng
from nfbeam.sysgeo import Box, Facet, SceneConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_CKPT_MAGIC = b"NFBP"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    d_in: int = 32
    n_backbone_blocks: int = 2
    n_heads: int = 4
    L_h: int = 10
    L_p: int = 10
    n_image_tokens: int = 49
    n_lidar_tokens: int = 64
    n_modes: int = 5
    d_text: int = 32
    n_theta: int = 20
    n_phi: int = 20
    n_r: int = 10
    ffn_mult: int = 4
    dropout: float = 0.1
    dt: float = 0.1
    # fixed input normalisation, meters / (m/s) / (m/s^2)
    pos_scale: float = 20.0
    vel_scale: float = 10.0
    acc_scale: float = 100.0
    partial_freeze: bool = False
    # residual base for the trajectory head: "linear" (least-squares constant
    # velocity over the history) or "last" (latest noisy position)
    traj_prior: str = "linear"
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.L_h < 2 or self.L_p < 1:
            raise ValueError("need L_h >= 2 and L_p >= 1")
        if self.traj_prior not in ("linear", "last"):
            raise ValueError("traj_prior must be 'linear' or 'last'")

    @property
    def seq_len(self) -> int:
        return 3 + self.L_h + self.L_p

    @property
    def n_logits(self) -> int:
        return self.n_theta + self.n_phi + self.n_r

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# --------------------------------------------------------------------------
# Kinematics


def encode_kinematics(positions: np.ndarray, dt: float) -> np.ndarray:
    """Per-slot ``[u, v, a]`` (9 values) from finite differences.

    Works on ``(..., L_h, 3)``; the first slot's velocity and the first slot's
    acceleration are zero-filled, and the second slot's acceleration uses the
    zero-filled first velocity.
    """
    u = np.asarray(positions, dtype=np.float64)
    if u.shape[-2] < 2:
        raise ValueError("need at least two positions")
    v = np.zeros_like(u)
    v[..., 1:, :] = (u[..., 1:, :] - u[..., :-1, :]) / dt
    a = np.zeros_like(u)
    a[..., 1:, :] = (v[..., 1:, :] - v[..., :-1, :]) / dt
    return np.concatenate([u, v, a], axis=-1)


# --------------------------------------------------------------------------
# Sensors and spatial biases


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera at the array center looking along +x (image right = -y, down = -z)."""

    fx: float = 64.0
    fy: float = 64.0
    cx: float = 112.0
    cy: float = 112.0
    width: int = 224
    height: int = 224
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def project(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates ``(N, 2)`` and an in-front mask."""
        p = np.atleast_2d(np.asarray(pts, dtype=np.float64)) - np.asarray(self.origin)
        front = p[:, 0] > 1e-9
        x = np.where(front, p[:, 0], 1.0)
        px = self.cx - self.fx * p[:, 1] / x
        py = self.cy - self.fy * p[:, 2] / x
        return np.stack([px, py], axis=1), front


def token_centers(intr: Intrinsics, grid: int = 7) -> np.ndarray:
    """Pixel centers of a ``grid x grid`` token layout, row-major from top-left."""
    pw, ph = intr.width / grid, intr.height / grid
    r, c = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    return np.stack([(c.ravel() + 0.5) * pw, (r.ravel() + 0.5) * ph], axis=1)


def image_spatial_bias(u: Sequence[float], intr: Intrinsics = Intrinsics(), grid: int = 7,
                       sigma_b: float | None = None) -> tuple[np.ndarray, bool]:
    """Gaussian spotlight ``-||pix - center||^2 / (2 sigma_b^2)`` over image tokens.

    ``sigma_b`` defaults to one token pitch. Returns ``(bias, ok)``; a UAV
    behind the camera yields a zero (uniform) bias with ``ok=False``.
    """
    pix, front = intr.project(np.asarray(u, dtype=np.float64))
    if not front[0]:
        return np.zeros(grid * grid), False
    if sigma_b is None:
        sigma_b = intr.width / grid
    d2 = np.sum((token_centers(intr, grid) - pix[0]) ** 2, axis=1)
    if math.isinf(sigma_b):
        return np.zeros(grid * grid), True
    return -d2 / (2.0 * sigma_b**2), True


def lidar_spatial_bias(u: Sequence[float], keypoints: np.ndarray, rho: float = 5.0) -> np.ndarray:
    """``-||u - keypoint|| / rho`` for each LiDAR keypoint."""
    kp = np.asarray(keypoints, dtype=np.float64)
    if kp.shape[0] == 0:
        raise ValueError("keypoints must be non-empty")
    return -np.linalg.norm(kp - np.asarray(u, dtype=np.float64)[None, :], axis=1) / rho


@dataclass(frozen=True)
class SensorConfig:
    intrinsics: Intrinsics = Intrinsics()
    grid: int = 7
    n_lidar_tokens: int = 64
    d_in: int = 32
    lidar_rho: float = 5.0
    max_range: float = 50.0
    seed: int = 0


# channel layout of the synthetic image tokens
IMG_BLOCKER_OCC, IMG_BLOCKER_DEPTH, IMG_REFL_OCC, IMG_REFL_GAMMA, IMG_UAV = range(5)
_IMG_POSENC = 5  # four positional channels follow
_IMG_CORE = 9
_LIDAR_CORE = 10


def _rect_overlap(rect: tuple[float, float, float, float], cell: tuple[float, float, float, float]) -> float:
    x0, y0, x1, y1 = rect
    a0, b0, a1, b1 = cell
    w = min(x1, a1) - max(x0, a0)
    h = min(y1, b1) - max(y0, b0)
    return w * h if (w > 0 and h > 0) else 0.0


def _facet_samples(f: Facet, n: int = 24) -> np.ndarray:
    a = (np.arange(n) + 0.5) / n
    A, B = np.meshgrid(a, a, indexing="ij")
    o, u, v = (np.asarray(x, dtype=np.float64) for x in (f.origin, f.edge_u, f.edge_v))
    return o + A.ravel()[:, None] * u + B.ravel()[:, None] * v


def _box_surface_samples(b: Box, n: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Sample points and outward normals on the six faces."""
    lo, hi = np.asarray(b.lo), np.asarray(b.hi)
    a = (np.arange(n) + 0.5) / n
    A, B = np.meshgrid(a, a, indexing="ij")
    A, B = A.ravel(), B.ravel()
    pts, nrm = [], []
    for axis in range(3):
        o1, o2 = [k for k in range(3) if k != axis]
        for side, val in ((-1.0, lo[axis]), (1.0, hi[axis])):
            p = np.empty((A.size, 3))
            p[:, axis] = val
            p[:, o1] = lo[o1] + A * (hi[o1] - lo[o1])
            p[:, o2] = lo[o2] + B * (hi[o2] - lo[o2])
            nv = np.zeros(3)
            nv[axis] = side
            pts.append(p)
            nrm.append(np.tile(nv, (A.size, 1)))
    return np.concatenate(pts), np.concatenate(nrm)


def static_image_features(scene: SceneConfig, cfg: SensorConfig = SensorConfig()) -> np.ndarray:
    """Scene-only image token features ``(grid*grid, d_in)``; the UAV channel is left zero."""
    intr, g = cfg.intrinsics, cfg.grid
    n_tok = g * g
    feats = np.zeros((n_tok, max(cfg.d_in, _IMG_CORE)))
    pw, ph = intr.width / g, intr.height / g
    cells = [(c * pw, r * ph, (c + 1) * pw, (r + 1) * ph) for r in range(g) for c in range(g)]
    cam = np.asarray(intr.origin)
    for box in scene.blockers:
        corners = box.corners()
        pix, front = intr.project(corners)
        if not np.all(front):
            continue
        rect = (pix[:, 0].min(), pix[:, 1].min(), pix[:, 0].max(), pix[:, 1].max())
        depth = np.min(corners[:, 0] - cam[0])
        for t, cell in enumerate(cells):
            ov = _rect_overlap(rect, cell) / (pw * ph)
            if ov > 0:
                feats[t, IMG_BLOCKER_OCC] = min(1.0, feats[t, IMG_BLOCKER_OCC] + ov)
                feats[t, IMG_BLOCKER_DEPTH] = max(feats[t, IMG_BLOCKER_DEPTH], 1.0 / depth)
    for f in scene.reflectors:
        pts = _facet_samples(f)
        pix, front = intr.project(pts)
        ok = front & (pix[:, 0] >= 0) & (pix[:, 0] < intr.width) & (pix[:, 1] >= 0) & (pix[:, 1] < intr.height)
        if not np.any(ok):
            continue
        col = np.minimum((pix[ok, 0] // pw).astype(int), g - 1)
        row = np.minimum((pix[ok, 1] // ph).astype(int), g - 1)
        counts = np.bincount(row * g + col, minlength=n_tok).astype(np.float64)
        frac = counts / pts.shape[0]
        feats[:, IMG_REFL_OCC] = np.minimum(1.0, feats[:, IMG_REFL_OCC] + frac * n_tok)
        feats[counts > 0, IMG_REFL_GAMMA] = np.maximum(feats[counts > 0, IMG_REFL_GAMMA],
                                                      abs(complex(f.reflection)))
    r = np.repeat(np.arange(g), g)
    c = np.tile(np.arange(g), g)
    feats[:, _IMG_POSENC + 0] = np.sin(np.pi * (r + 0.5) / g)
    feats[:, _IMG_POSENC + 1] = np.cos(np.pi * (r + 0.5) / g)
    feats[:, _IMG_POSENC + 2] = np.sin(np.pi * (c + 0.5) / g)
    feats[:, _IMG_POSENC + 3] = np.cos(np.pi * (c + 0.5) / g)
    return feats[:, : cfg.d_in] if cfg.d_in < _IMG_CORE else feats


def static_lidar(scene: SceneConfig, cfg: SensorConfig = SensorConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic LiDAR keypoints and per-point features for a scene.

    Keypoints are drawn from facet and blocker surface samples in front of the
    sensor; a scene with no surfaces returns floor points at the lower bound.
    """
    cam = np.asarray(cfg.intrinsics.origin)
    pts, nrm, kind, gam = [], [], [], []
    for f in scene.reflectors:
        p = _facet_samples(f)
        keep = (p[:, 0] > cam[0] + 0.5) & (p[:, 0] <= scene.bounds.hi[0])
        p = p[keep]
        pts.append(p)
        nrm.append(np.tile(f.normal, (p.shape[0], 1)))
        kind.append(np.full(p.shape[0], 1))
        gam.append(np.full(p.shape[0], abs(complex(f.reflection))))
    for b in scene.blockers:
        p, n = _box_surface_samples(b)
        pts.append(p)
        nrm.append(n)
        kind.append(np.full(p.shape[0], 2))
        gam.append(np.zeros(p.shape[0]))
    rng = counter_rng(cfg.seed, "lidar", scene.scene_id)
    n_kp = cfg.n_lidar_tokens
    if pts and sum(p.shape[0] for p in pts) > 0:
        P, N, K, G = (np.concatenate(x) for x in (pts, nrm, kind, gam))
        idx = rng.choice(P.shape[0], size=n_kp, replace=P.shape[0] < n_kp)
        idx.sort()
        P, N, K, G = P[idx], N[idx], K[idx], G[idx]
    else:
        lo, hi = np.asarray(scene.bounds.lo), np.asarray(scene.bounds.hi)
        xy = rng.uniform(lo[:2], hi[:2], size=(n_kp, 2))
        P = np.column_stack([xy, np.full(n_kp, lo[2])])
        N = np.tile([0.0, 0.0, 1.0], (n_kp, 1))
        K = np.zeros(n_kp, dtype=int)
        G = np.zeros(n_kp)
    rng_ = np.linalg.norm(P - cam[None, :], axis=1)
    feats = np.zeros((n_kp, max(cfg.d_in, _LIDAR_CORE)))
    feats[:, 0:3] = N
    feats[:, 3] = rng_ / cfg.max_range
    feats[:, 4:7] = P / 20.0
    feats[:, 7] = K == 2
    feats[:, 8] = K == 1
    feats[:, 9] = G
    return P, feats[:, : cfg.d_in] if cfg.d_in < _LIDAR_CORE else feats


def synth_sensor_tokens(scene: SceneConfig, u: Sequence[float], cfg: SensorConfig = SensorConfig(),
                        static: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None):
    """Image features ``(49, d_in)``, LiDAR features ``(n, d_in)`` and keypoints ``(n, 3)``.

    Scene-dependent parts are reusable via ``static=(img, kp, lidar)``; only
    the UAV occupancy channel depends on ``u``.
    """
    if static is None:
        img = static_image_features(scene, cfg)
        kp, lid = static_lidar(scene, cfg)
    else:
        img, kp, lid = static
    img = img.copy()
    pix, front = cfg.intrinsics.project(np.asarray(u, dtype=np.float64))
    if front[0] and cfg.d_in > IMG_UAV:
        g, intr = cfg.grid, cfg.intrinsics
        px, py = pix[0]
        if 0 <= px < intr.width and 0 <= py < intr.height:
            t = int(py // (intr.height / g)) * g + int(px // (intr.width / g))
            img[t, IMG_UAV] = 1.0
    return img, lid, kp


# --------------------------------------------------------------------------
# Torch modules


def pga_attend(u: torch.Tensor, feats: torch.Tensor, bias: torch.Tensor, W_Q: torch.Tensor,
               W_K: torch.Tensor, W_V: torch.Tensor) -> torch.Tensor:
    """Position-guided cross-attention.

    ``softmax((u W_Q)(F W_K)^T / sqrt(d_model) + M) (F W_V)`` with ``u`` of
    shape ``(N, 1, 3)``, ``F`` ``(N, T, d_in)`` and ``M`` ``(N, 1, T)``.
    Returns ``(N, 1, d_model)``.
    """
    d_model = W_Q.shape[-1]
    q = u @ W_Q
    k = feats @ W_K
    v = feats @ W_V
    scores = q @ k.transpose(-1, -2) / math.sqrt(d_model) + bias
    return torch.softmax(scores, dim=-1) @ v


class PGA(nn.Module):
    def __init__(self, d_in: int, d_model: int):
        super().__init__()
        self.W_Q = nn.Parameter(torch.empty(3, d_model))
        self.W_K = nn.Parameter(torch.empty(d_in, d_model))
        self.W_V = nn.Parameter(torch.empty(d_in, d_model))

    def forward(self, u, feats, bias):
        return pga_attend(u, feats, bias, self.W_Q, self.W_K, self.W_V)


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x):
        n, t, d = x.shape
        hd = d // self.n_heads
        q, k, v = self.qkv(x).split(d, dim=-1)
        q = q.view(n, t, self.n_heads, hd).transpose(1, 2)
        k = k.view(n, t, self.n_heads, hd).transpose(1, 2)
        v = v.view(n, t, self.n_heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        mask = torch.ones(t, t, dtype=torch.bool, device=x.device).triu(1)
        att = att.masked_fill(mask, float("-inf"))
        y = torch.softmax(att, dim=-1) @ v
        return self.proj(y.transpose(1, 2).reshape(n, t, d))


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_mult: int, dropout: float = 0.0):
        super().__init__()
        self.drop = nn.Dropout(dropout)
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(
            nn.Linear(d_model, ffn_mult * d_model), nn.GELU(), nn.Linear(ffn_mult * d_model, d_model)
        )

    def forward(self, x):
        x = x + self.drop(self.attn(self.ln1(x)))
        return x + self.drop(self.ffn(self.ln2(x)))


@dataclass
class PredictionBundle:
    """Decoupled per-slot outputs; arrays may carry leading batch dimensions."""

    traj: np.ndarray  # (..., L_p, 3)
    p_az: np.ndarray  # (..., L_p, N_theta)
    p_el: np.ndarray
    p_dist: np.ndarray
    s_az: np.ndarray
    s_el: np.ndarray
    s_dist: np.ndarray

    @property
    def probs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.p_az, self.p_el, self.p_dist

    @property
    def confs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.s_az, self.s_el, self.s_dist

    def __getitem__(self, idx) -> "PredictionBundle":
        return PredictionBundle(*(getattr(self, f)[idx] for f in
                                  ("traj", "p_az", "p_el", "p_dist", "s_az", "s_el", "s_dist")))

    def top1(self) -> np.ndarray:
        """1-based per-dimension argmax triplets, shape (..., L_p, 3)."""
        return np.stack([np.argmax(p, axis=-1) + 1 for p in self.probs], axis=-1)


MODALITIES = ("image", "lidar", "mode")


class BeamPredictor(nn.Module):
    """Fusion, causal backbone and dual heads.

    ``forward`` takes a batch dict with ``kin`` ``(N, L_h, 9)`` and, for each
    present modality, ``image_feats``/``image_bias``, ``lidar_feats``/
    ``lidar_bias`` and ``mode`` (long). Absent modalities simply drop their
    token.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.register_buffer(
            "kin_scale",
            torch.tensor([cfg.pos_scale] * 3 + [cfg.vel_scale] * 3 + [cfg.acc_scale] * 3),
            persistent=False,
        )
        self.kin_mlp = nn.Sequential(nn.Linear(9, d), nn.GELU(), nn.Linear(d, d))
        self.Q_p = nn.Parameter(torch.empty(cfg.L_p, d))
        self.E_time = nn.Parameter(torch.empty(cfg.L_h + cfg.L_p, d))
        self.pga_img = PGA(cfg.d_in, d)
        self.pga_lidar = PGA(cfg.d_in, d)
        # frozen stand-in for offline text embeddings of the mode prompts
        gen = torch.Generator().manual_seed(int(counter_rng(cfg.seed, "text-table").integers(2**31)))
        self.register_buffer("text_table", torch.randn(cfg.n_modes, cfg.d_text, generator=gen))
        self.text_proj = nn.Linear(cfg.d_text, d)
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.ffn_mult, cfg.dropout) for _ in range(cfg.n_backbone_blocks))
        # heads
        self.traj_ln = nn.LayerNorm(d)
        self.traj_hidden = nn.Linear(d, d)
        self.traj_out = nn.Linear(d, 3)
        self.traj_gain = nn.Linear(d, 3)
        self.traj_to_beam = nn.Linear(d, d)
        self.beam_ln = nn.LayerNorm(d)
        self.beam_trunk = nn.Linear(2 * d, d)
        self.beam_logits = nn.Linear(d, cfg.n_logits)
        self.conf_logits = nn.Linear(d, cfg.n_logits)
        self.reset_parameters()
        if cfg.partial_freeze:
            apply_partial_freeze(self)

    def reset_parameters(self) -> None:
        gen = torch.Generator().manual_seed(int(counter_rng(self.cfg.seed, "init").integers(2**31)))
        norms = {n for n, m in self.named_modules() if isinstance(m, nn.LayerNorm)}
        with torch.no_grad():
            for name, p in self.named_parameters():
                owner, _, leaf = name.rpartition(".")
                if owner in norms:
                    p.fill_(1.0 if leaf == "weight" else 0.0)
                elif leaf == "bias":
                    p.zero_()
                elif name in ("Q_p", "E_time"):
                    p.copy_(0.02 * torch.randn(p.shape, generator=gen))
                else:
                    # PGA projections are (in, out); nn.Linear weights are (out, in)
                    fan_in = p.shape[0] if leaf in ("W_Q", "W_K", "W_V") else p.shape[-1]
                    bound = math.sqrt(3.0 / fan_in)
                    p.copy_((torch.rand(p.shape, generator=gen) * 2 - 1) * bound)
            # trajectory output starts at its prior
            self.traj_out.weight.zero_()
            self.traj_gain.weight.zero_()

    # ---- fusion ---------------------------------------------------------
    def context_tokens(self, batch: dict, modalities: Sequence[str]) -> list[torch.Tensor]:
        cfg = self.cfg
        u = batch["kin"][:, -1:, 0:3] / cfg.pos_scale
        toks = []
        if "mode" in modalities:
            toks.append(self.text_proj(self.text_table[batch["mode"]]).unsqueeze(1))
        if "image" in modalities:
            toks.append(self.pga_img(u, batch["image_feats"], batch["image_bias"].unsqueeze(1)))
        if "lidar" in modalities:
            toks.append(self.pga_lidar(u, batch["lidar_feats"], batch["lidar_bias"].unsqueeze(1)))
        return toks

    def fuse(self, batch: dict, modalities: Sequence[str] = MODALITIES) -> torch.Tensor:
        """Context tokens first, then history, then future queries."""
        return fuse_tokens(
            self.kin_mlp(batch["kin"] / self.kin_scale), self.Q_p, self.E_time,
            self.context_tokens(batch, modalities), context_first=True,
        )

    def backbone(self, tokens: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            tokens = blk(tokens)
        return tokens

    def heads(self, q_hat: torch.Tensor, prior: tuple[torch.Tensor, torch.Tensor] | None = None) -> dict:
        """``prior = (base, step)``, each ``(N, L_p, 3)``.

        Positions are ``base + (1 + gain) * step + pos_scale * offset`` with the
        gain and offset regressed per slot and axis.
        """
        cfg = self.cfg
        h = F.gelu(self.traj_hidden(self.traj_ln(q_hat)))
        traj = cfg.pos_scale * self.traj_out(h)
        if prior is not None:
            base, step = prior
            traj = traj + base + (1.0 + self.traj_gain(h)) * step
        z = F.gelu(self.beam_trunk(torch.cat([self.beam_ln(q_hat), self.traj_to_beam(h)], dim=-1)))
        logits = self.beam_logits(z)
        conf = torch.sigmoid(self.conf_logits(z))
        sizes = (cfg.n_theta, cfg.n_phi, cfg.n_r)
        la, le, ld = logits.split(sizes, dim=-1)
        sa, se, sd = conf.split(sizes, dim=-1)
        return {
            "traj": traj,
            "logits": (la, le, ld),
            "p": (torch.softmax(la, -1), torch.softmax(le, -1), torch.softmax(ld, -1)),
            "s": (sa, se, sd),
        }

    def forward(self, batch: dict, modalities: Sequence[str] = MODALITIES) -> dict:
        tokens = self.fuse(batch, modalities)
        out = self.backbone(tokens)
        q_hat = select_future(out, self.cfg.L_p)
        return self.heads(q_hat, trajectory_prior(batch["kin"][..., 0:3], self.cfg))

    @torch.no_grad()
    def predict(self, batch: dict, modalities: Sequence[str] = MODALITIES) -> PredictionBundle:
        was = self.training
        self.eval()
        out = self.forward(batch, modalities)
        self.train(was)
        f = lambda t: t.detach().cpu().double().numpy()  # noqa: E731
        return PredictionBundle(f(out["traj"]), *(f(p) for p in out["p"]), *(f(s) for s in out["s"]))


def trajectory_prior(history: torch.Tensor, cfg: ModelConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Constant-velocity extrapolation of noisy history ``(N, L_h, 3)``.

    Returns ``(base, step)`` of shape ``(N, L_p, 3)`` whose sum is the
    least-squares line evaluated at the future slots ("linear"), or the last
    position with zero step ("last").
    """
    n, L_h, _ = history.shape
    if cfg.traj_prior == "last":
        base = history[:, -1:, :].expand(n, cfg.L_p, 3)
        return base, torch.zeros_like(base)
    t = torch.arange(L_h, dtype=history.dtype)
    tc = t - t.mean()
    mean = history.mean(dim=1, keepdim=True)
    slope = (tc[None, :, None] * (history - mean)).sum(1, keepdim=True) / (tc**2).sum()
    tf = torch.arange(L_h, L_h + cfg.L_p, dtype=history.dtype) - t.mean()
    return mean.expand(n, cfg.L_p, 3), tf[None, :, None] * slope


def fuse_tokens(kin_tokens: torch.Tensor | None, Q_p: torch.Tensor, E_time: torch.Tensor,
                context: Sequence[torch.Tensor], context_first: bool = True) -> torch.Tensor:
    """Assemble ``[S_traj + E_time, context...]`` (or context first).

    ``kin_tokens`` is ``(N, L_h, d)``; ``Q_p`` ``(L_p, d)`` is broadcast over
    the batch. Absent context tokens shrink the sequence.
    """
    if kin_tokens is None:
        raise ValueError("the kinematic block is required")
    n = kin_tokens.shape[0]
    s_traj = torch.cat([kin_tokens, Q_p.unsqueeze(0).expand(n, -1, -1)], dim=1) + E_time.unsqueeze(0)
    ctx = [c for c in context if c is not None]
    parts = ctx + [s_traj] if context_first else [s_traj] + ctx
    return torch.cat(parts, dim=1)


def select_future(out: torch.Tensor, L_p: int) -> torch.Tensor:
    if out.shape[1] < L_p:
        raise ValueError("sequence shorter than L_p")
    return out[:, -L_p:, :]


def apply_partial_freeze(model: BeamPredictor) -> None:
    """Train only the top block, norms, embeddings, encoder projections and heads."""
    top = f"blocks.{len(model.blocks) - 1}."
    for name, p in model.named_parameters():
        trainable = (
            not name.startswith("blocks.")
            or name.startswith(top)
            or ".ln" in name
        )
        p.requires_grad_(trainable)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --------------------------------------------------------------------------
# Checkpoints: magic, version, JSON header (config + tensor table), raw LE data


def save_checkpoint(model: BeamPredictor, path: str | Path, extra: dict | None = None) -> str:
    state = {k: v.detach().cpu().contiguous() for k, v in model.state_dict().items()}
    table, blobs, off = [], [], 0
    for name in sorted(state):
        t = state[name]
        arr = t.numpy().astype("<f8" if t.dtype == torch.float64 else "<f4", copy=False)
        b = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": off})
        blobs.append(b)
        off += len(b)
    header = json.dumps({
        "version": CHECKPOINT_VERSION, "model": model.cfg.to_dict(), "tensors": table, "extra": extra or {},
    }, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(CHECKPOINT_VERSION.to_bytes(4, "little"))
    buf.write(len(header).to_bytes(8, "little"))
    buf.write(header)
    for b in blobs:
        buf.write(b)
    data = buf.getvalue()
    Path(path).write_bytes(data)
    digest = hashlib.sha256(data).hexdigest()
    log.info("saved checkpoint %s sha256=%s", path, digest)
    return digest


def load_checkpoint(path: str | Path) -> tuple[BeamPredictor, dict]:
    data = Path(path).read_bytes()
    if data[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version = int.from_bytes(data[4:8], "little")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    n = int.from_bytes(data[8:16], "little")
    header = json.loads(data[16:16 + n])
    base = 16 + n
    model = BeamPredictor(ModelConfig.from_dict(header["model"]))
    state = {}
    for row in header["tensors"]:
        count = int(np.prod(row["shape"])) if row["shape"] else 1
        arr = np.frombuffer(data, dtype=row["dtype"], count=count, offset=base + row["offset"])
        state[row["name"]] = torch.from_numpy(arr.reshape(row["shape"]).copy())
    if any(t.dtype == torch.float64 for t in state.values()):
        model = model.double()
    model.load_state_dict(state, strict=False)
    log.info("loaded checkpoint %s sha256=%s", path, hashlib.sha256(data).hexdigest())
    return model, header
