"""Spherical-wavefront multipath channels and noisy pilot reception."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from nfbeam.rng import counter_rng
from nfbeam.sysgeo import ArrayGeometry, Box, Facet, SceneConfig, SystemConfig


class PathKind(enum.IntEnum):
    LOS = 0
    SINGLE_BOUNCE = 1


@dataclass(frozen=True)
class PathComponent:
    kind: PathKind
    lengths: np.ndarray  # per-antenna path length d_{l,m}, shape (M,)
    gain: complex
    source: np.ndarray  # UAV position (LoS) or its mirror image (bounce)
    bounce_point: np.ndarray | None = None

    def scaled(self, c: complex) -> "PathComponent":
        return PathComponent(self.kind, self.lengths, complex(self.gain) * c, self.source, self.bounce_point)


@dataclass(frozen=True)
class ChannelSnapshot:
    h: np.ndarray  # (M,) complex128
    paths: tuple[PathComponent, ...] = ()
    slot_time: float = 0.0
    los_blocked: bool = False

    @property
    def is_outage(self) -> bool:
        return not np.any(self.h)


# --------------------------------------------------------------------------
# Geometry helpers


def segment_hits_box(a: np.ndarray, b: np.ndarray, box: Box, eps: float = 1e-12) -> bool:
    """Exact slab test: does the closed segment a->b intersect the box?"""
    t0, t1 = 0.0, 1.0
    d = b - a
    for k in range(3):
        lo, hi = box.lo[k], box.hi[k]
        if abs(d[k]) < eps:
            if a[k] < lo or a[k] > hi:
                return False
            continue
        ta = (lo - a[k]) / d[k]
        tb = (hi - a[k]) / d[k]
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
        if t0 > t1:
            return False
    return True


def segment_blocked(a: np.ndarray, b: np.ndarray, blockers: Sequence[Box]) -> bool:
    return any(segment_hits_box(a, b, box) for box in blockers)


def mirror_point(p: np.ndarray, facet: Facet) -> np.ndarray:
    """Mirror image of ``p`` across the facet's plane."""
    n = facet.normal
    o = np.asarray(facet.origin, dtype=np.float64)
    return p - 2.0 * np.dot(p - o, n) * n


def specular_point(p: np.ndarray, q: np.ndarray, facet: Facet) -> np.ndarray | None:
    """Specular reflection point on ``facet`` for a path p -> facet -> q.

    Returns None when p and q lie on opposite sides of the plane or the point
    falls outside the rectangle.
    """
    n = facet.normal
    o = np.asarray(facet.origin, dtype=np.float64)
    sp, sq = np.dot(p - o, n), np.dot(q - o, n)
    if sp * sq <= 0.0:
        return None
    img = p - 2.0 * sp * n
    denom = np.dot(q - img, n)
    if denom == 0.0:
        return None
    t = -np.dot(img - o, n) / denom
    s = img + t * (q - img)
    u = np.asarray(facet.edge_u, dtype=np.float64)
    v = np.asarray(facet.edge_v, dtype=np.float64)
    rel = s - o
    a = np.dot(rel, u) / np.dot(u, u)
    b = np.dot(rel, v) / np.dot(v, v)
    if not (0.0 <= a <= 1.0 and 0.0 <= b <= 1.0):
        return None
    return s


# --------------------------------------------------------------------------
# Operations


def trace_paths(scene: SceneConfig, uav: Sequence[float], geom: ArrayGeometry,
                cfg: SystemConfig) -> list[PathComponent]:
    """Enumerate the LoS path and every valid single-bounce path.

    Gains use free-space amplitude referenced to the array center:
    ``lambda / (4 pi d)`` for LoS and ``Gamma * lambda / (4 pi (d1 + d2))`` for
    a bounce, uniform over antennas. Per-antenna bounce lengths are the
    image-method distances ``||u' - p_m||``.
    """
    u = np.asarray(uav, dtype=np.float64)
    o = geom.center
    if not scene.bounds.contains(u, tol=1e-9):
        raise ValueError(f"UAV position {u.tolist()} is outside scene bounds")
    d_center = np.linalg.norm(u - o)
    if d_center == 0.0:
        raise ValueError("UAV coincides with the array center")
    lam = cfg.wavelength
    paths: list[PathComponent] = []
    if not segment_blocked(u, o, scene.blockers):
        lengths = np.linalg.norm(u[None, :] - geom.positions, axis=1)
        paths.append(PathComponent(PathKind.LOS, lengths, complex(lam / (4 * np.pi * d_center)), u.copy()))
    for facet in scene.reflectors:
        s = specular_point(u, o, facet)
        if s is None:
            continue
        if segment_blocked(u, s, scene.blockers) or segment_blocked(s, o, scene.blockers):
            continue
        img = mirror_point(u, facet)
        d_total = np.linalg.norm(u - s) + np.linalg.norm(s - o)
        lengths = np.linalg.norm(img[None, :] - geom.positions, axis=1)
        gain = complex(facet.reflection) * lam / (4 * np.pi * d_total)
        paths.append(PathComponent(PathKind.SINGLE_BOUNCE, lengths, gain, img, s))
    return paths


def synthesize_channel(paths: Sequence[PathComponent], cfg: SystemConfig, n_antennas: int | None = None,
                       slot_time: float = 0.0) -> ChannelSnapshot:
    """``h_m = sum_l g_l exp(-j 2 pi / lambda d_{l,m})``.

    An empty path list yields an outage snapshot (``h = 0``); pass
    ``n_antennas`` so its length is known.
    """
    paths = tuple(paths)
    if not paths:
        if n_antennas is None:
            raise ValueError("n_antennas is required for an outage snapshot")
        return ChannelSnapshot(np.zeros(n_antennas, dtype=np.complex128), (), slot_time, True)
    k = 2.0 * np.pi / cfg.wavelength
    h = np.zeros(paths[0].lengths.shape[0], dtype=np.complex128)
    for p in paths:
        h += complex(p.gain) * np.exp(-1j * k * p.lengths)
    los_blocked = not any(p.kind == PathKind.LOS for p in paths)
    return ChannelSnapshot(h, paths, slot_time, los_blocked)


def received_pilot(w: np.ndarray, snap: ChannelSnapshot, cfg: SystemConfig, seed: int,
                   index: int = 0) -> complex:
    """One pilot observation ``sqrt(P) w^H h + w^H n`` with ``n ~ CN(0, sigma^2 I)``."""
    w = np.asarray(w)
    y = np.sqrt(cfg.tx_power) * np.vdot(w, snap.h)
    if cfg.noise_variance > 0.0:
        rng = counter_rng(seed, "pilot", index)
        n = rng.normal(size=(2, w.shape[0])) * np.sqrt(cfg.noise_variance / 2.0)
        y += np.vdot(w, n[0] + 1j * n[1])
    return complex(y)


def pilot_noise(n_pilots: int, cfg: SystemConfig, seed: int, index: int = 0,
                stream: str = "sweep-noise") -> np.ndarray:
    """Effective post-combining noise ``w^H n`` for ``n_pilots`` unit-norm probes.

    For unit-norm ``w`` this is exactly ``CN(0, sigma^2)``; drawing it directly
    avoids forming an M-length noise vector per probe during sweeps.
    """
    if cfg.noise_variance == 0.0:
        return np.zeros(n_pilots, dtype=np.complex128)
    rng = counter_rng(seed, stream, index)
    z = rng.normal(size=(2, n_pilots)) * np.sqrt(cfg.noise_variance / 2.0)
    return z[0] + 1j * z[1]


# --------------------------------------------------------------------------
# Binary records: little-endian, length-prefixed, interleaved re/im float64

_SNAP_MAGIC = b"NFCH"


def snapshot_to_bytes(snap: ChannelSnapshot) -> bytes:
    h = np.ascontiguousarray(snap.h, dtype="<c16")
    head = struct.pack("<4sQdB", _SNAP_MAGIC, h.shape[0], float(snap.slot_time), int(snap.los_blocked))
    return head + h.tobytes()


def snapshot_from_bytes(buf: bytes, offset: int = 0) -> tuple[ChannelSnapshot, int]:
    """Decode one record; returns the snapshot (without paths) and the next offset."""
    magic, m, t, blocked = struct.unpack_from("<4sQdB", buf, offset)
    if magic != _SNAP_MAGIC:
        raise ValueError("not a channel snapshot record")
    offset += struct.calcsize("<4sQdB")
    h = np.frombuffer(buf, dtype="<c16", count=m, offset=offset).astype(np.complex128)
    return ChannelSnapshot(h, (), t, bool(blocked)), offset + 16 * m


def paths_to_json(paths: Sequence[PathComponent]) -> list[dict]:
    out = []
    for p in paths:
        out.append({
            "kind": PathKind(p.kind).name,
            "gain": [complex(p.gain).real, complex(p.gain).imag],
            "source": [float(x) for x in p.source],
            "bounce_point": None if p.bounce_point is None else [float(x) for x in p.bounce_point],
        })
    return out


def paths_from_json(rows: Sequence[dict], geom: ArrayGeometry) -> list[PathComponent]:
    """Rebuild path components; lengths follow from the stored source point."""
    out = []
    for r in rows:
        src = np.asarray(r["source"], dtype=np.float64)
        lengths = np.linalg.norm(src[None, :] - geom.positions, axis=1)
        bp = None if r["bounce_point"] is None else np.asarray(r["bounce_point"], dtype=np.float64)
        out.append(PathComponent(PathKind[r["kind"]], lengths, complex(*r["gain"]), src, bp))
    return out
