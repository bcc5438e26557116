"""Polar-domain codebook, index bijection, beamforming gain and rate, exhaustive oracle."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from nfbeam import kernels
from nfbeam.channel import ChannelSnapshot
from nfbeam.sysgeo import ArrayGeometry, SystemConfig, antenna_positions


class BeamTriplet(NamedTuple):
    """1-based (azimuth, elevation, distance) indices."""

    i: int
    j: int
    q: int


@dataclass(frozen=True)
class CodebookSpec:
    n_theta: int = 20
    n_phi: int = 20
    n_r: int = 10
    azimuth_range_deg: tuple[float, float] = (-60.0, 60.0)
    elevation_range_deg: tuple[float, float] = (-30.0, 30.0)
    r_min: float = 5.0
    r_max: float | None = None  # None: 0.9 x Rayleigh distance
    rayleigh_fraction: float = 0.9

    def to_dict(self) -> dict:
        return {
            "n_theta": self.n_theta,
            "n_phi": self.n_phi,
            "n_r": self.n_r,
            "azimuth_range_deg": list(self.azimuth_range_deg),
            "elevation_range_deg": list(self.elevation_range_deg),
            "r_min": self.r_min,
            "r_max": self.r_max,
            "rayleigh_fraction": self.rayleigh_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CodebookSpec":
        d = dict(d)
        for k in ("azimuth_range_deg", "elevation_range_deg"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class PolarCodebook:
    n_theta: int
    n_phi: int
    n_r: int
    azimuth_grid: np.ndarray  # radians, (N_theta,)
    elevation_grid: np.ndarray  # radians, (N_phi,)
    distance_grid: np.ndarray  # meters, (N_r,)
    sample_points: np.ndarray  # (K, 3), row k-1 for global index k
    codewords: np.ndarray  # (K, M) complex128, row k-1 for global index k
    content_hash: str = ""

    @property
    def size(self) -> int:
        return self.n_theta * self.n_phi * self.n_r

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.n_theta, self.n_phi, self.n_r)

    def codeword(self, t: BeamTriplet) -> np.ndarray:
        return self.codewords[triplet_to_global(t, self) - 1]


def _validate(spec: CodebookSpec, r_max: float) -> None:
    for name, (a, b) in (("azimuth", spec.azimuth_range_deg), ("elevation", spec.elevation_range_deg)):
        if not (-90.0 <= a <= 90.0 and -90.0 <= b <= 90.0):
            raise ValueError(f"{name} range must lie within [-90, 90] degrees")
        if a > b:
            raise ValueError(f"{name} range is reversed")
    if min(spec.n_theta, spec.n_phi, spec.n_r) < 1:
        raise ValueError("codebook resolutions must be positive")
    if not (0.0 < spec.r_min < r_max):
        raise ValueError(f"need 0 < r_min < r_max, got r_min={spec.r_min}, r_max={r_max}")


def _grid(lo: float, hi: float, n: int) -> np.ndarray:
    return np.array([0.5 * (lo + hi)]) if n == 1 else np.linspace(lo, hi, n)


def codebook_hash(cfg: SystemConfig, spec: CodebookSpec) -> str:
    doc = json.dumps({"system": cfg.to_dict(), "codebook": spec.to_dict()}, sort_keys=True)
    return hashlib.sha256(doc.encode("utf-8")).hexdigest()[:16]


def build_codebook(cfg: SystemConfig, geom: ArrayGeometry | None = None,
                   spec: CodebookSpec = CodebookSpec()) -> PolarCodebook:
    """Sample (azimuth, elevation, distance) and build the unit-norm codeword table.

    Angles are uniform in angle; distances are uniform in 1/r between
    ``r_min`` and ``r_max``, so the distance grid is strictly increasing.
    """
    geom = geom if geom is not None else antenna_positions(cfg)
    r_max = spec.r_max if spec.r_max is not None else spec.rayleigh_fraction * cfg.rayleigh_distance
    _validate(spec, r_max)
    theta = np.deg2rad(_grid(*spec.azimuth_range_deg, spec.n_theta))
    phi = np.deg2rad(_grid(*spec.elevation_range_deg, spec.n_phi))
    if spec.n_r == 1:
        r = np.array([spec.r_min])
    else:
        r = 1.0 / np.linspace(1.0 / spec.r_min, 1.0 / r_max, spec.n_r)

    # global index order: i outer, j middle, q inner
    T, P, R = np.meshgrid(theta, phi, r, indexing="ij")
    T, P, R = T.ravel(), P.ravel(), R.ravel()
    pts = np.stack([np.cos(P) * np.cos(T), np.cos(P) * np.sin(T), np.sin(P)], axis=1) * R[:, None]
    pts = pts + geom.center[None, :]
    table = kernels.codeword_table(geom.positions, pts, 2.0 * math.pi / cfg.wavelength)
    for a in (theta, phi, r, pts, table):
        a.setflags(write=False)
    return PolarCodebook(spec.n_theta, spec.n_phi, spec.n_r, theta, phi, r, pts, table,
                         codebook_hash(cfg, spec))


# --------------------------------------------------------------------------
# Index bijection


def _check_dims(i: int, j: int, q: int, cb) -> None:
    nt, nph, nr = _dims(cb)
    if not (1 <= i <= nt and 1 <= j <= nph and 1 <= q <= nr):
        raise ValueError(f"triplet ({i}, {j}, {q}) out of range for dims {(nt, nph, nr)}")


def _dims(cb) -> tuple[int, int, int]:
    return cb.dims if hasattr(cb, "dims") else tuple(cb)


def triplet_to_global(t, cb) -> int:
    """``k = (i-1) N_phi N_r + (j-1) N_r + q`` (1-based)."""
    i, j, q = (int(x) for x in t)
    _check_dims(i, j, q, cb)
    _, nph, nr = _dims(cb)
    return (i - 1) * nph * nr + (j - 1) * nr + q


def global_to_triplet(k: int, cb) -> BeamTriplet:
    nt, nph, nr = _dims(cb)
    k = int(k)
    if not (1 <= k <= nt * nph * nr):
        raise ValueError(f"global index {k} out of range 1..{nt * nph * nr}")
    z = k - 1
    i, rem = divmod(z, nph * nr)
    j, q = divmod(rem, nr)
    return BeamTriplet(i + 1, j + 1, q + 1)


def triplets_to_global(t: np.ndarray, dims) -> np.ndarray:
    """Vectorized bijection for an ``(..., 3)`` integer array (no range checks)."""
    _, nph, nr = _dims(dims)
    t = np.asarray(t, dtype=np.int64)
    return (t[..., 0] - 1) * nph * nr + (t[..., 1] - 1) * nr + t[..., 2]


# --------------------------------------------------------------------------
# Gain, rate, oracle


def _h(snap) -> np.ndarray:
    return snap.h if isinstance(snap, ChannelSnapshot) else np.asarray(snap)


def beam_gain(w: np.ndarray, snap) -> float:
    """``|w^H h|^2``."""
    return float(abs(np.vdot(w, _h(snap))) ** 2)


def achievable_rate(w: np.ndarray, snap, cfg: SystemConfig) -> float:
    """``log2(1 + P |w^H h|^2 / sigma^2)`` in bits/s/Hz."""
    return rate_from_gain(beam_gain(w, snap), cfg)


def rate_from_gain(gain, cfg: SystemConfig):
    if cfg.noise_variance <= 0.0:
        raise ValueError("achievable rate needs a positive noise variance")
    return np.log2(1.0 + cfg.tx_power * np.asarray(gain) / cfg.noise_variance)


def all_gains(cb: PolarCodebook, snap) -> np.ndarray:
    """Gains of every codeword, indexed by global index - 1."""
    return kernels.gain_sweep(cb.codewords, _h(snap))


class OracleResult(NamedTuple):
    triplet: BeamTriplet
    gain: float
    outage: bool


def oracle_optimal(cb: PolarCodebook, snap) -> OracleResult:
    """Noiseless exhaustive argmax of the gain; ties go to the smallest global index."""
    h = _h(snap)
    if not np.any(h):
        return OracleResult(BeamTriplet(1, 1, 1), 0.0, True)
    g = all_gains(cb, h)
    k = kernels.first_argmax(g)
    return OracleResult(global_to_triplet(k + 1, cb), float(g[k]), False)


def isolation_gains(cb: PolarCodebook, snap, gt: BeamTriplet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gains along each axis through the GT triplet, other two indices held at GT.

    Returns azimuth (N_theta,), elevation (N_phi,) and distance (N_r,) lines;
    entry ``a`` of the azimuth line is ``G(w(theta_a, phi_j*, r_q*))``.
    """
    h = _h(snap)
    i0, j0, q0 = (int(x) - 1 for x in gt)
    nt, nph, nr = cb.dims
    base = lambda i, j, q: (i * nph + j) * nr + q  # noqa: E731
    rows_i = np.array([base(a, j0, q0) for a in range(nt)], dtype=np.int64)
    rows_j = np.array([base(i0, a, q0) for a in range(nph)], dtype=np.int64)
    rows_q = np.array([base(i0, j0, a) for a in range(nr)], dtype=np.int64)
    return (
        kernels.subset_gains(cb.codewords, rows_i, h),
        kernels.subset_gains(cb.codewords, rows_j, h),
        kernels.subset_gains(cb.codewords, rows_q, h),
    )


# --------------------------------------------------------------------------
# Persistent cache

_CB_MAGIC = b"NFCB0001"


def save_codebook(cb: PolarCodebook, path: str | Path) -> None:
    header = json.dumps({
        "n_theta": cb.n_theta, "n_phi": cb.n_phi, "n_r": cb.n_r,
        "n_antennas": int(cb.codewords.shape[1]), "content_hash": cb.content_hash,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CB_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for a in (cb.azimuth_grid, cb.elevation_grid, cb.distance_grid, cb.sample_points):
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(cb.codewords, dtype="<c16").tobytes())


def load_codebook(path: str | Path) -> PolarCodebook:
    buf = Path(path).read_bytes()
    if buf[:8] != _CB_MAGIC:
        raise ValueError(f"{path} is not a codebook cache file")
    n = int.from_bytes(buf[8:16], "little")
    meta = json.loads(buf[16:16 + n])
    off = 16 + n
    nt, nph, nr, m = meta["n_theta"], meta["n_phi"], meta["n_r"], meta["n_antennas"]
    k = nt * nph * nr

    def take(count, dtype, shape):
        nonlocal off
        a = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape).copy()
        off += a.nbytes
        a.setflags(write=False)
        return a

    theta = take(nt, "<f8", (nt,))
    phi = take(nph, "<f8", (nph,))
    r = take(nr, "<f8", (nr,))
    pts = take(3 * k, "<f8", (k, 3))
    table = take(k * m, "<c16", (k, m))
    return PolarCodebook(nt, nph, nr, theta, phi, r, pts, table, meta["content_hash"])


def cached_codebook(cfg: SystemConfig, spec: CodebookSpec = CodebookSpec(),
                    cache_dir: str | Path | None = None, rebuild: bool = False) -> PolarCodebook:
    """Build the codebook, reusing ``cache_dir/codebook-<hash>.bin`` when present."""
    if cache_dir is None:
        return build_codebook(cfg, spec=spec)
    path = Path(cache_dir) / f"codebook-{codebook_hash(cfg, spec)}.bin"
    if path.exists() and not rebuild:
        return load_codebook(path)
    cb = build_codebook(cfg, spec=spec)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_codebook(cb, path)
    return cb
