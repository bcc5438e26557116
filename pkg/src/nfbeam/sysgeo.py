"""System constants, array geometry, synthetic scenes, trajectories, GPS noise.

Coordinates: the planar array lies in the y-z plane through ``array_center``
and faces +x. Angles used elsewhere follow the same frame (azimuth in the x-y
plane from +x, elevation from the horizontal).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from nfbeam.rng import counter_rng

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class SystemConfig:
    carrier_frequency_hz: float = 7e9
    antenna_rows: int = 32  # M_z
    antenna_cols: int = 32  # M_y
    element_spacing_wavelengths: float = 0.5
    tx_power: float = 1.0
    noise_variance: float = 1e-7
    array_center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.carrier_frequency_hz <= 0:
            raise ValueError("carrier_frequency_hz must be positive")
        if self.antenna_rows < 1 or self.antenna_cols < 1:
            raise ValueError("antenna_rows and antenna_cols must be >= 1")
        if self.element_spacing_wavelengths <= 0:
            raise ValueError("element spacing must be positive")
        if self.tx_power <= 0:
            raise ValueError("tx_power must be positive")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be nonnegative")
        object.__setattr__(self, "array_center", tuple(float(c) for c in self.array_center))

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency_hz

    @property
    def spacing(self) -> float:
        """Element spacing d_y = d_z in meters."""
        return self.element_spacing_wavelengths * self.wavelength

    @property
    def n_antennas(self) -> int:
        return self.antenna_rows * self.antenna_cols

    @property
    def aperture_diagonal(self) -> float:
        d = self.spacing
        return math.hypot(self.antenna_cols * d, self.antenna_rows * d)

    @property
    def rayleigh_distance(self) -> float:
        return 2.0 * self.aperture_diagonal**2 / self.wavelength

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        d = dict(d)
        if "array_center" in d:
            d["array_center"] = tuple(d["array_center"])
        return cls(**d)


@dataclass(frozen=True)
class ArrayGeometry:
    positions: np.ndarray  # (M, 3), row-major over (m_y outer, m_z inner)
    center: np.ndarray

    @property
    def n_antennas(self) -> int:
        return self.positions.shape[0]


def antenna_positions(cfg: SystemConfig) -> ArrayGeometry:
    """Element positions of the uniform planar array.

    Element ``(m_y, m_z)`` sits at
    ``o + [0, (m_y - (M_y-1)/2) d, ((M_z-1)/2 - m_z) d]`` and is stored at row
    ``m_y * M_z + m_z``.
    """
    my = np.arange(cfg.antenna_cols, dtype=np.float64)
    mz = np.arange(cfg.antenna_rows, dtype=np.float64)
    d = cfg.spacing
    y = (my - (cfg.antenna_cols - 1) / 2.0) * d
    z = ((cfg.antenna_rows - 1) / 2.0 - mz) * d
    yy, zz = np.meshgrid(y, z, indexing="ij")
    o = np.asarray(cfg.array_center, dtype=np.float64)
    pos = np.empty((cfg.n_antennas, 3))
    pos[:, 0] = o[0]
    pos[:, 1] = o[1] + yy.ravel()
    pos[:, 2] = o[2] + zz.ravel()
    pos.setflags(write=False)
    return ArrayGeometry(positions=pos, center=o)


# --------------------------------------------------------------------------
# Scenes


@dataclass(frozen=True)
class Bounds:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def contains(self, p: Sequence[float], tol: float = 0.0) -> bool:
        return all(self.lo[k] - tol <= p[k] <= self.hi[k] + tol for k in range(3))

    def clip(self, pts: np.ndarray) -> np.ndarray:
        return np.clip(pts, np.asarray(self.lo), np.asarray(self.hi))


@dataclass(frozen=True)
class Facet:
    """Planar rectangular reflector ``origin + a*edge_u + b*edge_v``, a, b in [0, 1]."""

    origin: tuple[float, float, float]
    edge_u: tuple[float, float, float]
    edge_v: tuple[float, float, float]
    reflection: complex = 0.5 + 0j

    def __post_init__(self):
        mag = abs(complex(self.reflection))
        if not (0.0 < mag <= 1.0):
            raise ValueError(f"reflection coefficient magnitude must be in (0, 1], got {mag}")
        if np.linalg.norm(np.cross(self.edge_u, self.edge_v)) == 0.0:
            raise ValueError("facet edges are degenerate")

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.edge_u, self.edge_v)
        return n / np.linalg.norm(n)

    def corners(self) -> np.ndarray:
        o, u, v = (np.asarray(a, dtype=float) for a in (self.origin, self.edge_u, self.edge_v))
        return np.array([o, o + u, o + u + v, o + v])


@dataclass(frozen=True)
class Box:
    """Axis-aligned blocker."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        if any(self.hi[k] <= self.lo[k] for k in range(3)):
            raise ValueError("box must have positive extent on every axis")

    def corners(self) -> np.ndarray:
        lo, hi = self.lo, self.hi
        return np.array(
            [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])],
            dtype=float,
        )


@dataclass(frozen=True)
class SceneConfig:
    scene_id: int = 0
    reflectors: tuple[Facet, ...] = ()
    blockers: tuple[Box, ...] = ()
    bounds: Bounds = Bounds((6.0, -14.0, -4.0), (36.0, 14.0, 12.0))

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "bounds": {"lo": list(self.bounds.lo), "hi": list(self.bounds.hi)},
            "reflectors": [
                {
                    "origin": list(f.origin),
                    "edge_u": list(f.edge_u),
                    "edge_v": list(f.edge_v),
                    "reflection": [complex(f.reflection).real, complex(f.reflection).imag],
                }
                for f in self.reflectors
            ],
            "blockers": [{"lo": list(b.lo), "hi": list(b.hi)} for b in self.blockers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(
            scene_id=int(d.get("scene_id", 0)),
            bounds=Bounds(tuple(d["bounds"]["lo"]), tuple(d["bounds"]["hi"])),
            reflectors=tuple(
                Facet(
                    tuple(f["origin"]),
                    tuple(f["edge_u"]),
                    tuple(f["edge_v"]),
                    complex(*f["reflection"]),
                )
                for f in d.get("reflectors", [])
            ),
            blockers=tuple(Box(tuple(b["lo"]), tuple(b["hi"])) for b in d.get("blockers", [])),
        )


@dataclass(frozen=True)
class SceneGenConfig:
    """Parameters of the random urban-canyon scene family."""

    bounds_lo: tuple[float, float, float] = (6.0, -14.0, -4.0)
    bounds_hi: tuple[float, float, float] = (36.0, 14.0, 12.0)
    ground_z: float = -6.0
    ground_reflection: float = 0.3
    wall_offset_range: tuple[float, float] = (15.0, 22.0)
    wall_reflection_range: tuple[float, float] = (0.4, 0.8)
    n_blockers_range: tuple[int, int] = (1, 2)
    blocker_x_range: tuple[float, float] = (3.0, 5.0)
    blocker_depth: float = 1.5
    blocker_width_range: tuple[float, float] = (1.0, 2.5)
    blocker_height_range: tuple[float, float] = (-2.0, 1.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGenConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def random_scene(scene_id: int, seed: int, gen: SceneGenConfig = SceneGenConfig()) -> SceneConfig:
    """Draw a canyon scene: ground, two side walls and a few near-array blockers."""
    rng = counter_rng(seed, "scene", scene_id)
    lo, hi = gen.bounds_lo, gen.bounds_hi
    x_far = hi[0] + 4.0
    height = hi[2] - gen.ground_z + 4.0
    reflectors = [
        Facet(
            (0.0, lo[1] - 4.0, gen.ground_z),
            (x_far, 0.0, 0.0),
            (0.0, hi[1] - lo[1] + 8.0, 0.0),
            complex(gen.ground_reflection, 0.0),
        )
    ]
    for side in (+1.0, -1.0):
        w = side * rng.uniform(*gen.wall_offset_range)
        mag = rng.uniform(*gen.wall_reflection_range)
        phase = rng.uniform(-math.pi, math.pi)
        reflectors.append(
            Facet(
                (0.0, w, gen.ground_z),
                (x_far, 0.0, 0.0),
                (0.0, 0.0, height),
                complex(mag * math.cos(phase), mag * math.sin(phase)),
            )
        )
    blockers = []
    n_blk = int(rng.integers(gen.n_blockers_range[0], gen.n_blockers_range[1] + 1))
    for _ in range(n_blk):
        x0 = rng.uniform(*gen.blocker_x_range)
        width = rng.uniform(*gen.blocker_width_range)
        yc = rng.uniform(-0.5 * x0, 0.5 * x0)
        top = rng.uniform(*gen.blocker_height_range)
        blockers.append(
            Box(
                (x0, yc - width / 2, gen.ground_z),
                (x0 + gen.blocker_depth, yc + width / 2, top),
            )
        )
    return SceneConfig(
        scene_id=scene_id,
        reflectors=tuple(reflectors),
        blockers=tuple(blockers),
        bounds=Bounds(tuple(lo), tuple(hi)),
    )


# --------------------------------------------------------------------------
# Trajectories


class TrajectoryMode(enum.IntEnum):
    STRAIGHT = 0
    ZIGZAG = 1
    STREET_PATROL = 2
    HOVER = 3
    ARC_TURN = 4

    @property
    def label(self) -> str:
        return {
            TrajectoryMode.STRAIGHT: "Straight",
            TrajectoryMode.ZIGZAG: "Zigzag",
            TrajectoryMode.STREET_PATROL: "Street Patrol",
            TrajectoryMode.HOVER: "Hover",
            TrajectoryMode.ARC_TURN: "Arc Turn",
        }[self]


@dataclass(frozen=True)
class ModeParams:
    speed: float
    leg_length: float = 0.0  # zigzag leg / patrol segment length, m
    turn_radius: float = 0.0  # arc turn radius, m
    max_climb_deg: float = 10.0


DEFAULT_MODE_PARAMS: dict[TrajectoryMode, ModeParams] = {
    TrajectoryMode.STRAIGHT: ModeParams(speed=5.0),
    TrajectoryMode.ZIGZAG: ModeParams(speed=4.0, leg_length=2.0),
    TrajectoryMode.STREET_PATROL: ModeParams(speed=3.0, leg_length=5.0),
    TrajectoryMode.HOVER: ModeParams(speed=0.0),
    TrajectoryMode.ARC_TURN: ModeParams(speed=3.0, turn_radius=5.0),
}


def mode_params_to_dict(params: dict[TrajectoryMode, ModeParams]) -> dict:
    return {m.name: asdict(p) for m, p in sorted(params.items())}


def mode_params_from_dict(d: dict) -> dict[TrajectoryMode, ModeParams]:
    return {TrajectoryMode[k]: ModeParams(**v) for k, v in d.items()}


def _horizontal_perp(d: np.ndarray) -> np.ndarray:
    p = np.array([-d[1], d[0], 0.0])
    n = np.linalg.norm(p)
    return p / n if n > 0 else np.array([0.0, 1.0, 0.0])


def generate_trajectory(
    mode: TrajectoryMode,
    start: Sequence[float],
    n_slots: int,
    dt: float,
    seed: int,
    *,
    bounds: Bounds | None = None,
    params: ModeParams | None = None,
    heading: Sequence[float] | None = None,
    index: int = 0,
) -> np.ndarray:
    """Positions of a UAV flying ``mode`` for ``n_slots`` slots of length ``dt``.

    Returns an ``(n_slots, 3)`` array. Points are clipped into ``bounds``; since
    box projection is non-expansive the per-slot displacement never exceeds
    ``speed * dt``. ``heading`` (unit vector) overrides the seeded direction.
    """
    if n_slots < 2:
        raise ValueError("n_slots must be >= 2")
    if dt <= 0:
        raise ValueError("dt must be positive")
    mode = TrajectoryMode(mode)
    start = np.asarray(start, dtype=np.float64)
    if bounds is not None and not bounds.contains(start):
        raise ValueError(f"start {start.tolist()} is outside scene bounds")
    p = params or DEFAULT_MODE_PARAMS[mode]
    rng = counter_rng(seed, f"trajectory/{mode.name}", index)

    az = rng.uniform(-math.pi, math.pi)
    climb = math.radians(rng.uniform(-p.max_climb_deg, p.max_climb_deg))
    turn_sign = 1.0 if rng.random() < 0.5 else -1.0
    if heading is None:
        d = np.array([math.cos(climb) * math.cos(az), math.cos(climb) * math.sin(az), math.sin(climb)])
    else:
        d = np.asarray(heading, dtype=np.float64)
        d = d / np.linalg.norm(d)
    step = p.speed * dt

    pts = np.empty((n_slots, 3))
    pts[0] = start
    if mode == TrajectoryMode.HOVER or step == 0.0:
        pts[:] = start
    elif mode == TrajectoryMode.STRAIGHT:
        pts = start + np.arange(n_slots)[:, None] * step * d
    elif mode == TrajectoryMode.ZIGZAG:
        # 45 degree legs either side of the base direction
        n = _horizontal_perp(d)
        leg_slots = max(1, math.ceil(p.leg_length / step - 1e-12))
        sign = turn_sign
        for k in range(1, n_slots):
            if (k - 1) > 0 and (k - 1) % leg_slots == 0:
                sign = -sign
            v = (d + sign * n) / math.sqrt(2.0)
            pts[k] = pts[k - 1] + step * v
    elif mode == TrajectoryMode.STREET_PATROL:
        leg_slots = max(1, math.ceil(p.leg_length / step - 1e-12))
        v = np.array([d[0], d[1], 0.0])
        v = v / np.linalg.norm(v) if np.linalg.norm(v) > 0 else np.array([1.0, 0.0, 0.0])
        for k in range(1, n_slots):
            if (k - 1) > 0 and (k - 1) % leg_slots == 0:
                s = 1.0 if rng.random() < 0.5 else -1.0
                v = s * np.array([-v[1], v[0], 0.0])
            pts[k] = pts[k - 1] + step * v
    elif mode == TrajectoryMode.ARC_TURN:
        radius = p.turn_radius
        omega = p.speed / radius * turn_sign
        h = np.array([d[0], d[1], 0.0])
        h = h / np.linalg.norm(h) if np.linalg.norm(h) > 0 else np.array([1.0, 0.0, 0.0])
        n = np.array([-h[1], h[0], 0.0]) * turn_sign
        centre = start + radius * n
        t = np.arange(n_slots) * dt
        ang = omega * t
        # rotate (start - centre) about z by ang
        r0 = start - centre
        c, s = np.cos(ang), np.sin(ang)
        pts = np.stack(
            [centre[0] + c * r0[0] - s * r0[1], centre[1] + s * r0[0] + c * r0[1], np.full_like(t, start[2])],
            axis=1,
        )
    if bounds is not None:
        pts = bounds.clip(pts)
    return pts


# --------------------------------------------------------------------------
# GPS


@dataclass(frozen=True)
class GpsNoiseModel:
    sigma_gps: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.sigma_gps < 0:
            raise ValueError("sigma_gps must be nonnegative")


def apply_gps_noise(truth: np.ndarray, model: GpsNoiseModel, index: int = 0) -> np.ndarray:
    """Add i.i.d. zero-mean Gaussian noise of std ``sigma_gps`` to each coordinate."""
    truth = np.asarray(truth, dtype=np.float64)
    if model.sigma_gps == 0.0:
        return truth.copy()
    rng = counter_rng(model.seed, "gps", index)
    return truth + rng.normal(0.0, model.sigma_gps, size=truth.shape)


# --------------------------------------------------------------------------
# Serialization


def write_trajectory_jsonl(path: str | Path, positions: Iterable[Sequence[float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for slot, p in enumerate(positions):
            fh.write(json.dumps({"slot": slot, "x": float(p[0]), "y": float(p[1]), "z": float(p[2])}) + "\n")


def read_trajectory_jsonl(path: str | Path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    rows.sort(key=lambda r: r["slot"])
    return np.array([[r["x"], r["y"], r["z"]] for r in rows], dtype=np.float64)


def save_scene_json(path: str | Path, scenes: Sequence[SceneConfig],
                    modes: dict[TrajectoryMode, ModeParams] | None = None) -> None:
    doc = {
        "scenes": [s.to_dict() for s in scenes],
        "modes": mode_params_to_dict(modes or DEFAULT_MODE_PARAMS),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")


def load_scene_json(path: str | Path) -> tuple[list[SceneConfig], dict[TrajectoryMode, ModeParams]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    scenes = [SceneConfig.from_dict(s) for s in doc.get("scenes", [])]
    modes = mode_params_from_dict(doc["modes"]) if "modes" in doc else dict(DEFAULT_MODE_PARAMS)
    return scenes, modes
