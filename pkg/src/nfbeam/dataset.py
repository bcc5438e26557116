"""Episode generation, ground-truth labeling and the binary dataset container.

Each episode is ``L_h + L_p`` consecutive slots of one UAV flight in one scene.
Channels are not stored: every slot keeps its propagation paths (kind, complex
gain, source point, bounce point) and the exact ``h`` is re-synthesized from
them on demand, which is bit-identical to the channel used for labeling.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from nfbeam import kernels
from nfbeam.channel import ChannelSnapshot, PathKind, trace_paths
from nfbeam.codebook import CodebookSpec, PolarCodebook, build_codebook, global_to_triplet
from nfbeam.rng import counter_rng
from nfbeam.sysgeo import (
    DEFAULT_MODE_PARAMS,
    ArrayGeometry,
    GpsNoiseModel,
    ModeParams,
    SceneConfig,
    SceneGenConfig,
    SystemConfig,
    TrajectoryMode,
    antenna_positions,
    apply_gps_noise,
    generate_trajectory,
    mode_params_from_dict,
    mode_params_to_dict,
    random_scene,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
_DS_MAGIC = b"NFDS0001"


@dataclass(frozen=True)
class DatasetConfig:
    n_train_scenes: int = 20
    n_val_scenes: int = 4
    n_test_scenes: int = 4
    train_episodes_per_scene: int = 100
    eval_episodes_per_scene: int = 50
    L_h: int = 10
    L_p: int = 10
    dt: float = 0.1
    sigma_gps: float = 0.5
    start_lo: tuple[float, float, float] = (10.0, -10.0, -2.0)
    start_hi: tuple[float, float, float] = (30.0, 10.0, 8.0)
    modes: tuple[int, ...] = tuple(int(m) for m in TrajectoryMode)
    seed: int = 0
    system: SystemConfig = field(default_factory=SystemConfig)
    codebook: CodebookSpec = field(default_factory=CodebookSpec)
    scene_gen: SceneGenConfig = field(default_factory=SceneGenConfig)

    @property
    def n_slots(self) -> int:
        return self.L_h + self.L_p

    def to_dict(self) -> dict:
        d = asdict(self)
        d["system"] = self.system.to_dict()
        d["codebook"] = self.codebook.to_dict()
        d["scene_gen"] = self.scene_gen.to_dict()
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "system" in d:
            d["system"] = SystemConfig.from_dict(d["system"])
        if "codebook" in d:
            d["codebook"] = CodebookSpec.from_dict(d["codebook"])
        if "scene_gen" in d:
            d["scene_gen"] = SceneGenConfig.from_dict(d["scene_gen"])
        for k in ("start_lo", "start_hi", "modes"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Dataset:
    """Column-oriented episode store; index ``e`` is the episode, ``s`` the slot."""

    config: DatasetConfig
    scenes: list[SceneConfig]
    mode_params: dict[TrajectoryMode, ModeParams]
    scene_split: dict[int, str]
    codebook_hash: str
    arrays: dict[str, np.ndarray]

    # ---- convenience views -------------------------------------------
    @property
    def n_episodes(self) -> int:
        return int(self.arrays["scene_id"].shape[0])

    def split_indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return np.flatnonzero(self.arrays["split"] == SPLITS.index(split))

    def scene(self, scene_id: int) -> SceneConfig:
        return self._scene_map[int(scene_id)]

    @property
    def _scene_map(self) -> dict[int, SceneConfig]:
        return {s.scene_id: s for s in self.scenes}

    def channel(self, e: int, s: int, geom: ArrayGeometry) -> np.ndarray:
        return synth_from_arrays(self.arrays, e, s, geom, self.config.system)

    def snapshot(self, e: int, s: int, geom: ArrayGeometry) -> ChannelSnapshot:
        h = self.channel(e, s, geom)
        return ChannelSnapshot(h, (), s * self.config.dt, not bool(self.arrays["los"][e, s]))

    def future_channels(self, e: int, geom: ArrayGeometry) -> np.ndarray:
        L_h = self.config.L_h
        return np.stack([self.channel(e, L_h + t, geom) for t in range(self.config.L_p)])

    def to_bytes(self) -> bytes:
        return dataset_to_bytes(self)

    def meta(self) -> dict:
        return {
            "format": "nfbeam-dataset",
            "version": 1,
            "config": self.config.to_dict(),
            "codebook_hash": self.codebook_hash,
            "scenes": [s.to_dict() for s in self.scenes],
            "modes": mode_params_to_dict(self.mode_params),
            "scene_split": {str(k): v for k, v in sorted(self.scene_split.items())},
            "n_episodes": self.n_episodes,
            "split_counts": {sp: int(self.split_indices(sp).size) for sp in SPLITS},
            "nlos_episodes": int(self.arrays["nlos"].sum()),
            "layout": {k: {"dtype": v.dtype.str, "shape": list(v.shape)} for k, v in sorted(self.arrays.items())},
        }


def synth_from_arrays(arrays: dict, e: int, s: int, geom: ArrayGeometry, cfg: SystemConfig) -> np.ndarray:
    """Channel of slot ``(e, s)`` from its stored paths."""
    n = int(arrays["n_paths"][e, s])
    k = 2.0 * np.pi / cfg.wavelength
    h = np.zeros(geom.n_antennas, dtype=np.complex128)
    for p in range(n):
        src = arrays["path_source"][e, s, p]
        lengths = np.linalg.norm(src[None, :] - geom.positions, axis=1)
        h += complex(arrays["path_gain"][e, s, p]) * np.exp(-1j * k * lengths)
    return h


def assign_splits(scene_ids: Sequence[int], n_train: int, n_val: int, n_test: int) -> dict[int, str]:
    """Scene-disjoint split in listed order."""
    ids = list(scene_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("scene ids must be distinct")
    if len(ids) < 3 or min(n_train, n_val, n_test) < 1:
        raise ValueError("need at least one scene per split (>= 3 scenes)")
    if n_train + n_val + n_test != len(ids):
        raise ValueError("split sizes must cover every scene exactly once")
    out = {}
    for k, sid in enumerate(ids):
        out[sid] = "train" if k < n_train else ("val" if k < n_train + n_val else "test")
    return out


def _label_slots(cb: PolarCodebook, H: np.ndarray, table_conj: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Oracle global index (0-based) and gain for each row of ``H`` via one batched sweep."""
    G = np.abs(table_conj @ H.T) ** 2  # (K, S)
    idx = np.zeros(H.shape[0], dtype=np.int64)
    gain = np.zeros(H.shape[0])
    for s in range(H.shape[0]):
        if not np.any(H[s]):
            continue
        # exact per-slot gains for the leading candidates keep ties consistent with the oracle
        col = np.ascontiguousarray(G[:, s])
        top = np.flatnonzero(col >= col.max() * (1 - 1e-9))
        exact = kernels.subset_gains(cb.codewords, top, H[s])
        full = np.full(col.shape, -np.inf)
        full[top] = exact
        k = kernels.first_argmax(np.where(np.isfinite(full), full, -1.0))
        idx[s] = k
        gain[s] = full[k]
    return idx, gain


def make_dataset(cfg: DatasetConfig = DatasetConfig(), scenes: Sequence[SceneConfig] | None = None,
                 mode_params: dict[TrajectoryMode, ModeParams] | None = None,
                 codebook: PolarCodebook | None = None) -> Dataset:
    """Generate and label every episode.

    ``scenes`` defaults to ``n_train + n_val + n_test`` random canyon scenes
    with ids ``0..``; they are assigned to splits in order.
    """
    n_sc = cfg.n_train_scenes + cfg.n_val_scenes + cfg.n_test_scenes
    if scenes is None:
        scenes = [random_scene(k, cfg.seed, cfg.scene_gen) for k in range(n_sc)]
    scenes = list(scenes)
    if not scenes:
        raise ValueError("scene list is empty")
    if len(scenes) != n_sc:
        raise ValueError(f"expected {n_sc} scenes, got {len(scenes)}")
    split_of = assign_splits([s.scene_id for s in scenes], cfg.n_train_scenes, cfg.n_val_scenes, cfg.n_test_scenes)
    mode_params = dict(mode_params or DEFAULT_MODE_PARAMS)
    sys_cfg = cfg.system
    geom = antenna_positions(sys_cfg)
    cb = codebook if codebook is not None else build_codebook(sys_cfg, geom, cfg.codebook)
    if cb.dims != (cfg.codebook.n_theta, cfg.codebook.n_phi, cfg.codebook.n_r):
        raise ValueError("codebook dimensions do not match the dataset config")

    plan = []
    for sc in scenes:
        sp = split_of[sc.scene_id]
        n_ep = cfg.train_episodes_per_scene if sp == "train" else cfg.eval_episodes_per_scene
        plan.extend((sc, sp) for _ in range(n_ep))
    E, S, L_h, L_p = len(plan), cfg.n_slots, cfg.L_h, cfg.L_p
    P = 1 + max(len(sc.reflectors) for sc in scenes)
    nt, nph, nr = cb.dims
    A = {
        "scene_id": np.zeros(E, np.int32),
        "mode": np.zeros(E, np.int32),
        "split": np.zeros(E, np.int8),
        "nlos": np.zeros(E, np.int8),
        "true_pos": np.zeros((E, S, 3)),
        "noisy_pos": np.zeros((E, S, 3)),
        "gt": np.zeros((E, S, 3), np.int32),
        "los": np.zeros((E, S), np.int8),
        "oracle_gain": np.zeros((E, S)),
        "n_paths": np.zeros((E, S), np.int8),
        "path_kind": np.full((E, S, P), -1, np.int8),
        "path_gain": np.zeros((E, S, P), np.complex128),
        "path_source": np.zeros((E, S, P, 3)),
        "path_bounce": np.full((E, S, P, 3), np.nan),
        "iso_az": np.zeros((E, L_p, nt)),
        "iso_el": np.zeros((E, L_p, nph)),
        "iso_dist": np.zeros((E, L_p, nr)),
    }
    table_conj = np.conj(cb.codewords)
    gps = GpsNoiseModel(cfg.sigma_gps, cfg.seed)
    lo, hi = np.asarray(cfg.start_lo), np.asarray(cfg.start_hi)
    for e, (sc, sp) in enumerate(plan):
        rng = counter_rng(cfg.seed, "episode", e)
        mode = TrajectoryMode(cfg.modes[int(rng.integers(len(cfg.modes)))])
        start = rng.uniform(lo, hi)
        truth = generate_trajectory(mode, start, S, cfg.dt, cfg.seed, bounds=sc.bounds,
                                    params=mode_params[mode], index=e)
        A["scene_id"][e] = sc.scene_id
        A["mode"][e] = int(mode)
        A["split"][e] = SPLITS.index(sp)
        A["true_pos"][e] = truth
        A["noisy_pos"][e] = apply_gps_noise(truth, gps, index=e)
        for s in range(S):
            paths = trace_paths(sc, truth[s], geom, sys_cfg)
            A["n_paths"][e, s] = len(paths)
            A["los"][e, s] = any(p.kind == PathKind.LOS for p in paths)
            for k, p in enumerate(paths):
                A["path_kind"][e, s, k] = int(p.kind)
                A["path_gain"][e, s, k] = p.gain
                A["path_source"][e, s, k] = p.source
                if p.bounce_point is not None:
                    A["path_bounce"][e, s, k] = p.bounce_point
        H = np.stack([synth_from_arrays(A, e, s, geom, sys_cfg) for s in range(S)])
        idx, gain = _label_slots(cb, H, table_conj)
        for s in range(S):
            A["gt"][e, s] = global_to_triplet(int(idx[s]) + 1, cb) if gain[s] > 0 else (1, 1, 1)
        A["oracle_gain"][e] = gain
        A["nlos"][e] = int(not np.all(A["los"][e, L_h:]))
        for t in range(L_p):
            s = L_h + t
            if gain[s] <= 0:
                continue
            i0, j0, q0 = (int(x) - 1 for x in A["gt"][e, s])
            A["iso_az"][e, t] = kernels.subset_gains(cb.codewords, (np.arange(nt) * nph + j0) * nr + q0, H[s])
            A["iso_el"][e, t] = kernels.subset_gains(cb.codewords, (i0 * nph + np.arange(nph)) * nr + q0, H[s])
            A["iso_dist"][e, t] = kernels.subset_gains(cb.codewords, (i0 * nph + j0) * nr + np.arange(nr), H[s])
        if (e + 1) % 500 == 0:
            log.info("labeled %d/%d episodes", e + 1, E)
    return Dataset(cfg, scenes, mode_params, split_of, cb.content_hash, A)


# --------------------------------------------------------------------------
# Container: magic, u64 directory length, JSON directory, raw little-endian arrays


def dataset_to_bytes(ds: Dataset) -> bytes:
    directory, blobs, off = [], [], 0
    for name in sorted(ds.arrays):
        a = ds.arrays[name]
        arr = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))
        b = arr.tobytes()
        directory.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": off})
        blobs.append(b)
        off += len(b)
    head = json.dumps(directory, sort_keys=True).encode("utf-8")
    return _DS_MAGIC + len(head).to_bytes(8, "little") + head + b"".join(blobs)


def save_dataset(ds: Dataset, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = dataset_to_bytes(ds)
    bin_path = out / "dataset.bin"
    bin_path.write_bytes(data)
    meta = ds.meta()
    meta["sha256"] = hashlib.sha256(data).hexdigest()
    meta_path = out / "dataset.meta.json"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return bin_path, meta_path


def load_dataset(path: str | Path) -> Dataset:
    """Load from a directory holding ``dataset.bin`` + ``dataset.meta.json`` (or the .bin path)."""
    p = Path(path)
    if p.is_dir():
        p = p / "dataset.bin"
    data = p.read_bytes()
    if data[:8] != _DS_MAGIC:
        raise ValueError(f"{p} is not a dataset file")
    meta = json.loads((p.parent / "dataset.meta.json").read_text(encoding="utf-8"))
    if meta.get("sha256") and meta["sha256"] != hashlib.sha256(data).hexdigest():
        raise ValueError("dataset.bin does not match dataset.meta.json")
    n = int.from_bytes(data[8:16], "little")
    directory = json.loads(data[16:16 + n])
    base = 16 + n
    arrays = {}
    for row in directory:
        count = int(np.prod(row["shape"])) if row["shape"] else 1
        a = np.frombuffer(data, dtype=row["dtype"], count=count, offset=base + row["offset"])
        arrays[row["name"]] = a.reshape(row["shape"]).astype(np.dtype(row["dtype"]).newbyteorder("="))
    return Dataset(
        config=DatasetConfig.from_dict(meta["config"]),
        scenes=[SceneConfig.from_dict(s) for s in meta["scenes"]],
        mode_params=mode_params_from_dict(meta["modes"]),
        scene_split={int(k): v for k, v in meta["scene_split"].items()},
        codebook_hash=meta["codebook_hash"],
        arrays=arrays,
    )
