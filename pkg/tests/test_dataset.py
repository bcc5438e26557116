import json

import numpy as np
import pytest

from nfbeam.codebook import build_codebook, oracle_optimal, triplet_to_global
from nfbeam.dataset import SPLITS, DatasetConfig, assign_splits, load_dataset, make_dataset, save_dataset
from nfbeam.sysgeo import antenna_positions, random_scene


def test_splits_are_scene_disjoint(tiny_ds):
    seen = {}
    for sp in SPLITS:
        ids = set(tiny_ds.arrays["scene_id"][tiny_ds.split_indices(sp)].tolist())
        assert ids
        seen[sp] = ids
    assert not (seen["train"] & seen["val"]) and not (seen["train"] & seen["test"])
    assert not (seen["val"] & seen["test"])
    assert [tiny_ds.split_indices(sp).size for sp in SPLITS] == [12, 3, 3]


def test_assign_splits_validation():
    assert assign_splits([7, 3, 9], 1, 1, 1) == {7: "train", 3: "val", 9: "test"}
    with pytest.raises(ValueError):
        assign_splits([1, 2], 1, 1, 0)
    with pytest.raises(ValueError):
        assign_splits([1, 1, 2], 1, 1, 1)
    with pytest.raises(ValueError):
        assign_splits([1, 2, 3, 4], 1, 1, 1)


def test_too_few_scenes_rejected(tiny_ds_cfg):
    with pytest.raises(ValueError):
        make_dataset(tiny_ds_cfg, scenes=[random_scene(k, 0) for k in range(3)])
    with pytest.raises(ValueError):
        make_dataset(tiny_ds_cfg, scenes=[])


def test_labels_match_oracle(tiny_ds, tiny_ds_cfg):
    cb = build_codebook(tiny_ds_cfg.system, spec=tiny_ds_cfg.codebook)
    geom = antenna_positions(tiny_ds_cfg.system)
    for e in (0, 5, 17):
        for s in (0, 4, 6):
            h = tiny_ds.channel(e, s, geom)
            res = oracle_optimal(cb, h)
            assert tuple(tiny_ds.arrays["gt"][e, s]) == res.triplet
            assert tiny_ds.arrays["oracle_gain"][e, s] == pytest.approx(res.gain, rel=1e-12)


def test_isolation_lines_contain_oracle(tiny_ds):
    A = tiny_ds.arrays
    L_h = tiny_ds.config.L_h
    for e in range(tiny_ds.n_episodes):
        for t in range(tiny_ds.config.L_p):
            i, j, q = A["gt"][e, L_h + t]
            g = A["oracle_gain"][e, L_h + t]
            assert A["iso_az"][e, t, i - 1] == pytest.approx(g, rel=1e-12)
            assert A["iso_el"][e, t, j - 1] == pytest.approx(g, rel=1e-12)
            assert A["iso_dist"][e, t, q - 1] == pytest.approx(g, rel=1e-12)
            assert A["iso_az"][e, t].max() <= g * (1 + 1e-12)


def test_deterministic_and_roundtrip(tiny_ds, tiny_ds_cfg, tmp_path):
    again = make_dataset(tiny_ds_cfg)
    assert again.to_bytes() == tiny_ds.to_bytes()
    b1, m1 = save_dataset(tiny_ds, tmp_path / "a")
    b2, m2 = save_dataset(again, tmp_path / "b")
    assert b1.read_bytes() == b2.read_bytes() and m1.read_bytes() == m2.read_bytes()
    back = load_dataset(tmp_path / "a")
    assert back.config == tiny_ds_cfg and back.codebook_hash == tiny_ds.codebook_hash
    for k, v in tiny_ds.arrays.items():
        np.testing.assert_array_equal(back.arrays[k], v)
    geom = antenna_positions(tiny_ds_cfg.system)
    np.testing.assert_array_equal(back.channel(3, 2, geom), tiny_ds.channel(3, 2, geom))


def test_seed_changes_data(tiny_ds, tiny_ds_cfg):
    other = make_dataset(DatasetConfig(**{**tiny_ds_cfg.__dict__, "seed": 3}))
    assert other.to_bytes() != tiny_ds.to_bytes()


def test_sha_mismatch_rejected(tiny_ds, tmp_path):
    bin_path, _ = save_dataset(tiny_ds, tmp_path)
    data = bytearray(bin_path.read_bytes())
    data[-1] ^= 0xFF
    bin_path.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="does not match"):
        load_dataset(tmp_path)
    (tmp_path / "junk").mkdir()
    (tmp_path / "junk" / "dataset.bin").write_bytes(b"garbage!" * 4)
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "junk")


def test_meta_contents(tiny_ds, tmp_path):
    _, meta_path = save_dataset(tiny_ds, tmp_path)
    meta = json.loads(meta_path.read_text())
    assert meta["n_episodes"] == 18 and meta["split_counts"] == {"train": 12, "val": 3, "test": 3}
    assert len(meta["sha256"]) == 64
    assert DatasetConfig.from_dict(meta["config"]) == tiny_ds.config


def test_global_index_of_labels_in_range(tiny_ds, tiny_ds_cfg):
    dims = (tiny_ds_cfg.codebook.n_theta, tiny_ds_cfg.codebook.n_phi, tiny_ds_cfg.codebook.n_r)
    ks = {triplet_to_global(tuple(t), dims) for t in tiny_ds.arrays["gt"].reshape(-1, 3)}
    assert min(ks) >= 1 and max(ks) <= 90
