import numpy as np
import pytest

from nfbeam import _pykernels, kernels
from nfbeam.codebook import CodebookSpec, build_codebook
from nfbeam.sysgeo import SystemConfig, antenna_positions

BACKENDS = ["python"] + (["cython"] if kernels._ext is not None else [])


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run the test once per available kernel backend."""
    impl = _pykernels if request.param == "python" else kernels._ext
    monkeypatch.setattr(kernels, "_impl", impl)
    return request.param


@pytest.fixture(scope="session")
def small_cfg():
    # 8x8 array: Rayleigh distance ~2.7 m, so distance rings need a custom r_max
    return SystemConfig(antenna_rows=8, antenna_cols=8, noise_variance=1e-7)


@pytest.fixture(scope="session")
def small_spec():
    return CodebookSpec(n_theta=6, n_phi=5, n_r=3, r_min=2.0, r_max=30.0)


@pytest.fixture(scope="session")
def small_cb(small_cfg, small_spec):
    return build_codebook(small_cfg, spec=small_spec)


@pytest.fixture(scope="session")
def cfg16():
    return SystemConfig(antenna_rows=16, antenna_cols=16)


@pytest.fixture(scope="session")
def cb16(cfg16):
    return build_codebook(cfg16)


@pytest.fixture(scope="session")
def geom16(cfg16):
    return antenna_positions(cfg16)


def random_channel(rng: np.random.Generator, m: int) -> np.ndarray:
    return (rng.normal(size=m) + 1j * rng.normal(size=m)) * 1e-4


@pytest.fixture(scope="session")
def tiny_ds_cfg(small_cfg, small_spec):
    from nfbeam.dataset import DatasetConfig

    return DatasetConfig(n_train_scenes=2, n_val_scenes=1, n_test_scenes=1, train_episodes_per_scene=6,
                         eval_episodes_per_scene=3, L_h=4, L_p=3, system=small_cfg, codebook=small_spec, seed=2)


@pytest.fixture(scope="session")
def tiny_ds(tiny_ds_cfg):
    from nfbeam.dataset import make_dataset

    return make_dataset(tiny_ds_cfg)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
