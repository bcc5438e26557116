import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from nfbeam import _pykernels, kernels

needs_ext = pytest.mark.skipif(kernels._ext is None, reason="compiled extension not built")


def test_backend_flag():
    assert kernels.BACKEND in ("cython", "python")


class TestReference:
    def test_codeword_table(self, backend):
        rng = np.random.default_rng(0)
        ant = rng.normal(size=(9, 3)) * 0.05
        pts = rng.normal(size=(7, 3)) * 10
        k = 146.7
        t = kernels.codeword_table(ant, pts, k)
        d = np.linalg.norm(pts[:, None, :] - ant[None, :, :], axis=2)
        np.testing.assert_allclose(t, np.exp(-1j * k * d) / 3.0, rtol=0, atol=1e-13)

    def test_gain_sweep_and_subset(self, backend):
        rng = np.random.default_rng(1)
        tab = rng.normal(size=(11, 6)) + 1j * rng.normal(size=(11, 6))
        h = rng.normal(size=6) + 1j * rng.normal(size=6)
        ref = np.abs(np.conj(tab) @ h) ** 2
        np.testing.assert_allclose(kernels.gain_sweep(tab, h), ref, rtol=1e-13)
        rows = [10, 0, 3, 3]
        np.testing.assert_allclose(kernels.subset_gains(tab, rows, h), ref[rows], rtol=1e-13)

    @pytest.mark.parametrize("vals, expect", [
        ([1.0, 3.0, 2.0], 1),
        ([3.0, 3.0, 2.0], 0),
        ([2.0, 3.0 * (1 - 1e-13), 3.0], 1),  # within the tie tolerance
        ([2.0, 3.0 * (1 - 1e-9), 3.0], 2),
        ([0.0, 0.0], 0),
    ])
    def test_first_argmax(self, backend, vals, expect):
        assert kernels.first_argmax(np.array(vals)) == expect


@needs_ext
@given(hnp.arrays(np.float64, st.integers(1, 300), elements=st.floats(0, 1e6)))
@settings(max_examples=100, deadline=None)
def test_argmax_parity(values):
    assert kernels._ext.first_argmax(values, 1e-12) == _pykernels.first_argmax(values, 1e-12)


@needs_ext
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_sweep_parity(k, m, seed):
    rng = np.random.default_rng(seed)
    tab = np.ascontiguousarray(rng.normal(size=(k, m)) + 1j * rng.normal(size=(k, m)))
    h = rng.normal(size=m) + 1j * rng.normal(size=m)
    np.testing.assert_allclose(kernels._ext.gain_sweep(tab, h), _pykernels.gain_sweep(tab, h), rtol=1e-12)
    rows = rng.integers(0, k, size=5).astype(np.int64)
    np.testing.assert_allclose(kernels._ext.subset_gains(tab, rows, h), _pykernels.subset_gains(tab, rows, h),
                               rtol=1e-12)


@needs_ext
def test_table_parity():
    rng = np.random.default_rng(3)
    ant, pts = rng.normal(size=(16, 3)), rng.normal(size=(50, 3)) * 20
    np.testing.assert_allclose(kernels._ext.codeword_table(ant, pts, 140.0),
                               _pykernels.codeword_table(ant, pts, 140.0), rtol=0, atol=1e-14)


def test_pure_python_env_switch():
    import subprocess
    import sys

    out = subprocess.run([sys.executable, "-c", "from nfbeam import kernels; print(kernels.BACKEND)"],
                         env={"NFBEAM_PURE_PYTHON": "1", "PATH": ""}, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
