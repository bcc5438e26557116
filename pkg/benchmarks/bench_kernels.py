"""Time the compiled kernels against the numpy fallback on default-size inputs.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]
"""

import argparse
import json
import sys
import timeit

import numpy as np

from nfbeam import _pykernels, kernels
from nfbeam.codebook import build_codebook
from nfbeam.sysgeo import SystemConfig, antenna_positions


def workloads():
    cfg = SystemConfig()
    geom = antenna_positions(cfg)
    cb = build_codebook(cfg, geom)
    rng = np.random.default_rng(0)
    h = (rng.normal(size=cfg.n_antennas) + 1j * rng.normal(size=cfg.n_antennas)) * 1e-4
    rows = rng.choice(cb.size, 125, replace=False).astype(np.int64)
    gains = np.abs(np.conj(cb.codewords) @ h) ** 2
    k = 2 * np.pi / cfg.wavelength
    return {
        "codeword_table 4000x1024": lambda m: m.codeword_table(geom.positions, cb.sample_points, k),
        "gain_sweep 4000x1024": lambda m: m.gain_sweep(cb.codewords, h),
        "subset_gains 125 rows": lambda m: m.subset_gains(cb.codewords, rows, h),
        "first_argmax 4000": lambda m: m.first_argmax(gains, kernels.TIE_RTOL),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    if kernels._ext is None:
        print("compiled extension not available; build it with `pip install -e .`", file=sys.stderr)
        return 1
    results = []
    print(f"{'kernel':<28}{'cython ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, fn in workloads().items():
        number = 1 if name.startswith(("codeword", "gain")) else 200
        t = {}
        for label, mod in (("cython", kernels._ext), ("numpy", _pykernels)):
            fn(mod)  # warm up
            t[label] = min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat)) / number * 1e3
        results.append({"kernel": name, "cython_ms": t["cython"], "numpy_ms": t["numpy"],
                        "speedup": t["numpy"] / t["cython"]})
        print(f"{name:<28}{t['cython']:>12.3f}{t['numpy']:>12.3f}{t['numpy'] / t['cython']:>9.2f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
