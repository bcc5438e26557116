"""Command-line entry point: ``nfbeam <verb> [options]``.

Every verb writes into ``--out`` and exits 0 on success. Failures print a
JSON object ``{"error": ..., "message": ...}`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from nfbeam.experiment import (
    PREDICTOR_METHODS,
    ExperimentConfig,
    evaluate,
    format_table,
    generate,
    load_config,
    load_model,
    read_metrics_csv,
    train,
    write_report,
)

log = logging.getLogger("nfbeam")

BASELINES = ("exhaustive", "hierarchical", "two-stage")


def _parse_snr(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad SNR list {text!r}") from exc


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "budget", None) is not None:
        cfg = replace(cfg, budget=args.budget)
    if getattr(args, "snr_db", None) is not None:
        cfg = replace(cfg, snr_db=args.snr_db)
    return cfg


def _dump_config(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_data(path: str):
    from nfbeam.dataset import load_dataset

    p = Path(path)
    return load_dataset(p / "dataset.bin" if p.is_dir() else p)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    _dump_config(cfg, out)
    ds = generate(cfg, out)
    print(json.dumps({"episodes": ds.n_episodes, "codebook_hash": ds.codebook_hash}))
    return 0


def cmd_build_codebook(args) -> int:
    from nfbeam.codebook import cached_codebook, codebook_hash

    cfg = _config(args)
    d = cfg.dataset
    cb = cached_codebook(d.system, d.codebook, args.out, rebuild=args.rebuild)
    print(json.dumps({"size": cb.size, "content_hash": cb.content_hash,
                      "path": str(Path(args.out) / f"codebook-{codebook_hash(d.system, d.codebook)}.bin")}))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = _load_data(args.data)
    out = Path(args.out)
    _dump_config(cfg, out)
    mods = None if args.modalities is None else tuple(m for m in args.modalities.split(",") if m)
    _, curve = train(cfg, ds, out, modalities=mods)
    best = min(curve, key=lambda r: r["val_total"])
    print(json.dumps({"epochs": len(curve), "best_epoch": best["epoch"], "best_val_loss": best["val_total"]}))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    ds = _load_data(args.data)
    model, header = load_model(args.checkpoint, ds)
    modes = (args.refine,) if args.refine else PREDICTOR_METHODS
    methods = list(modes) + ([] if args.no_baselines else list(BASELINES))
    rep = evaluate(cfg, ds, model, methods, modalities=header["extra"].get("modalities"))
    out = Path(args.out)
    _dump_config(cfg, out)
    write_report(out, rep)
    print(format_table(rep.rows))
    return 0


def cmd_sweep_baselines(args) -> int:
    cfg = _config(args)
    ds = _load_data(args.data)
    rep = evaluate(cfg, ds, None, list(BASELINES))
    out = Path(args.out)
    _dump_config(cfg, out)
    write_report(out, rep)
    print(format_table(rep.rows))
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    print(format_table(read_metrics_csv(out / "metrics.csv")))
    detail = out / "metrics_detail.json"
    if detail.exists():
        print(detail.read_text(encoding="utf-8").rstrip())
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nfbeam", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p, data=False):
        p.add_argument("--config", help="JSON file merged onto the defaults")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", required=True, help="dataset directory or dataset.bin")
        return p

    p = common(sub.add_parser("gen-data", help="generate and label the episode corpus"))
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("build-codebook", help="build (or reuse) the cached codebook"))
    p.add_argument("--rebuild", action="store_true", help="ignore an existing cache file")
    p.set_defaults(func=cmd_build_codebook)

    p = common(sub.add_parser("train", help="train the beam predictor"), data=True)
    p.add_argument("--modalities", help="comma-separated subset of image,lidar,mode ('' for GPS only)")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint and the baselines"), data=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--budget", type=int)
    p.add_argument("--refine", choices=PREDICTOR_METHODS)
    p.add_argument("--snr-db", type=_parse_snr)
    p.add_argument("--no-baselines", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("sweep-baselines", help="evaluate beam-training baselines only"), data=True)
    p.add_argument("--budget", type=int)
    p.add_argument("--snr-db", type=_parse_snr)
    p.set_defaults(func=cmd_sweep_baselines)

    p = sub.add_parser("report", help="print metrics from an eval directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # reported as JSON for scripted callers
        log.debug("command failed", exc_info=True)
        json.dump({"error": type(exc).__name__, "message": str(exc), "verb": args.verb}, sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
