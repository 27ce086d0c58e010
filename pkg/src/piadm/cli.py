"""Command-line entry point: ``piadm run`` and ``piadm sweep``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .harness import ExperimentConfig, run, scaling_exponents, sweep_dimension, write_record

log = logging.getLogger("piadm")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="piadm", description="Parallel-in-time diffusion sampling experiments")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one configured experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--mode", choices=["exact", "paper_verbatim"])
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int)
    r.add_argument("--out")

    s = sub.add_parser("sweep", help="dimension-scaling sweep")
    s.add_argument("--config", required=True)
    s.add_argument("--dims", default="2,8,32,128")
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--plan-only", action="store_true", help="record grid sizes without searching K")
    s.add_argument("--threads", type=int)
    s.add_argument("--out")
    return p


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    overrides = {}
    for key in ("mode", "seed", "threads"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return replace(cfg, **overrides) if overrides else cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = _parser().parse_args(argv)
    try:
        cfg = _load(args)
    except (OSError, ValueError, TypeError) as exc:
        log.error("cannot load config %s: %s", args.config, exc)
        return 2
    out = Path(args.out or cfg.output_dir or "piadm_out")
    if args.command == "run":
        try:
            record = run(cfg)
        except Exception as exc:  # noqa: BLE001 - surface any failure with config context
            log.error("run failed for config %s (%s): %s: %s", args.config, cfg.hash(), type(exc).__name__, exc)
            return 1
        write_record(record, out)
        log.info("wrote %s (KL=%s)", out, record.comparison.get("kl"))
        return 0
    dims = [int(x) for x in args.dims.split(",") if x]
    rows, ok = sweep_dimension(cfg, dims, args.tol, search_k=not args.plan_only, out_path=out / "sweep.csv")
    with open(out / "sweep_summary.json", "w") as fh:
        json.dump({"exponents": scaling_exponents(rows), "rows": rows}, fh, indent=2, default=str)
    log.info("wrote %s", out / "sweep.csv")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
