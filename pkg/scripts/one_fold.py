"""Run one cross-validation fold with a config file and print its diagnostics."""

import argparse
import json
import time

from must.config import load_config
from must.evalkit import run_fold
from must.synthcohort import generate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/desk.ini")
    ap.add_argument("--fold", type=int, default=0)
    ap.add_argument("--no-unimodal", action="store_true")
    args = ap.parse_args()
    cfg = load_config(args.config)
    if args.no_unimodal:
        cfg.pipeline.unimodal = False
    t0 = time.perf_counter()
    out = run_fold(generate(cfg.data), args.fold, cfg.pipeline)
    print(json.dumps({"fold": args.fold, "c_index": out.c_index, "cos": out.cos_report.summary(),
                      "latency_ms": out.latency_ms, "seconds": time.perf_counter() - t0}, indent=1, default=float))


if __name__ == "__main__":
    main()
