"""Run the full cross-validated pipeline for a config and write its artifacts."""

import argparse
import json
import time

from must.config import load_config
from must.evalkit import cross_validate, write_artifacts
from must.synthcohort import generate
from must.trainer import jsonl_logger


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/desk.ini")
    ap.add_argument("--out", default="runs/desk_cv")
    ap.add_argument("--folds", type=int, nargs="*")
    ap.add_argument("--train-missing-rate", type=float, default=0.0)
    ap.add_argument("--no-unimodal", action="store_true")
    ap.add_argument("--log", action="store_true", help="stream JSON-lines training logs to stderr")
    args = ap.parse_args()
    cfg = load_config(args.config)
    pcfg = cfg.pipeline
    if args.folds:
        pcfg.folds = tuple(args.folds)
    if args.no_unimodal:
        pcfg.unimodal = False
    pcfg.train.train_missing_rate = args.train_missing_rate
    t0 = time.perf_counter()
    result = cross_validate(generate(cfg.data), pcfg, jsonl_logger() if args.log else None)
    payload = write_artifacts(result, args.out)
    summary = {s: round(m["mean"], 4) for s, m in payload["scenarios"].items()}
    print(json.dumps({"c_index": summary, "decomposition": payload["decomposition"],
                      "latency_ms": result.latency(), "minutes": (time.perf_counter() - t0) / 60},
                     indent=1, default=float))


if __name__ == "__main__":
    main()
