"""Command-line entry point: ``must <command> ...``.

Exit codes: 0 success, 2 configuration or usage error, 3 input/output or
file-format error, 4 training aborted on a non-finite loss or gradient.
Structured logs go to stderr as JSON lines; artifacts go only to ``--out``,
next to a ``manifest.json`` describing the run.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointFormatError, config_hash
from .config import RunConfig, load_config, require
from .synthcohort import CohortFormatError, ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NAN = 0, 2, 3, 4

log = logging.getLogger("must")


class UsageError(Exception):
    pass


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        rec = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        extra = getattr(record, "payload", None)
        if extra:
            rec.update(extra)
        return json.dumps(rec, sort_keys=True, default=str)


def _setup_logging(verbose: bool):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO if verbose else logging.WARNING)


def _emit(rec: dict):
    """Training and LDM records, one JSON object per line on stderr."""
    sys.stderr.write(json.dumps(rec, sort_keys=True, default=str) + "\n")
    sys.stderr.flush()


class Manifest:
    def __init__(self, command: str, argv: list[str]):
        self.data = {"command": command, "argv": argv, "tool_version": __version__,
                     "inputs": {}, "outputs": [], "phases_s": {}}

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        yield
        self.data["phases_s"][name] = round(time.perf_counter() - t0, 6)

    def set_config(self, cfg: dict, seed, seed_source: str):
        self.data["config"] = cfg
        self.data["config_hash"] = config_hash(cfg)
        self.data["seed"] = seed
        self.data["seed_source"] = seed_source

    def write(self, out: Path):
        out.mkdir(parents=True, exist_ok=True)
        self.data["outputs"] = sorted(str(p.relative_to(out)) for p in out.rglob("*")
                                      if p.is_file() and p.name != "manifest.json")
        (out / "manifest.json").write_text(json.dumps(self.data, indent=2, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# shared helpers


def _load_cfg(args) -> RunConfig:
    return load_config(args.config, getattr(args, "seed", None))


def _records(cohort, fold: int | None, part: str):
    if fold is None:
        return list(cohort.records)
    if not 0 <= fold < len(cohort.folds):
        raise ConfigError("fold", f"fold {fold} outside [0, {len(cohort.folds) - 1}]")
    train, test = cohort.split(fold)
    return train if part == "train" else test


def _override(obj, mapping: dict):
    given = {k: v for k, v in mapping.items() if v is not None}
    return dataclasses.replace(obj, **given) if given else obj


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, man: Manifest):
    from .synthcohort import generate, save_cohort
    cfg = _load_cfg(args)
    require(cfg, "data.num_patients", "run.seed")
    man.set_config({"data": cfg.data.to_dict()}, cfg.seed, cfg.seed_source)
    with man.phase("generate"):
        cohort = generate(cfg.data)
    with man.phase("write"):
        save_cohort(cohort, Path(args.out) / "cohort")
    man.data["inputs"]["config"] = args.config


def _train_overrides(args, cfg: RunConfig):
    pipe = cfg.pipeline
    enc = _override(pipe.model.encoder, {"dim": args.dim})
    model = _override(dataclasses.replace(pipe.model, encoder=enc),
                      {"rank": args.rank, "projector_mode": args.projector_mode,
                       "precision": args.precision})
    train = _override(pipe.train, {
        "stage1_epochs": args.stage1_epochs, "stage2_epochs": args.stage2_epochs,
        "lr_stage1": args.lr_stage1, "lr_stage2": args.lr_stage2, "weight_decay": args.weight_decay,
        "accum_steps": args.accum_steps, "sigma": args.sigma, "lambda_dec": args.lambda_dec,
        "lambda_sh": args.lambda_sh, "lambda_orth": args.lambda_orth,
        "optimizer": args.optimizer, "train_missing_rate": args.train_missing_rate,
        "train_missing_modality": args.train_missing_modality,
        "projector_init": args.projector_init, "decomp_target": args.decomp_target,
        "full_likelihood": True if args.full_likelihood else None})
    train.validate()
    return model, train


def cmd_train(args, man: Manifest):
    from .model import MUSTModel
    from .synthcohort import discretize, load_cohort
    from .trainer import Trainer, TrainConfig, TrainingDiverged, model_from_checkpoint
    out = Path(args.out)
    cohort = load_cohort(args.data)
    records = _records(cohort, args.fold, "train")
    ckpt_out = out / "model.ckpt"
    if args.stage == "main" and args.ckpt is None:
        raise ConfigError("ckpt", "--stage main needs --ckpt from a warm-up run")
    if args.ckpt is not None:
        model, tensors, meta = model_from_checkpoint(args.ckpt)
        tcfg = TrainConfig(**meta["train_config"])
        cfg = _load_cfg(args)
        _, flags = _train_overrides(args, cfg)
        given = {f.name: getattr(flags, f.name) for f in dataclasses.fields(TrainConfig)
                 if getattr(flags, f.name) != getattr(cfg.pipeline.train, f.name)}
        tcfg = dataclasses.replace(tcfg, **given)
        grid_bounds = meta.get("grid")
        seed, source = meta.get("seed"), "checkpoint"
    else:
        cfg = _load_cfg(args)
        mcfg, tcfg = _train_overrides(args, cfg)
        model = MUSTModel(mcfg)
        tensors = meta = None
        grid_bounds = None
        seed, source = cfg.seed, cfg.seed_source
    times = [r.time for r in records]
    if grid_bounds is None:
        grid = discretize(times, [r.event for r in records], model.cfg.K)
    else:
        from .synthcohort import TimeGrid
        grid = TimeGrid(tuple(float(b) for b in grid_bounds))
    intervals = grid.interval_of(times)
    trainer = Trainer(model, records, intervals, tcfg, log_fn=_emit, checkpoint_path=ckpt_out)
    if tensors is not None:
        trainer.restore(tensors, meta)
    man.set_config({"model": model.cfg.to_dict(), "train": dataclasses.asdict(tcfg),
                    "fold": args.fold, "stage": args.stage}, seed, source)
    man.data["inputs"] = {"data": args.data, "ckpt": args.ckpt}
    stop = 1 if args.stage == "warmup" else None
    try:
        with man.phase("train"):
            trainer.run(stop_after_stage=stop)
    except TrainingDiverged:
        _save_main(trainer, ckpt_out, grid, seed, args.fold)
        man.data["aborted"] = "non-finite loss"
        raise
    _save_main(trainer, ckpt_out, grid, seed, args.fold)
    (out / "train_log.jsonl").write_text("".join(json.dumps(h, sort_keys=True) + "\n" for h in trainer.history))


def _save_main(trainer, path, grid, seed, fold):
    from .checkpoint import save_checkpoint
    tensors, meta = trainer.state()
    meta.update({"grid": list(grid.boundaries), "seed": seed, "fold": fold})
    meta["grid"] = [b if math.isfinite(b) else "inf" for b in meta["grid"]]
    save_checkpoint(path, tensors, meta)


def _load_main(path):
    from .trainer import model_from_checkpoint
    model, _, meta = model_from_checkpoint(path)
    return model, meta


def cmd_train_ldm(args, man: Manifest):
    from .ldm import DenoiserConfig, LDMConfig, train_ldm
    from .synthcohort import load_cohort
    if args.ckpt is None:
        raise ConfigError("ckpt", "--ckpt is required")
    cfg = _load_cfg(args)
    model, meta = _load_main(args.ckpt)
    fold = args.fold if args.fold is not None else meta.get("fold")
    cohort = load_cohort(args.data)
    records = _records(cohort, fold, "train")
    lcfg = _override(cfg.pipeline.ldm, {"steps": args.steps, "condition": args.condition,
                                        "seed": args.seed})
    den_cfg = DenoiserConfig(dim=model.dim, layers=cfg.pipeline.denoiser_layers,
                             heads=cfg.pipeline.denoiser_heads,
                             use_cls=not args.no_cls and cfg.pipeline.ldm_use_cls,
                             precision=model.cfg.precision, seed=lcfg.seed,
                             parameterization=cfg.pipeline.denoiser_parameterization)
    man.set_config({"ldm": dataclasses.asdict(lcfg), "denoiser": dataclasses.asdict(den_cfg),
                    "modality": args.modality, "fold": fold}, lcfg.seed, cfg.seed_source)
    man.data["inputs"] = {"ckpt": args.ckpt, "data": args.data}
    with man.phase("train_ldm"):
        ldm = train_ldm(model, records, args.modality, lcfg, den_cfg, log_fn=_emit)
    ldm.save(Path(args.out) / f"ldm_{args.modality}.ckpt")


def cmd_eval(args, man: Manifest):
    from .evalkit import decomposition_report, write_cos_artifacts
    from .inference import ModalityMask, predict_missing, write_predictions_csv
    from .ldm import load_ldm
    from .metrics import UndefinedMetricError, c_index, kaplan_meier, log_rank, stratify_median
    from .synthcohort import load_cohort
    missing = None if args.missing == "none" else args.missing
    ldm_path = {"P": args.ldm_p, "G": args.ldm_g}.get(missing)
    if missing is not None and ldm_path is None and not args.zero_impute:
        raise ConfigError(f"ldm-{missing.lower()}", f"--missing {missing} needs --ldm-{missing.lower()} "
                                                    "or --zero-impute")
    model, meta = _load_main(args.ckpt)
    fold = args.fold if args.fold is not None else meta.get("fold")
    cohort = load_cohort(args.data)
    records = _records(cohort, fold, "test")
    ldm = None
    if missing is not None and not args.zero_impute:
        ldm = load_ldm(ldm_path, expect_modality=missing, frozen_model=model)
    seed = args.seed if args.seed is not None else meta.get("seed") or 0
    man.set_config({"missing": args.missing, "ddim_steps": args.ddim_steps, "samples": args.samples,
                    "zero_impute": args.zero_impute, "fold": fold}, seed, "flag" if args.seed is not None else "checkpoint")
    man.data["inputs"] = {"ckpt": args.ckpt, "data": args.data, "ldm": ldm_path}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with man.phase("inference"):
        res = predict_missing(model, records, ModalityMask.from_missing(missing), ldm,
                              zero_impute=args.zero_impute, ddim_steps=args.ddim_steps,
                              n_samples=args.samples, seed=seed)
    write_predictions_csv(out / "predictions.csv", res)
    times = np.array([r.time for r in records])
    events = np.array([r.event for r in records])
    scenario = res.mask.tag + ("-zero" if args.zero_impute and missing else "")
    payload = {"config_hash": man.data["config_hash"], "config": man.data["config"], "folds": [fold],
               "scenarios": {}, "logrank": {}, "decomposition": {}}
    try:
        c = c_index(res.risk, times, events)
    except UndefinedMetricError:
        c = math.nan
    payload["scenarios"][scenario] = {"per_fold": [c], "mean": c, "std": 0.0}
    km_rows, lr_rows = [], []
    high, low = stratify_median(res.risk)
    try:
        lr = log_rank(times[high], events[high], times[low], events[low])
        payload["logrank"][scenario] = {"statistic": lr.statistic, "p_value": lr.p_value}
        lr_rows.append((scenario, repr(lr.statistic), repr(lr.p_value), repr(lr.observed[0]),
                        repr(lr.expected[0]), repr(lr.observed[1]), repr(lr.expected[1])))
        for g, idx in (("high", high), ("low", low)):
            km = kaplan_meier(times[idx], events[idx])
            for i in range(len(km.times)):
                km_rows.append((scenario, g, repr(float(km.times[i])), repr(float(km.survival[i])),
                                str(int(km.at_risk[i])), repr(float(km.lower[i])), repr(float(km.upper[i]))))
    except UndefinedMetricError as exc:
        payload["logrank"][scenario] = {"undefined": str(exc)}
    rep = decomposition_report(model, records)
    payload["decomposition"] = rep.summary()
    write_cos_artifacts(rep, out)
    from .evalkit import _write_csv, validate_metrics
    _write_csv(out / "km_curves.csv", ["scenario", "group", "time", "survival", "at_risk", "lower", "upper"], km_rows)
    _write_csv(out / "logrank.csv", ["scenario", "statistic", "p_value", "observed_high", "expected_high",
                                     "observed_low", "expected_low"], lr_rows)
    validate_metrics(payload)
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    (out / "latency.json").write_text(json.dumps({k: v / max(len(records), 1) for k, v in res.timing.items()},
                                                 indent=2, sort_keys=True))


def cmd_cv(args, man: Manifest):
    from .evalkit import cross_validate, write_artifacts
    from .synthcohort import load_cohort
    cfg = _load_cfg(args)
    pipe = cfg.pipeline
    if args.folds:
        pipe = dataclasses.replace(pipe, folds=tuple(args.folds))
    cohort = load_cohort(args.data)
    man.set_config(pipe.to_dict(), cfg.seed, cfg.seed_source)
    man.data["inputs"] = {"data": args.data, "config": args.config}
    with man.phase("cross_validate"):
        res = cross_validate(cohort, pipe, _emit)
    with man.phase("write"):
        write_artifacts(res, args.out)


def cmd_report(args, man: Manifest):
    from .evalkit import validate_metrics
    from . import plots
    runs = []
    for d in args.runs:
        p = Path(d) / "metrics.json" if Path(d).is_dir() else Path(d)
        payload = json.loads(p.read_text())
        try:
            validate_metrics(payload)
        except ValueError as exc:
            raise ConfigError("runs", f"{p}: {exc}") from exc
        runs.append((str(d), payload))
    scen = [sorted(p["scenarios"]) for _, p in runs]
    if any(s != scen[0] for s in scen):
        raise ConfigError("runs", "runs report different scenario sets")
    man.set_config({"runs": [r for r, _ in runs]}, None, "none")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = ["run", *[f"{s} mean" for s in scen[0]], *[f"{s} std" for s in scen[0]]]
    rows = [[name, *[f"{p['scenarios'][s]['mean']:.4f}" for s in scen[0]],
             *[f"{p['scenarios'][s]['std']:.4f}" for s in scen[0]]] for name, p in runs]
    means = [float(np.mean([p["scenarios"][s]["mean"] for _, p in runs])) for s in scen[0]]
    rows.append(["mean", *[f"{m:.4f}" for m in means], *[""] * len(scen[0])])
    from .evalkit import _write_csv
    _write_csv(out / "report.csv", header, rows)
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    (out / "report.md").write_text("\n".join(lines) + "\n")
    series = {name: (list(range(len(scen[0]))), [p["scenarios"][s]["mean"] for s in scen[0]]) for name, p in runs}
    plots.step_plot(out / "report.svg", series, "C-index per scenario index", "scenario", "C-index")


def cmd_sweep(args, man: Manifest):
    from .evalkit import sweep, write_sweep
    from .synthcohort import load_cohort
    cfg = _load_cfg(args)
    pipe = cfg.pipeline
    if args.folds:
        pipe = dataclasses.replace(pipe, folds=tuple(args.folds))
    caster = int if args.param == "rank" else float
    values = [caster(v) for v in args.values]
    cohort = load_cohort(args.data)
    man.set_config({"pipeline": pipe.to_dict(), "param": args.param, "values": values}, cfg.seed, cfg.seed_source)
    man.data["inputs"] = {"data": args.data, "config": args.config}
    with man.phase("sweep"):
        rows = sweep(cohort, pipe, args.param, values, _emit)
    write_sweep(rows, args.out)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="must", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="info-level logs on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic cohort")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train the main model (warm-up, main stage, or both)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--fold", type=int, help="train on this fold's training split (default: all patients)")
    t.add_argument("--stage", choices=("warmup", "main", "both"), default="both")
    t.add_argument("--ckpt", help="continue from a checkpoint (required for --stage main)")
    t.add_argument("--projector-mode", choices=("exact", "penalty"))
    t.add_argument("--train-missing-rate", type=float)
    t.add_argument("--train-missing-modality", choices=("P", "G", "both"))
    t.add_argument("--full-likelihood", action="store_true")
    t.add_argument("--projector-init", choices=("random", "eig"))
    t.add_argument("--decomp-target", choices=("live", "detached", "split"))
    t.add_argument("--optimizer", choices=("adamw", "adam"))
    for name, typ in (("stage1-epochs", int), ("stage2-epochs", int), ("lr-stage1", float),
                      ("lr-stage2", float), ("weight-decay", float), ("accum-steps", int),
                      ("sigma", float), ("lambda-dec", float), ("lambda-sh", float),
                      ("lambda-orth", float), ("rank", int), ("dim", int)):
        t.add_argument(f"--{name}", type=typ)
    t.add_argument("--precision", choices=("float32", "float64"))

    l = sub.add_parser("train-ldm", help="train one denoiser on a frozen main model")
    l.add_argument("--ckpt")
    l.add_argument("--data", required=True)
    l.add_argument("--modality", choices=("P", "G"), required=True)
    l.add_argument("--steps", type=int)
    l.add_argument("--out", required=True)
    l.add_argument("--config")
    l.add_argument("--seed", type=int)
    l.add_argument("--fold", type=int)
    l.add_argument("--no-cls", action="store_true", help="condition on the shared component only")
    l.add_argument("--condition", choices=("recovered", "exact"))

    e = sub.add_parser("eval", help="score one scenario on held-out patients")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--ldm-p")
    e.add_argument("--ldm-g")
    e.add_argument("--data", required=True)
    e.add_argument("--missing", choices=("none", "P", "G"), default="none")
    e.add_argument("--ddim-steps", type=int, default=50)
    e.add_argument("--samples", type=int, default=5)
    e.add_argument("--zero-impute", action="store_true")
    e.add_argument("--out", required=True)
    e.add_argument("--fold", type=int)
    e.add_argument("--seed", type=int)

    c = sub.add_parser("cv", help="full cross-validated pipeline with all scenarios")
    c.add_argument("--data", required=True)
    c.add_argument("--config")
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int)
    c.add_argument("--folds", type=int, nargs="*")

    r = sub.add_parser("report", help="aggregate metrics.json files into tables")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", required=True)

    s = sub.add_parser("sweep", help="cross-validate one run per parameter value")
    s.add_argument("--param", required=True, choices=("rank", "lambda_dec", "lambda_sh", "lambda_orth"))
    s.add_argument("--values", nargs="+", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--folds", type=int, nargs="*")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "train-ldm": cmd_train_ldm,
            "eval": cmd_eval, "cv": cmd_cv, "report": cmd_report, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    from .ldm import FrozenModelMismatchError, ModalityMismatchError
    from .trainer import TrainingDiverged
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.verbose)
    man = Manifest(args.command, argv)
    code = EXIT_OK
    try:
        COMMANDS[args.command](args, man)
    except ConfigError as exc:
        log.error("config error", extra={"payload": {"key": exc.field, "error": str(exc)}})
        code = EXIT_CONFIG
    except (ModalityMismatchError, FrozenModelMismatchError, UsageError) as exc:
        log.error("usage error", extra={"payload": {"error": str(exc)}})
        code = EXIT_CONFIG
    except TrainingDiverged as exc:
        log.error("training aborted", extra={"payload": {"error": str(exc)}})
        code = EXIT_NAN
    except (OSError, CohortFormatError, CheckpointFormatError, json.JSONDecodeError) as exc:
        log.error("io error", extra={"payload": {"error": str(exc)}})
        code = EXIT_IO
    man.data["exit_code"] = code
    out = getattr(args, "out", None)
    if out is not None and code in (EXIT_OK, EXIT_NAN):
        man.write(Path(out))
    return code


if __name__ == "__main__":
    sys.exit(main())
