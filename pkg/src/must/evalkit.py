"""Cross-validation harness, stratification, decomposition diagnostics and sweeps.

``cross_validate`` trains one main model per fold (grid re-derived from the
training fold), two denoisers and two single-modality baselines, then scores
every scenario on the held-out fold with that same model:

* ``complete`` and the unimodal ablations ``path-only`` / ``gene-only``;
* ``missing-P`` and ``missing-G`` with LDM generation, plus their
  ``-zero`` zero-imputation counterparts.

Median stratification is done within each test fold at that fold's median
risk; pooled log-rank tests use the union of the per-fold groups.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import plots
from .checkpoint import config_hash
from .decomp import cosine
from .encoders import collate
from .inference import ModalityMask, predict_complete, predict_missing, single_patient_latency
from .ldm import DenoiserConfig, LDMConfig, train_ldm
from .metrics import (UndefinedMetricError, c_index, kaplan_meier, log_rank, stratify_median)
from .model import MUSTModel, ModelConfig
from .synthcohort import Cohort, ConfigError, InsufficientDataError, discretize
from .trainer import TrainConfig, Trainer, missing_assignment, train_unimodal

log = logging.getLogger(__name__)

SCENARIOS = ("complete", "missing-P", "missing-G")
ZERO = {"missing-P": "missing-P-zero", "missing-G": "missing-G-zero"}
ABLATIONS = ("path-only", "gene-only")


@dataclass
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ldm: LDMConfig = field(default_factory=LDMConfig)
    ldm_use_cls: bool = True
    denoiser_layers: int = 4
    denoiser_heads: int = 4
    denoiser_parameterization: str = "eps"
    ddim_steps: int = 50
    n_samples: int = 5
    folds: tuple[int, ...] | None = None
    unimodal: bool = True
    missing: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": dataclasses.asdict(self.train),
                "ldm": dataclasses.asdict(self.ldm), "ldm_use_cls": self.ldm_use_cls,
                "denoiser_layers": self.denoiser_layers, "denoiser_heads": self.denoiser_heads,
                "denoiser_parameterization": self.denoiser_parameterization,
                "ddim_steps": self.ddim_steps, "n_samples": self.n_samples,
                "folds": None if self.folds is None else list(self.folds),
                "unimodal": self.unimodal, "missing": self.missing, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        folds = d.pop("folds", None)
        return cls(model=ModelConfig.from_dict(d.pop("model", {})),
                   train=TrainConfig(**d.pop("train", {})),
                   ldm=LDMConfig(**d.pop("ldm", {})),
                   folds=None if folds is None else tuple(folds), **d)

    def denoiser_config(self, dim: int) -> DenoiserConfig:
        return DenoiserConfig(dim=dim, layers=self.denoiser_layers, heads=self.denoiser_heads,
                              use_cls=self.ldm_use_cls, precision=self.model.precision,
                              seed=self.ldm.seed, parameterization=self.denoiser_parameterization)

    def validate(self):
        self.train.validate()
        self.ldm.validate()
        if self.ddim_steps < 1:
            raise ConfigError("ddim_steps", "must be >= 1")
        if self.n_samples < 1:
            raise ConfigError("n_samples", "must be >= 1")


@dataclass
class FoldMetrics:
    scenario: str
    per_fold: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_fold)) if self.per_fold else math.nan

    @property
    def std(self) -> float:
        return float(np.std(self.per_fold)) if self.per_fold else math.nan

    def to_dict(self) -> dict:
        return {"per_fold": self.per_fold, "mean": self.mean, "std": self.std}


# ---------------------------------------------------------------------------
# decomposition diagnostics

PAIRS = {
    "u_P.u_G": ("u_P", "u_G"),
    "c_PG.c_GP": ("c_PG", "c_GP"),
    "g_P.g_G": ("g_P", "g_G"),
    "g_P.u_P+c_GP": ("g_P", "rec_P"),
    "g_G.u_G+c_PG": ("g_G", "rec_G"),
    "u_P.c_PG": ("u_P", "c_PG"),
    "u_G.c_GP": ("u_G", "c_GP"),
}
MAP_ORDER = ("g_P", "g_G", "u_P", "u_G", "c_PG", "c_GP", "rec_P", "rec_G")


@dataclass
class CosSimReport:
    ids: list[str]
    cosines: dict[str, np.ndarray]     # pair name -> per-patient cosine
    labels: tuple[str, ...]
    mean_map: np.ndarray               # mean cosine between every pair of labels

    def mean(self, pair: str) -> float:
        return float(np.mean(self.cosines[pair]))

    def mean_abs(self, pair: str) -> float:
        return float(np.mean(np.abs(self.cosines[pair])))

    def ecdf(self, pair: str) -> tuple[np.ndarray, np.ndarray]:
        x = np.sort(self.cosines[pair])
        return x, np.arange(1, len(x) + 1) / len(x)

    def summary(self) -> dict:
        out = {k: self.mean(k) for k in self.cosines}
        out.update({f"|{k}|": self.mean_abs(k) for k in self.cosines})
        return out

    @classmethod
    def concat(cls, reports: list["CosSimReport"]) -> "CosSimReport":
        ids = [i for r in reports for i in r.ids]
        cos = {k: np.concatenate([r.cosines[k] for r in reports]) for k in reports[0].cosines}
        w = np.array([len(r.ids) for r in reports], dtype=np.float64)
        mean_map = sum(wi * r.mean_map for wi, r in zip(w, reports)) / w.sum()
        return cls(ids, cos, reports[0].labels, mean_map)


@torch.no_grad()
def decomposition_vectors(model: MUSTModel, records) -> dict[str, torch.Tensor]:
    enc, dec, _ = model(collate(records, model.dtype, model.cfg.encoder.max_path_tokens))
    return {"g_P": enc.g_P, "g_G": enc.g_G, "u_P": dec.hat_u_P, "u_G": dec.hat_u_G,
            "c_PG": dec.hat_c_PG, "c_GP": dec.hat_c_GP,
            "rec_P": dec.hat_u_P + dec.hat_c_GP, "rec_G": dec.hat_u_G + dec.hat_c_PG}


def decomposition_report(model: MUSTModel, records) -> CosSimReport:
    v = decomposition_vectors(model, records)
    cos = {name: cosine(v[a], v[b]).double().numpy() for name, (a, b) in PAIRS.items()}
    n = len(MAP_ORDER)
    m = np.zeros((n, n))
    for i, a in enumerate(MAP_ORDER):
        for j, b in enumerate(MAP_ORDER):
            m[i, j] = float(cosine(v[a], v[b]).double().mean())
    return CosSimReport([r.id for r in records], cos, MAP_ORDER, m)


# ---------------------------------------------------------------------------
# per-fold pipeline


def _fit_fold(train, pcfg: PipelineConfig, log_fn=None):
    times = [r.time for r in train]
    events = [r.event for r in train]
    try:
        grid = discretize(times, events, pcfg.model.K)
    except InsufficientDataError as exc:
        raise InsufficientDataError(f"training fold too small to discretize: {exc}") from exc
    intervals = grid.interval_of(times)
    model = MUSTModel(pcfg.model)
    trainer = Trainer(model, train, intervals, pcfg.train, log_fn=log_fn)
    trainer.run()
    return model, grid, intervals, trainer


def _paired_for_ldm(train, pcfg: PipelineConfig, modality: str):
    """Training patients with both modalities observed (all of them unless
    training-time missingness is on)."""
    if pcfg.train.train_missing_rate <= 0:
        return list(train)
    pP, pG = missing_assignment([r.id for r in train], pcfg.train.train_missing_rate,
                                pcfg.train.train_missing_modality, pcfg.train.seed)
    return [r for r, a, b in zip(train, pP, pG) if a and b]


def _safe_c(risks, times, events) -> float:
    try:
        return c_index(risks, times, events)
    except UndefinedMetricError:
        return math.nan


@dataclass
class FoldOutcome:
    fold: int
    c_index: dict[str, float]
    risks: dict[str, np.ndarray]
    ids: list[str]
    times: np.ndarray
    events: np.ndarray
    cos_report: CosSimReport
    latency_ms: dict[str, float]
    train_history: list[dict]
    ldm_history: dict[str, list]
    model: MUSTModel | None = None


def run_fold(cohort: Cohort, fold: int, pcfg: PipelineConfig, log_fn=None, keep_model=False) -> FoldOutcome:
    train, test = cohort.split(fold)
    model, grid, intervals, trainer = _fit_fold(train, pcfg, log_fn)
    t_times = np.array([r.time for r in test])
    t_events = np.array([r.event for r in test], dtype=np.int64)
    risks, latency = {}, {}
    res = predict_complete(model, test)
    risks["complete"] = res.risk
    latency["complete"] = single_patient_latency(lambda rs: predict_complete(model, rs), test)
    latency["complete-batched"] = res.per_patient_ms()
    ldm_hist = {}
    if pcfg.missing:
        for miss in ("P", "G"):
            tag = f"missing-{miss}"
            den_cfg = pcfg.denoiser_config(model.dim)
            ldm = train_ldm(model, _paired_for_ldm(train, pcfg, miss), miss, pcfg.ldm, den_cfg,
                            log_fn=log_fn)
            ldm_hist[miss] = ldm.history
            mask = ModalityMask.from_missing(miss)
            res = predict_missing(model, test, mask, ldm, ddim_steps=pcfg.ddim_steps,
                                  n_samples=pcfg.n_samples, seed=pcfg.seed)
            risks[tag] = res.risk
            latency[tag] = single_patient_latency(
                lambda rs: predict_missing(model, rs, mask, ldm, ddim_steps=pcfg.ddim_steps,
                                           n_samples=pcfg.n_samples, seed=pcfg.seed), test)
            latency[f"{tag}-batched"] = res.per_patient_ms()
            risks[ZERO[tag]] = predict_missing(model, test, mask, zero_impute=True).risk
    if pcfg.unimodal:
        for tag, modality in zip(ABLATIONS, ("P", "G")):
            uni = train_unimodal(modality, pcfg.model, train, intervals, pcfg.train)
            with torch.no_grad():
                pred = uni(collate(test, uni.dtype, pcfg.model.encoder.max_path_tokens))
            risks[tag] = pred.risk.detach().numpy()
    cidx = {k: _safe_c(v, t_times, t_events) for k, v in risks.items()}
    if log_fn is not None:
        log_fn({"kind": "fold", "fold": fold, "c_index": cidx})
    return FoldOutcome(fold, cidx, {k: np.asarray(v, dtype=np.float64) for k, v in risks.items()},
                       [r.id for r in test], t_times, t_events, decomposition_report(model, test),
                       latency, trainer.history, ldm_hist, model if keep_model else None)


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class CVResult:
    config: dict
    outcomes: list[FoldOutcome]

    @property
    def scenarios(self) -> list[str]:
        return list(self.outcomes[0].c_index)

    @property
    def metrics(self) -> dict[str, FoldMetrics]:
        return {s: FoldMetrics(s, [o.c_index[s] for o in self.outcomes]) for s in self.scenarios}

    def groups(self, scenario: str):
        """Pooled (times, events, is_high) using each fold's own median split."""
        t, e, hi = [], [], []
        for o in self.outcomes:
            high, _ = stratify_median(o.risks[scenario])
            flag = np.zeros(len(o.ids), dtype=bool)
            flag[high] = True
            t.append(o.times)
            e.append(o.events)
            hi.append(flag)
        return np.concatenate(t), np.concatenate(e), np.concatenate(hi)

    def logrank(self, scenario: str):
        t, e, hi = self.groups(scenario)
        return log_rank(t[hi], e[hi], t[~hi], e[~hi])

    def km(self, scenario: str):
        t, e, hi = self.groups(scenario)
        return {"high": kaplan_meier(t[hi], e[hi]), "low": kaplan_meier(t[~hi], e[~hi])}

    @property
    def cos_report(self) -> CosSimReport:
        return CosSimReport.concat([o.cos_report for o in self.outcomes])

    def latency(self) -> dict[str, float]:
        keys = self.outcomes[0].latency_ms
        return {k: float(np.mean([o.latency_ms[k] for o in self.outcomes])) for k in keys}

    def metrics_dict(self) -> dict:
        """The deterministic payload of ``metrics.json`` (no wall-clock values)."""
        lr = {}
        for s in self.scenarios:
            try:
                r = self.logrank(s)
                lr[s] = {"statistic": r.statistic, "p_value": r.p_value}
            except UndefinedMetricError as exc:
                lr[s] = {"undefined": str(exc)}
        return {
            "config_hash": config_hash(self.config),
            "config": self.config,
            "folds": [o.fold for o in self.outcomes],
            "scenarios": {k: v.to_dict() for k, v in self.metrics.items()},
            "logrank": lr,
            "decomposition": self.cos_report.summary(),
        }


def cross_validate(cohort: Cohort, pcfg: PipelineConfig, log_fn: Callable | None = None,
                   keep_models=False) -> CVResult:
    pcfg.validate()
    folds = range(len(cohort.folds)) if pcfg.folds is None else pcfg.folds
    outcomes = [run_fold(cohort, f, pcfg, log_fn, keep_models) for f in folds]
    return CVResult(pcfg.to_dict(), outcomes)


# ---------------------------------------------------------------------------
# artifacts


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_cos_artifacts(report: CosSimReport, out: Path):
    rows = []
    for pair in report.cosines:
        x, f = report.ecdf(pair)
        rows.extend((pair, repr(float(a)), repr(float(b))) for a, b in zip(x, f))
    _write_csv(out / "cossim_ecdf.csv", ["pair", "cosine", "ecdf"], rows)
    _write_csv(out / "cossim_map.csv", ["row", *report.labels],
               [(a, *[repr(float(v)) for v in report.mean_map[i]]) for i, a in enumerate(report.labels)])
    series = {p: (list(report.ecdf(p)[0]), list(report.ecdf(p)[1])) for p in ("u_P.u_G", "c_PG.c_GP", "g_P.g_G")}
    plots.step_plot(out / "cossim_ecdf.svg", series, "ECDF of cosine similarity", "cosine", "ECDF")
    plots.heatmap(out / "cossim_map.svg", list(report.labels), report.mean_map, "mean cosine similarity")


def write_artifacts(result: CVResult, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    payload = result.metrics_dict()
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    (out / "latency.json").write_text(json.dumps(result.latency(), indent=2, sort_keys=True))
    km_rows, lr_rows = [], []
    for s in result.scenarios:
        try:
            curves = result.km(s)
            r = result.logrank(s)
        except UndefinedMetricError:
            continue
        lr_rows.append((s, repr(r.statistic), repr(r.p_value), repr(r.observed[0]), repr(r.expected[0]),
                        repr(r.observed[1]), repr(r.expected[1])))
        series, bands = {}, {}
        for g, c in curves.items():
            km_rows.append((s, g, "0.0", "1.0", str(int(c.at_risk[0]) if len(c.at_risk) else 0), "1.0", "1.0"))
            for i in range(len(c.times)):
                km_rows.append((s, g, repr(float(c.times[i])), repr(float(c.survival[i])), str(int(c.at_risk[i])),
                                repr(float(c.lower[i])), repr(float(c.upper[i]))))
            series[f"{g} risk"] = (list(c.times), list(c.survival))
            bands[f"{g} risk"] = (list(c.lower), list(c.upper))
        plots.step_plot(out / f"km_{s}.svg", series, f"Kaplan-Meier ({s}, p={r.p_value:.3g})",
                        "time", "survival", bands=bands, start=0.0)
    _write_csv(out / "km_curves.csv", ["scenario", "group", "time", "survival", "at_risk", "lower", "upper"], km_rows)
    _write_csv(out / "logrank.csv", ["scenario", "statistic", "p_value", "observed_high", "expected_high",
                                     "observed_low", "expected_low"], lr_rows)
    write_cos_artifacts(result.cos_report, out)
    pred_rows = []
    for o in result.outcomes:
        for i, pid in enumerate(o.ids):
            pred_rows.append((o.fold, pid, *[repr(float(o.risks[s][i])) for s in result.scenarios]))
    _write_csv(out / "fold_predictions.csv", ["fold", "id", *result.scenarios], pred_rows)
    return payload


METRICS_SCHEMA_KEYS = ("config_hash", "config", "folds", "scenarios", "logrank", "decomposition")


def validate_metrics(payload: dict) -> None:
    """Schema check for ``metrics.json``; raises ``ValueError`` on mismatch."""
    for k in METRICS_SCHEMA_KEYS:
        if k not in payload:
            raise ValueError(f"metrics.json missing key {k!r}")
    for s, m in payload["scenarios"].items():
        if set(m) != {"per_fold", "mean", "std"}:
            raise ValueError(f"scenario {s!r} has keys {sorted(m)}")
        if len(m["per_fold"]) != len(payload["folds"]):
            raise ValueError(f"scenario {s!r} fold count mismatch")
        for v in m["per_fold"]:
            if not (isinstance(v, float) and (math.isnan(v) or 0.0 <= v <= 1.0)):
                raise ValueError(f"scenario {s!r} has C-index {v!r} outside [0, 1]")


# ---------------------------------------------------------------------------
# sweeps


def _with(pcfg: PipelineConfig, param: str, value) -> PipelineConfig:
    p = copy.deepcopy(pcfg)
    if param == "rank":
        if not 1 <= int(value) <= p.model.encoder.dim:
            raise ConfigError("rank", f"must satisfy 1 <= r <= D={p.model.encoder.dim}, got {value}")
        p.model = dataclasses.replace(p.model, rank=int(value))
    elif param in ("lambda_dec", "lambda_sh", "lambda_orth"):
        p.train = dataclasses.replace(p.train, **{param: float(value)})
    else:
        raise ConfigError("param", f"unknown sweep parameter {param!r}")
    return p


def sweep(cohort: Cohort, pcfg: PipelineConfig, param: str, values, log_fn=None) -> list[dict]:
    """One cross-validation per arm; rows of ``{param, scenario, mean, std}``."""
    arms = [_with(pcfg, param, v) for v in values]
    rows = []
    for v, arm in zip(values, arms):
        res = cross_validate(cohort, arm, log_fn)
        for s, m in res.metrics.items():
            rows.append({"param": param, "value": v, "scenario": s, "mean": m.mean, "std": m.std})
        rows.append({"param": param, "value": v, "scenario": "decomp:c_PG.c_GP",
                     "mean": res.cos_report.mean("c_PG.c_GP"), "std": 0.0})
    return rows


def rank_sweep(cohort: Cohort, pcfg: PipelineConfig, ranks=(16, 32, 64, 128), log_fn=None) -> list[dict]:
    return sweep(cohort, pcfg, "rank", list(ranks), log_fn)


def write_sweep(rows: list[dict], out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "sweep.csv", ["param", "value", "scenario", "mean", "std"],
               [(r["param"], r["value"], r["scenario"], repr(r["mean"]), repr(r["std"])) for r in rows])
    scen = sorted({r["scenario"] for r in rows if not r["scenario"].startswith("decomp")})
    series = {}
    for s in scen:
        pts = [(float(r["value"]), r["mean"]) for r in rows if r["scenario"] == s]
        series[s] = ([p[0] for p in pts], [p[1] for p in pts])
    if series:
        ys = [y for _, yv in series.values() for y in yv if not math.isnan(y)]
        plots.step_plot(out / "sweep.svg", series, f"sweep over {rows[0]['param']}", rows[0]["param"],
                        "C-index", y_range=(min(ys + [0.5]), max(ys + [1.0])))
