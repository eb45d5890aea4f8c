import csv
import dataclasses
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import TINY_GEN, tiny_model_config, tiny_train_config
from must.decomp import cosine
from must.evalkit import (CosSimReport, FoldMetrics, PipelineConfig, cross_validate,
                          decomposition_report, decomposition_vectors, sweep, validate_metrics,
                          write_artifacts, write_sweep)
from must.ldm import LDMConfig
from must.metrics import c_index
from must.model import MUSTModel
from must.synthcohort import ConfigError, generate

ALL_SCENARIOS = {"complete", "missing-P", "missing-P-zero", "missing-G", "missing-G-zero",
                 "path-only", "gene-only"}


def tiny_pipeline(**kw) -> PipelineConfig:
    base = dict(model=tiny_model_config(), train=tiny_train_config(stage1_epochs=1, stage2_epochs=1),
                ldm=LDMConfig(steps=3, batch_size=8, log_every=3), denoiser_layers=1, denoiser_heads=2,
                ddim_steps=3, n_samples=2)
    base.update(kw)
    return PipelineConfig(**base)


@pytest.fixture(scope="module")
def cv(tiny_cohort):
    return cross_validate(tiny_cohort, tiny_pipeline(), keep_models=True)


# --- aggregation -----------------------------------------------------------

@given(st.lists(st.floats(0, 1), min_size=1, max_size=10))
def test_fold_metrics_mean_std(xs):
    m = FoldMetrics("s", xs)
    assert m.mean == pytest.approx(sum(xs) / len(xs))
    mu = sum(xs) / len(xs)
    assert m.std == pytest.approx(math.sqrt(sum((x - mu) ** 2 for x in xs) / len(xs)), abs=1e-12)
    assert m.to_dict() == {"per_fold": xs, "mean": m.mean, "std": m.std}


def test_cross_validate_shape(cv, tiny_cohort):
    assert [o.fold for o in cv.outcomes] == [0, 1, 2]
    assert set(cv.scenarios) == ALL_SCENARIOS
    for s, m in cv.metrics.items():
        assert len(m.per_fold) == 3
    # every patient scored exactly once across held-out folds
    ids = [i for o in cv.outcomes for i in o.ids]
    assert sorted(ids) == sorted(r.id for r in tiny_cohort.records)


def test_per_fold_c_index_recomputes(cv):
    for o in cv.outcomes:
        for s, risks in o.risks.items():
            assert o.c_index[s] == pytest.approx(c_index(risks, o.times, o.events), abs=0)


def test_groups_are_per_fold_median_splits(cv):
    t, e, hi = cv.groups("complete")
    start = 0
    for o in cv.outcomes:
        n = len(o.ids)
        flag = hi[start:start + n]
        med = np.median(o.risks["complete"])
        assert np.array_equal(flag, o.risks["complete"] > med)
        start += n
    assert start == len(t)


def test_five_fold_shape():
    cohort = generate(dataclasses.replace(TINY_GEN, num_patients=50, n_folds=5))
    res = cross_validate(cohort, tiny_pipeline(unimodal=False, missing=False))
    assert res.scenarios == ["complete"]
    assert len(res.metrics["complete"].per_fold) == 5
    assert len(res.cos_report.ids) == 50


def test_fold_subset(tiny_cohort):
    res = cross_validate(tiny_cohort, tiny_pipeline(folds=(1,), unimodal=False, missing=False))
    assert [o.fold for o in res.outcomes] == [1]


# --- artifacts -------------------------------------------------------------

def test_metrics_json_is_bit_identical_across_runs(tiny_cohort, tmp_path):
    pcfg = tiny_pipeline(unimodal=False)
    a = write_artifacts(cross_validate(tiny_cohort, pcfg), tmp_path / "a")
    b = write_artifacts(cross_validate(tiny_cohort, pcfg), tmp_path / "b")
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
    assert a == b


def test_artifacts_and_schema(cv, tmp_path):
    payload = write_artifacts(cv, tmp_path)
    validate_metrics(payload)
    validate_metrics(json.loads((tmp_path / "metrics.json").read_text()))
    for name in ("metrics.json", "latency.json", "km_curves.csv", "logrank.csv", "cossim_ecdf.csv",
                 "cossim_map.csv", "cossim_ecdf.svg", "cossim_map.svg", "fold_predictions.csv"):
        assert (tmp_path / name).exists(), name
    with open(tmp_path / "fold_predictions.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + sum(len(o.ids) for o in cv.outcomes)
    latency = json.loads((tmp_path / "latency.json").read_text())
    assert set(latency) == {"complete", "missing-P", "missing-G", "complete-batched", "missing-P-batched",
                            "missing-G-batched"}
    assert all(v > 0 for v in latency.values())


@pytest.mark.parametrize("mutate", [
    lambda p: p.pop("decomposition"),
    lambda p: p["scenarios"]["complete"].pop("std"),
    lambda p: p["scenarios"]["complete"]["per_fold"].append(0.5),
    lambda p: p["scenarios"]["complete"]["per_fold"].__setitem__(0, 1.5),
])
def test_schema_rejects(cv, mutate):
    payload = json.loads(json.dumps(cv.metrics_dict()))
    mutate(payload)
    with pytest.raises(ValueError):
        validate_metrics(payload)


# --- decomposition diagnostics ---------------------------------------------

def test_decomposition_report_matches_direct_cosines(tiny_cohort):
    model = MUSTModel(tiny_model_config())
    recs = tiny_cohort.records[:10]
    rep = decomposition_report(model, recs)
    v = decomposition_vectors(model, recs)
    np.testing.assert_allclose(rep.cosines["u_P.u_G"], cosine(v["u_P"], v["u_G"]).numpy(), rtol=0, atol=0)
    a, b = v["g_P"].numpy(), (v["u_P"] + v["c_GP"]).numpy()
    want = (a * b).sum(1) / np.linalg.norm(a, axis=1) / np.linalg.norm(b, axis=1)
    np.testing.assert_allclose(rep.cosines["g_P.u_P+c_GP"], want, rtol=1e-12)
    assert rep.mean_map.shape == (8, 8)
    np.testing.assert_allclose(np.diag(rep.mean_map), 1.0, atol=1e-12)
    np.testing.assert_allclose(rep.mean_map, rep.mean_map.T, atol=1e-12)
    x, f = rep.ecdf("u_P.u_G")
    assert np.all(np.diff(x) >= 0) and f[-1] == 1.0


def test_cos_report_concat_weights_by_patients():
    def rep(n, val):
        return CosSimReport([str(i) for i in range(n)], {"p": np.full(n, val)}, ("a",), np.full((1, 1), val))
    joined = CosSimReport.concat([rep(1, 0.0), rep(3, 1.0)])
    assert joined.mean("p") == 0.75 and joined.mean_map[0, 0] == 0.75
    assert len(joined.ids) == 4


# --- sweeps ----------------------------------------------------------------

def test_sweep_cardinality_and_output(tiny_cohort, tmp_path):
    pcfg = tiny_pipeline(folds=(0,), unimodal=False, missing=False)
    rows = sweep(tiny_cohort, pcfg, "rank", [2, 4])
    assert len(rows) == 2 * 2  # (complete + decomposition row) per arm
    assert [r["value"] for r in rows] == [2, 2, 4, 4]
    write_sweep(rows, tmp_path)
    with open(tmp_path / "sweep.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + len(rows)
    assert (tmp_path / "sweep.svg").exists()


def test_sweep_rejects_bad_arms(tiny_cohort):
    pcfg = tiny_pipeline(folds=(0,), unimodal=False, missing=False)
    with pytest.raises(ConfigError):
        sweep(tiny_cohort, pcfg, "rank", [9])  # rank > D = 8
    with pytest.raises(ConfigError):
        sweep(tiny_cohort, pcfg, "depth", [1])


def test_pipeline_config_round_trip():
    p = tiny_pipeline(folds=(0, 2), denoiser_parameterization="x0")
    q = PipelineConfig.from_dict(json.loads(json.dumps(p.to_dict())))
    assert q.to_dict() == p.to_dict()
