import dataclasses
import filecmp
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import TINY_GEN
from must.metrics import c_index
from must.synthcohort import (BadMagicError, ConfigError, DegenerateGridError, GeneratorConfig,
                              InsufficientDataError, ManifestMismatchError, TimeGrid,
                              TruncatedPayloadError, VersionMismatchError, discretize, generate,
                              load_cohort, read_tokens, save_cohort, write_tokens)


# --- config validation -----------------------------------------------------

@pytest.mark.parametrize("field,value", [
    ("num_patients", 5),
    ("n_path_tokens_range", (0, 4)),
    ("n_path_tokens_range", (8, 4)),
    ("censor_rate", 1.5),
    ("noise_std", -1.0),
    ("base_hazard", 1.0),
    ("n_folds", 1),
    ("d_shared", 0),
    ("risk_weights", ((1.0,), (1.0, 1.0), (1.0, 1.0))),
])
def test_invalid_config_names_the_field(field, value):
    cfg = dataclasses.replace(TINY_GEN, **{field: value})
    with pytest.raises(ConfigError) as info:
        generate(cfg)
    assert info.value.field == field


def test_config_dict_round_trip():
    cfg = dataclasses.replace(TINY_GEN, risk_weights=((1.0, 0.0), (0.5, 0.5), (0.0, 2.0)))
    assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg


# --- generation ------------------------------------------------------------

def test_shapes_and_ranges(tiny_cohort):
    cfg = TINY_GEN
    assert len(tiny_cohort.records) == cfg.num_patients
    for r in tiny_cohort.records:
        lo, hi = cfg.n_path_tokens_range
        assert lo <= r.path_tokens.shape[0] <= hi
        assert r.path_tokens.shape[1] == cfg.raw_path_dim
        assert r.gene_tokens.shape == (cfg.n_gene_groups, cfg.raw_gene_dim)
        assert r.path_tokens.dtype == np.float32
        assert r.time > 0 and r.event in (0, 1)
        assert 1 <= r.interval <= cfg.n_intervals


def test_intervals_are_one_based_and_consistent(tiny_cohort):
    b = tiny_cohort.grid.boundaries
    for r in tiny_cohort.records:
        assert b[r.interval - 1] <= r.time < b[r.interval]


def test_folds_partition_ids(tiny_cohort):
    flat = [i for f in tiny_cohort.folds for i in f]
    assert sorted(flat) == sorted(tiny_cohort.ids)
    sizes = [len(f) for f in tiny_cohort.folds]
    assert max(sizes) - min(sizes) <= 1
    train, test = tiny_cohort.split(0)
    assert {r.id for r in train}.isdisjoint({r.id for r in test})
    assert len(train) + len(test) == len(tiny_cohort.records)


def test_same_config_gives_byte_identical_files(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    save_cohort(generate(TINY_GEN), a)
    save_cohort(generate(TINY_GEN), b)
    cmp = filecmp.dircmp(a, b)
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sub in ("tokens", "provenance"):
        _, mismatch, errors = filecmp.cmpfiles(a / sub, b / sub, [p.name for p in (a / sub).iterdir()],
                                               shallow=False)
        assert not mismatch and not errors


def test_different_seed_changes_cohort():
    a = generate(TINY_GEN)
    b = generate(dataclasses.replace(TINY_GEN, seed=TINY_GEN.seed + 1))
    assert not np.array_equal(a.times(), b.times())


def test_censor_rate_is_respected():
    cohort = generate(dataclasses.replace(TINY_GEN, num_patients=400, censor_rate=0.3))
    assert abs(1.0 - cohort.events().mean() - 0.3) < 0.08
    none = generate(dataclasses.replace(TINY_GEN, censor_rate=0.0))
    assert none.events().all()


def test_oracle_c_index_default_config():
    cohort = generate(GeneratorConfig(num_patients=600, n_path_tokens_range=(2, 4)))
    risk = np.array([cohort.true_risk[i] for i in cohort.ids])
    assert c_index(risk, cohort.times(), cohort.events()) >= 0.85


def test_zero_weights_give_chance_oracle():
    cfg = dataclasses.replace(TINY_GEN, num_patients=600, risk_weights=((0, 0), (0, 0), (0, 0)))
    cohort = generate(cfg)
    # the true risk is identically zero, so every comparable pair is a tie
    risk = np.array([cohort.true_risk[i] for i in cohort.ids])
    assert c_index(risk, cohort.times(), cohort.events()) == pytest.approx(0.5)
    # and a random score is near chance as well
    noise = np.random.default_rng(0).standard_normal(len(risk))
    assert abs(c_index(noise, cohort.times(), cohort.events()) - 0.5) < 0.06


def test_higher_true_risk_means_earlier_events():
    cohort = generate(dataclasses.replace(TINY_GEN, num_patients=600, censor_rate=0.0))
    risk = np.array([cohort.true_risk[i] for i in cohort.ids])
    order = np.argsort(risk)
    t = cohort.times()[order]
    low, high = t[: len(t) // 3], t[-len(t) // 3:]
    assert np.median(high) < np.median(low)


# --- discretize ------------------------------------------------------------

def test_discretize_four_times_four_bins():
    grid = discretize([1, 2, 3, 4], [1, 1, 1, 1], 4)
    assert list(grid.interval_of([1, 2, 3, 4])) == [1, 2, 3, 4]


def test_discretize_all_equal_is_degenerate():
    with pytest.raises(DegenerateGridError):
        discretize([2.0] * 10, [1] * 10, 4)


def test_discretize_needs_k_events():
    with pytest.raises(InsufficientDataError):
        discretize([1, 2, 3, 4], [1, 1, 0, 0], 4)


def test_discretize_uniform_quartiles(rng):
    t = rng.uniform(0, 10, 100)
    grid = discretize(t, np.ones(100), 4)
    for got, want in zip(grid.interior, (2.5, 5.0, 7.5)):
        assert abs(got - want) < 1.5
    counts = np.bincount(grid.interval_of(t), minlength=5)[1:]
    assert all(24 <= c <= 26 for c in counts)


def test_time_grid_rejects_bad_boundaries():
    with pytest.raises(DegenerateGridError):
        TimeGrid((0.0, 2.0, 1.0, math.inf))
    with pytest.raises(DegenerateGridError):
        TimeGrid((1.0, math.inf))


@given(st.lists(st.floats(0.01, 100.0, allow_nan=False), min_size=8, max_size=60, unique=True),
       st.integers(1, 6))
def test_discretize_properties(times, K):
    times = np.array(times)
    if len(times) < K:
        return
    grid = discretize(times, np.ones(len(times)), K)
    assert grid.K == K
    b = np.array(grid.boundaries)
    assert b[0] == 0 and np.isinf(b[-1]) and np.all(np.diff(b) > 0)
    iv = grid.interval_of(times)
    assert iv.min() >= 1 and iv.max() <= K
    assert np.all(b[iv - 1] <= times) and np.all(times < b[iv])
    counts = np.bincount(iv, minlength=K + 1)[1:]
    assert counts.max() - counts.min() <= 2


@given(st.lists(st.floats(0.0, 50.0, allow_nan=False), min_size=1, max_size=30))
def test_interval_of_is_monotone(times):
    grid = TimeGrid((0.0, 1.0, 5.0, 20.0, math.inf))
    t = np.sort(np.array(times))
    assert np.all(np.diff(grid.interval_of(t)) >= 0)


# --- serialization ---------------------------------------------------------

def test_round_trip_is_exact(tiny_cohort, tmp_path):
    save_cohort(tiny_cohort, tmp_path)
    loaded = load_cohort(tmp_path, with_oracle=True)
    assert loaded.records == tiny_cohort.records
    assert loaded.grid == tiny_cohort.grid
    assert loaded.folds == tiny_cohort.folds
    assert loaded.provenance == tiny_cohort.provenance
    assert loaded.true_risk == tiny_cohort.true_risk


@given(rows=st.integers(1, 5), cols=st.integers(1, 7))
def test_token_blob_round_trip(rows, cols, tmp_path_factory):
    path = tmp_path_factory.mktemp("blob") / "x.mstk"
    arr = np.random.default_rng(rows * 31 + cols).standard_normal((rows, cols)).astype(np.float32)
    write_tokens(path, arr)
    assert np.array_equal(read_tokens(path), arr)


def test_corrupted_magic(tiny_cohort, tmp_path):
    save_cohort(tiny_cohort, tmp_path)
    blob = next((tmp_path / "tokens").iterdir())
    data = bytearray(blob.read_bytes())
    data[:5] = b"XXXXX"
    blob.write_bytes(bytes(data))
    with pytest.raises(BadMagicError):
        load_cohort(tmp_path)


def test_truncated_payload(tiny_cohort, tmp_path):
    save_cohort(tiny_cohort, tmp_path)
    blob = next((tmp_path / "tokens").iterdir())
    blob.write_bytes(blob.read_bytes()[:-3])
    with pytest.raises(TruncatedPayloadError):
        load_cohort(tmp_path)


def test_version_mismatch(tiny_cohort, tmp_path):
    save_cohort(tiny_cohort, tmp_path)
    m = tmp_path / "manifest.json"
    m.write_text(m.read_text().replace('"version": 1', '"version": 99'))
    with pytest.raises(VersionMismatchError):
        load_cohort(tmp_path)


def test_label_count_mismatch(tiny_cohort, tmp_path):
    save_cohort(tiny_cohort, tmp_path)
    labels = tmp_path / "labels.csv"
    lines = labels.read_text().splitlines()
    labels.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ManifestMismatchError):
        load_cohort(tmp_path)
