"""Synthetic multimodal survival cohorts with planted shared/specific structure.

Each patient has three latent factors: ``z_s`` (shared, injected into both
modalities), ``z_p`` (pathology only) and ``z_g`` (genomics only). Pathology
tokens are random per-token mixtures of fixed loading matrices applied to
``(z_s, z_p)``; genomic group tokens apply one loading pair per group to
``(z_s, z_g)``. The true risk is linear in all three factors and event times
follow discrete hazards through a logistic link, with independent uniform
censoring.

On-disk layout::

    <dir>/manifest.json
    <dir>/labels.csv                  id,time,event,interval
    <dir>/tokens/<id>.path.mstk
    <dir>/tokens/<id>.gene.mstk
    <dir>/provenance/true_risk.csv    oracle sidecar, never read by training
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FORMAT_NAME = "must-cohort"
FORMAT_VERSION = 1
TOKEN_MAGIC = b"MSTK1"
_TOKEN_HEADER = struct.Struct("<5sII")


class ConfigError(ValueError):
    """A configuration value is out of range; ``field`` names the culprit."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class InsufficientDataError(ValueError):
    pass


class DegenerateGridError(ValueError):
    pass


class CohortFormatError(Exception):
    pass


class BadMagicError(CohortFormatError):
    pass


class VersionMismatchError(CohortFormatError):
    pass


class TruncatedPayloadError(CohortFormatError):
    pass


class ManifestMismatchError(CohortFormatError):
    pass


@dataclass
class GeneratorConfig:
    seed: int = 0
    num_patients: int = 600
    d_shared: int = 4
    d_spec_p: int = 4
    d_spec_g: int = 4
    n_path_tokens_range: tuple[int, int] = (16, 48)
    n_gene_groups: int = 6
    raw_path_dim: int = 64
    raw_gene_dim: int = 32
    noise_std: float = 0.5
    censor_rate: float = 0.3
    # None -> constant-direction vectors with norms (2.0, 1.5, 1.5)
    risk_weights: tuple[Sequence[float], Sequence[float], Sequence[float]] | None = None
    n_intervals: int = 4
    n_folds: int = 5
    n_prototypes: int = 4
    base_hazard: float = 0.05
    max_path_tokens: int = 2048

    def validate(self) -> None:
        if self.num_patients < 10:
            raise ConfigError("num_patients", f"must be >= 10, got {self.num_patients}")
        lo, hi = self.n_path_tokens_range
        if lo < 1:
            raise ConfigError("n_path_tokens_range", f"minimum must be >= 1, got {lo}")
        if hi < lo:
            raise ConfigError("n_path_tokens_range", f"max {hi} < min {lo}")
        if hi > self.max_path_tokens:
            raise ConfigError("n_path_tokens_range", f"max {hi} exceeds cap {self.max_path_tokens}")
        for name in ("d_shared", "d_spec_p", "d_spec_g", "n_gene_groups", "raw_path_dim",
                     "raw_gene_dim", "n_intervals", "n_prototypes"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if not 0.0 <= self.censor_rate <= 1.0:
            raise ConfigError("censor_rate", f"must lie in [0, 1], got {self.censor_rate}")
        if self.noise_std < 0:
            raise ConfigError("noise_std", "must be nonnegative")
        if not 0.0 < self.base_hazard < 1.0:
            raise ConfigError("base_hazard", "must lie in (0, 1)")
        if not 2 <= self.n_folds <= self.num_patients:
            raise ConfigError("n_folds", f"must lie in [2, num_patients], got {self.n_folds}")
        if self.risk_weights is not None:
            if len(self.risk_weights) != 3:
                raise ConfigError("risk_weights", "expected three vectors (shared, path, gene)")
            for vec, dim, part in zip(self.risk_weights,
                                      (self.d_shared, self.d_spec_p, self.d_spec_g),
                                      ("shared", "path", "gene")):
                if len(vec) != dim:
                    raise ConfigError("risk_weights", f"{part} vector has length {len(vec)}, expected {dim}")
                if not all(math.isfinite(float(v)) for v in vec):
                    raise ConfigError("risk_weights", f"{part} vector has non-finite entries")

    def resolved_risk_weights(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self.risk_weights is not None:
            return tuple(np.asarray(w, dtype=np.float64) for w in self.risk_weights)
        out = []
        for dim, norm in ((self.d_shared, 2.0), (self.d_spec_p, 1.5), (self.d_spec_g, 1.5)):
            out.append(np.full(dim, norm / math.sqrt(dim)))
        return tuple(out)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["n_path_tokens_range"] = list(self.n_path_tokens_range)
        if self.risk_weights is not None:
            d["risk_weights"] = [list(map(float, w)) for w in self.risk_weights]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "n_path_tokens_range" in d:
            d["n_path_tokens_range"] = tuple(int(v) for v in d["n_path_tokens_range"])
        if d.get("risk_weights") is not None:
            d["risk_weights"] = tuple(tuple(float(v) for v in w) for w in d["risk_weights"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown generator key")
        return cls(**d)


@dataclass
class PatientRecord:
    id: str
    path_tokens: np.ndarray  # (N_P, raw_path_dim) float32
    gene_tokens: np.ndarray  # (n_gene_groups, raw_gene_dim) float32
    time: float
    event: int
    interval: int  # 1-based: tau_{interval-1} <= time < tau_interval

    def __eq__(self, other) -> bool:
        if not isinstance(other, PatientRecord):
            return NotImplemented
        return (self.id == other.id and self.time == other.time and self.event == other.event
                and self.interval == other.interval
                and self.path_tokens.dtype == other.path_tokens.dtype
                and np.array_equal(self.path_tokens, other.path_tokens)
                and self.gene_tokens.dtype == other.gene_tokens.dtype
                and np.array_equal(self.gene_tokens, other.gene_tokens))


@dataclass(frozen=True)
class TimeGrid:
    """Interval boundaries ``0 = tau_0 < tau_1 < ... < tau_K = inf``."""

    boundaries: tuple[float, ...]

    def __post_init__(self):
        b = self.boundaries
        if len(b) < 2 or b[0] != 0.0 or not math.isinf(b[-1]):
            raise DegenerateGridError("grid must start at 0 and end at +inf")
        if any(not b[i] < b[i + 1] for i in range(len(b) - 1)):
            raise DegenerateGridError(f"boundaries not strictly increasing: {b}")

    @property
    def K(self) -> int:
        return len(self.boundaries) - 1

    @property
    def interior(self) -> tuple[float, ...]:
        return self.boundaries[1:-1]

    def interval_of(self, times) -> np.ndarray:
        """1-based interval index of each time."""
        t = np.asarray(times, dtype=np.float64)
        return np.searchsorted(np.asarray(self.interior), t, side="right") + 1


@dataclass
class Cohort:
    records: list[PatientRecord]
    grid: TimeGrid
    folds: list[list[str]]
    provenance: GeneratorConfig
    true_risk: dict[str, float] = field(default_factory=dict, repr=False)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def by_id(self) -> dict[str, PatientRecord]:
        return {r.id: r for r in self.records}

    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.records])

    def events(self) -> np.ndarray:
        return np.array([r.event for r in self.records], dtype=np.int64)

    def split(self, fold: int) -> tuple[list[PatientRecord], list[PatientRecord]]:
        """(train, test) records for ``fold``."""
        test_ids = set(self.folds[fold])
        train = [r for r in self.records if r.id not in test_ids]
        test = [r for r in self.records if r.id in test_ids]
        return train, test


def discretize(times, events, K: int) -> TimeGrid:
    """Interval boundaries at empirical quantiles of uncensored times.

    Interior boundary ``k`` sits at the midpoint of the order statistics
    straddling fraction ``k/K`` of the sorted event times, so every bin holds
    ``n/K`` events up to rounding when times are distinct.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    if K < 1:
        raise ConfigError("K", "must be >= 1")
    observed = np.sort(times[events])
    n = observed.size
    if n < K:
        raise InsufficientDataError(f"need at least K={K} uncensored times, got {n}")
    interior = []
    for k in range(1, K):
        m = int(math.floor(k * n / K + 0.5))
        m = min(max(m, 1), n - 1)
        interior.append(0.5 * (observed[m - 1] + observed[m]))
    bounds = (0.0, *interior, math.inf)
    if any(not bounds[i] < bounds[i + 1] for i in range(K)):
        raise DegenerateGridError(f"tied event times collapse the grid: {bounds}")
    return TimeGrid(tuple(float(b) for b in bounds))


def _fold_split(ids: list[str], n_folds: int, rng: np.random.Generator) -> list[list[str]]:
    order = rng.permutation(len(ids))
    return [sorted(ids[i] for i in chunk) for chunk in np.array_split(order, n_folds)]


def _calibrate_censor_horizon(event_times: np.ndarray, rate: float) -> float:
    """Upper end ``c`` of U(0, c) censoring giving expected censored fraction ``rate``.

    For C ~ U(0, c), P(C < T) = min(T / c, 1); the mean over patients is
    decreasing in c, so bisection finds the horizon.
    """
    def frac(c):
        return float(np.mean(np.minimum(event_times / c, 1.0)))

    lo, hi = 1e-12, float(event_times.max())
    while frac(hi) > rate:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if frac(mid) > rate:
            lo = mid
        else:
            hi = mid
    return hi


def generate(cfg: GeneratorConfig) -> Cohort:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.num_patients
    ds, dp, dg = cfg.d_shared, cfg.d_spec_p, cfg.d_spec_g
    M, G = cfg.n_prototypes, cfg.n_gene_groups

    # fixed loadings; scaled so each token's signal part has unit-order variance
    path_ls = rng.standard_normal((M, cfg.raw_path_dim, ds)) / math.sqrt(ds + dp)
    path_lp = rng.standard_normal((M, cfg.raw_path_dim, dp)) / math.sqrt(ds + dp)
    gene_ls = rng.standard_normal((G, cfg.raw_gene_dim, ds)) / math.sqrt(ds + dg)
    gene_lg = rng.standard_normal((G, cfg.raw_gene_dim, dg)) / math.sqrt(ds + dg)

    z_s = rng.standard_normal((n, ds))
    z_p = rng.standard_normal((n, dp))
    z_g = rng.standard_normal((n, dg))

    lo, hi = cfg.n_path_tokens_range
    n_tokens = rng.integers(lo, hi + 1, size=n)

    path_tokens, gene_tokens = [], []
    for i in range(n):
        proto = np.einsum("mrd,d->mr", path_ls, z_s[i]) + np.einsum("mrd,d->mr", path_lp, z_p[i])
        mix = rng.dirichlet(np.ones(M), size=n_tokens[i])
        tok = mix @ proto + cfg.noise_std * rng.standard_normal((n_tokens[i], cfg.raw_path_dim))
        path_tokens.append(tok.astype(np.float32))
        gtok = (np.einsum("grd,d->gr", gene_ls, z_s[i]) + np.einsum("grd,d->gr", gene_lg, z_g[i])
                + cfg.noise_std * rng.standard_normal((G, cfg.raw_gene_dim)))
        gene_tokens.append(gtok.astype(np.float32))

    w_s, w_p, w_g = cfg.resolved_risk_weights()
    true_risk = z_s @ w_s + z_p @ w_p + z_g @ w_g

    # geometric event step under a logistic hazard, jittered within the step
    base = math.log(cfg.base_hazard / (1.0 - cfg.base_hazard))
    hazard = 1.0 / (1.0 + np.exp(-(base + true_risk)))
    u_event = rng.uniform(size=n)
    u_jitter = rng.uniform(size=n)
    u_censor = rng.uniform(size=n)
    log_surv = np.log1p(-np.minimum(hazard, 1.0 - 1e-12))
    step = np.maximum(np.ceil(np.log1p(-u_event) / log_surv), 1.0)
    event_time = step - 1.0 + np.clip(u_jitter, 1e-9, 1.0)

    if cfg.censor_rate > 0.0:
        horizon = _calibrate_censor_horizon(event_time, cfg.censor_rate)
        censor_time = np.maximum(u_censor * horizon, 1e-9)
    else:
        censor_time = np.full(n, np.inf)
    time = np.minimum(event_time, censor_time)
    event = (event_time <= censor_time).astype(np.int64)

    grid = discretize(time, event, cfg.n_intervals)
    intervals = grid.interval_of(time)
    ids = [f"P{i:05d}" for i in range(n)]
    records = [
        PatientRecord(ids[i], path_tokens[i], gene_tokens[i], float(time[i]), int(event[i]), int(intervals[i]))
        for i in range(n)
    ]
    folds = _fold_split(ids, cfg.n_folds, rng)
    return Cohort(records, grid, folds, cfg, {ids[i]: float(true_risk[i]) for i in range(n)})


# ---------------------------------------------------------------------------
# serialization


def write_tokens(path: Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("token blobs are 2-D")
    with open(path, "wb") as fh:
        fh.write(_TOKEN_HEADER.pack(TOKEN_MAGIC, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes(order="C"))


def read_tokens(path: Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _TOKEN_HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    magic, rows, cols = _TOKEN_HEADER.unpack_from(blob)
    if magic != TOKEN_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    expected = _TOKEN_HEADER.size + 4 * rows * cols
    if len(blob) != expected:
        raise TruncatedPayloadError(f"{path}: {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=_TOKEN_HEADER.size, count=rows * cols)
    return data.reshape(rows, cols).astype(np.float32)


def save_cohort(cohort: Cohort, directory) -> None:
    root = Path(directory)
    (root / "tokens").mkdir(parents=True, exist_ok=True)
    (root / "provenance").mkdir(exist_ok=True)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "n_patients": len(cohort.records),
        "ids": cohort.ids,
        "grid": {"K": cohort.grid.K, "interior": list(cohort.grid.interior)},
        "folds": cohort.folds,
        "generator": cohort.provenance.to_dict(),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "time", "event", "interval"])
    for r in cohort.records:
        w.writerow([r.id, repr(float(r.time)), r.event, r.interval])
    (root / "labels.csv").write_text(buf.getvalue())

    for r in cohort.records:
        write_tokens(root / "tokens" / f"{r.id}.path.mstk", r.path_tokens)
        write_tokens(root / "tokens" / f"{r.id}.gene.mstk", r.gene_tokens)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "true_risk"])
    for rid in cohort.ids:
        if rid in cohort.true_risk:
            w.writerow([rid, repr(float(cohort.true_risk[rid]))])
    (root / "provenance" / "true_risk.csv").write_text(buf.getvalue())


def load_cohort(directory, with_oracle: bool = False) -> Cohort:
    root = Path(directory)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise CohortFormatError(f"manifest is not valid JSON: {exc}") from None
    if manifest.get("format") != FORMAT_NAME:
        raise BadMagicError(f"manifest format {manifest.get('format')!r} != {FORMAT_NAME!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"cohort version {manifest.get('version')} != {FORMAT_VERSION}")

    with open(root / "labels.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = manifest["ids"]
    if len(rows) != manifest["n_patients"] or len(ids) != manifest["n_patients"]:
        raise ManifestMismatchError(
            f"manifest lists {manifest['n_patients']} patients, labels.csv has {len(rows)}")
    if [row["id"] for row in rows] != ids:
        raise ManifestMismatchError("labels.csv ids disagree with manifest order")

    records = []
    for row in rows:
        rid = row["id"]
        records.append(PatientRecord(
            rid,
            read_tokens(root / "tokens" / f"{rid}.path.mstk"),
            read_tokens(root / "tokens" / f"{rid}.gene.mstk"),
            float(row["time"]),
            int(row["event"]),
            int(row["interval"]),
        ))
    grid = TimeGrid((0.0, *map(float, manifest["grid"]["interior"]), math.inf))
    if grid.K != manifest["grid"]["K"]:
        raise ManifestMismatchError("grid K disagrees with its boundaries")
    cfg = GeneratorConfig.from_dict(manifest["generator"])
    true_risk = {}
    if with_oracle:
        with open(root / "provenance" / "true_risk.csv", newline="") as fh:
            true_risk = {row["id"]: float(row["true_risk"]) for row in csv.DictReader(fh)}
    return Cohort(records, grid, [list(f) for f in manifest["folds"]], cfg, true_risk)
