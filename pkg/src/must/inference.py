"""Complete-data and missing-modality prediction paths.

With one modality absent, the shared component is recovered algebraically
from the available one (``c~ = g - (I - P) u``), the missing specific
component is generated by the matching denoiser (or set to zero for the
zero-imputation baseline), and the head scores ``[u_P; c; u_G]`` in the same
slot order as complete data.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .decomp import fuse_for_prediction
from .encoders import collate
from .ldm import LDM, ModalityMismatchError, generate_specific
from .model import MUSTModel
from .survival import HazardPrediction


@dataclass(frozen=True)
class ModalityMask:
    has_pathology: bool = True
    has_genomics: bool = True

    def __post_init__(self):
        if not (self.has_pathology or self.has_genomics):
            raise ValueError("at least one modality must be present")

    @property
    def complete(self) -> bool:
        return self.has_pathology and self.has_genomics

    @property
    def missing(self) -> str | None:
        if self.complete:
            return None
        return "P" if not self.has_pathology else "G"

    @property
    def tag(self) -> str:
        return {None: "complete", "P": "missing-P", "G": "missing-G"}[self.missing]

    @classmethod
    def from_missing(cls, missing: str | None) -> "ModalityMask":
        if missing in (None, "none", ""):
            return cls()
        if missing == "P":
            return cls(has_pathology=False)
        if missing == "G":
            return cls(has_genomics=False)
        raise ValueError(f"unknown missing modality {missing!r}")


@dataclass
class InferenceResult:
    ids: list[str]
    prediction: HazardPrediction
    mask: ModalityMask
    recovered_c: torch.Tensor | None = None
    generated_u: torch.Tensor | None = None
    timing: dict[str, float] = field(default_factory=dict)  # milliseconds per phase, whole batch

    @property
    def risk(self):
        return self.prediction.risk.detach().cpu().numpy()

    def per_patient_ms(self) -> float:
        return sum(self.timing.values()) / max(len(self.ids), 1)


def _clock():
    return time.perf_counter() * 1000.0


@torch.no_grad()
def predict_complete(model: MUSTModel, records) -> InferenceResult:
    t0 = _clock()
    batch = collate(records, model.dtype, model.cfg.encoder.max_path_tokens)
    enc, dec, pred = model(batch)
    t1 = _clock()
    return InferenceResult([r.id for r in records], pred, ModalityMask(),
                           recovered_c=dec.shared_c, timing={"forward": t1 - t0})


@torch.no_grad()
def recover_shared(model: MUSTModel, modality: str, records):
    """``c~ = g_m - (I - P) u_m`` computed from modality ``m`` alone."""
    batch = collate(records, model.dtype, model.cfg.encoder.max_path_tokens)
    enc = model.encoder(batch, sides=modality, cross=False)
    return model.recovered_shared(enc, modality)


@torch.no_grad()
def predict_missing(model: MUSTModel, records, mask: ModalityMask, ldm: LDM | None = None,
                    zero_impute: bool = False, ddim_steps: int = 50, n_samples: int = 5,
                    seed: int = 0) -> InferenceResult:
    if mask.complete:
        return predict_complete(model, records)
    missing = mask.missing
    avail = "G" if missing == "P" else "P"
    if not zero_impute:
        if ldm is None:
            raise ModalityMismatchError(f"missing {missing} needs a {missing} denoiser or zero_impute")
        if ldm.modality != missing:
            raise ModalityMismatchError(f"denoiser generates {ldm.modality!r}, missing modality is {missing!r}")
    ids = [r.id for r in records]
    timing = {}
    t0 = _clock()
    batch = collate(records, model.dtype, model.cfg.encoder.max_path_tokens)
    enc = model.encoder(batch, sides=avail, cross=False)
    u_avail = model.projector.specific(enc.u_P if avail == "P" else enc.u_G)
    c_rec = model.recovered_shared(enc, avail)
    timing["encode"] = _clock() - t0
    if zero_impute:
        u_gen = torch.zeros_like(u_avail)
    else:
        u_gen, ms = generate_specific(ldm, model, c_rec, ids, ddim_steps, n_samples, seed)
        timing["generate"] = ms
    t1 = _clock()
    if missing == "G":
        fused = fuse_for_prediction(u_avail, c_rec, u_gen)
    else:
        fused = fuse_for_prediction(u_gen, c_rec, u_avail)
    pred = model.head(fused)
    timing["head"] = _clock() - t1
    return InferenceResult(ids, pred, mask, recovered_c=c_rec, generated_u=u_gen, timing=timing)


def single_patient_latency(predict, records, limit: int = 16) -> float:
    """Mean wall-clock milliseconds of ``predict([record])`` over up to ``limit``
    patients, one call per patient (no batching across patients)."""
    recs = list(records)[:limit]
    if not recs:
        raise ValueError("no records to time")
    predict(recs[:1])  # warm-up call, not timed
    total = 0.0
    for r in recs:
        t0 = _clock()
        predict([r])
        total += _clock() - t0
    return total / len(recs)


def write_predictions_csv(path, result: InferenceResult) -> None:
    """One row per patient: id, mask, risk, hazards, timing (amortized ms)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    hz = result.prediction.hazards.detach().cpu().numpy()
    ms = result.per_patient_ms()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "mask", "risk", *[f"h{k + 1}" for k in range(hz.shape[1])], "ms"])
        for pid, risk, h in zip(result.ids, result.risk, hz):
            w.writerow([pid, result.mask.tag, repr(float(risk)), *[repr(float(x)) for x in h], f"{ms:.4f}"])
