"""The full MUST network: encoders, shared projector and hazard head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import torch
from torch import nn

from .decomp import (Decomposition, SharedProjector, decomp_loss, fuse_decomposition,
                     fuse_for_prediction, orth_loss, project, shared_loss)
from .diffcore import resolve_dtype
from .encoders import EncoderConfig, EncoderOutputs, MUSTEncoder, TokenBatch
from .survival import HazardHead, HazardPrediction, nll_loss


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    rank: int = 64
    projector_mode: str = "exact"
    K: int = 4
    head_hidden: int = 256
    precision: str = "float32"
    seed: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder"]["gene_group_hidden"] = list(self.encoder.gene_group_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = dict(d.pop("encoder", {}))
        if "gene_group_hidden" in enc:
            enc["gene_group_hidden"] = tuple(enc["gene_group_hidden"])
        return cls(encoder=EncoderConfig(**enc), **d)


class MUSTModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.dtype = resolve_dtype(cfg.precision)
        gen = torch.Generator().manual_seed(cfg.seed)
        D = cfg.encoder.dim
        self.encoder = MUSTEncoder(cfg.encoder, gen, self.dtype)
        self.projector = SharedProjector(D, cfg.rank, cfg.projector_mode, gen, self.dtype)
        self.head = HazardHead(3 * D, cfg.K, cfg.head_hidden, gen, self.dtype)

    @property
    def dim(self) -> int:
        return self.cfg.encoder.dim

    def forward(self, batch: TokenBatch) -> tuple[EncoderOutputs, Decomposition, HazardPrediction]:
        enc = self.encoder(batch)
        dec = project(self.projector, enc)
        return enc, dec, self.head(fuse_decomposition(dec))

    def recovered_shared(self, enc: EncoderOutputs, modality: str):
        """``g_m - (I - P) u_m`` for the available modality ``m``."""
        if modality == "P":
            return enc.g_P - self.projector.specific(enc.u_P)
        return enc.g_G - self.projector.specific(enc.u_G)

    def main_objective(self, batch: TokenBatch, interval, event, lambdas=(1.0, 1.0, 0.5),
                       present_P=None, present_G=None, full_likelihood=False, lambda_proj=0.0,
                       stats=None, decomp_target: str = "live") -> dict[str, torch.Tensor]:
        """Stage-2 objective terms for one window (means over the window).

        Patients missing a modality (``present_* == False``) are scored on
        ``[u_P; c~; 0]`` or ``[0; c~; u_G]`` with survival loss only; no
        gradient reaches the absent branch from them. ``decomp_target`` sets how
        ``g`` is treated inside ``L_decomp`` (see :func:`decomp_target_of`); the
        loss value is the same in every case, only the gradient into ``g`` differs.
        """
        enc = self.encoder(batch)
        dec = project(self.projector, enc)
        fused = fuse_decomposition(dec)
        paired = None
        if present_P is not None or present_G is not None:
            B = len(batch)
            pP = torch.ones(B, dtype=torch.bool) if present_P is None else present_P
            pG = torch.ones(B, dtype=torch.bool) if present_G is None else present_G
            paired = pP & pG
            zero = torch.zeros_like(dec.hat_u_P)
            only_p = fuse_for_prediction(dec.hat_u_P, self.recovered_shared(enc, "P"), zero)
            only_g = fuse_for_prediction(zero, self.recovered_shared(enc, "G"), dec.hat_u_G)
            fused = torch.where(paired[:, None], fused,
                                torch.where(pP[:, None], only_p, only_g))
        pred = self.head(fused)
        surv = nll_loss(pred, interval, event, full_likelihood=full_likelihood, stats=stats)
        terms = {
            "decomp": decomp_loss(dec, decomp_target_of(enc, self.projector, decomp_target), reduce=False),
            "shared": shared_loss(dec, reduce=False),
            "orth": orth_loss(dec, reduce=False, intra=self.projector.mode != "exact"),
        }
        if paired is not None:
            terms = {k: torch.where(paired, v, torch.zeros_like(v)) for k, v in terms.items()}
        terms = {k: v.mean() for k, v in terms.items()}
        l_dec, l_sh, l_orth = lambdas
        total = surv + l_dec * terms["decomp"] + l_sh * terms["shared"] + l_orth * terms["orth"]
        out = {"surv": surv, **terms}
        if self.projector.mode == "penalty" and lambda_proj:
            out["proj_penalty"] = self.projector.penalty()
            total = total + lambda_proj * out["proj_penalty"]
        out["total"] = total
        return out


DECOMP_TARGETS = ("live", "detached", "split")


def decomp_target_of(enc: EncoderOutputs, projector, mode: str) -> EncoderOutputs:
    """Encoder outputs whose ``g`` carries the gradient routing of ``mode``.

    ``live``: ``g`` as computed. ``detached``: ``g`` is a constant target.
    ``split``: gradient reaches ``g`` only through its specific part
    ``(I - P) g``; the shared part ``P g`` is a constant target, so ``g``
    cannot shrink its shared part to meet a shrinking shared component.
    """
    if mode == "live":
        return enc
    if mode == "detached":
        return dataclasses.replace(enc, g_P=enc.g_P.detach(), g_G=enc.g_G.detach())
    if mode != "split":
        raise ValueError(f"unknown decomp target {mode!r}")
    B = projector.B.detach()

    def split(g):
        shared = (g @ B) @ B.T
        return g - shared + shared.detach()
    return dataclasses.replace(enc, g_P=split(enc.g_P), g_G=split(enc.g_G))


def parameter_hash(module: nn.Module) -> str:
    import hashlib
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
