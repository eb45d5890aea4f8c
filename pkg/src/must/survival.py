"""Discrete-time hazard head, survival curve, likelihood losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .diffcore import MLP

PROB_FLOOR = 1e-12


@dataclass
class HazardPrediction:
    hazards: torch.Tensor   # (B, K) in (0, 1)
    survival: torch.Tensor  # (B, K), S(k) = prod_{j<=k} (1 - h_j)
    risk: torch.Tensor      # (B,), sum_k (1 - S(k))


def hazards_to_prediction(hazards: torch.Tensor) -> HazardPrediction:
    survival = torch.cumprod(1.0 - hazards, dim=-1)
    risk = (1.0 - survival).sum(-1)
    return HazardPrediction(hazards, survival, risk)


class HazardHead(nn.Module):
    """Two-layer GELU MLP from the fused ``3D`` vector to ``K`` per-bin logits."""

    def __init__(self, in_dim: int, K: int, hidden: int = 256, gen=None, dtype=torch.float32):
        super().__init__()
        self.net = MLP([in_dim, hidden, K], gen, dtype)
        self.K = K

    def logits(self, fused):
        return self.net(fused)

    def forward(self, fused) -> HazardPrediction:
        if not torch.isfinite(fused).all():
            raise FloatingPointError("non-finite fused representation")
        return hazards_to_prediction(torch.sigmoid(self.net(fused)))


def nll_loss(pred: HazardPrediction, interval, event, reduce=True, full_likelihood=False,
             stats: dict | None = None):
    """``delta * -log h_k + (1 - delta) * -log S(k)``; intervals are 1-based.

    With ``full_likelihood`` the event branch also carries ``-log S(k-1)``.
    Probabilities are clamped at 1e-12 before the log; clamp hits are added
    to ``stats["clamped"]`` when a dict is given.
    """
    k = torch.as_tensor(interval, dtype=torch.long) - 1
    d = torch.as_tensor(event, dtype=pred.hazards.dtype)
    h_k = pred.hazards.gather(-1, k[:, None])[:, 0]
    s_k = pred.survival.gather(-1, k[:, None])[:, 0]
    if stats is not None:
        stats["clamped"] = stats.get("clamped", 0) + int(
            ((h_k < PROB_FLOOR) & (d > 0)).sum() + ((s_k < PROB_FLOOR) & (d < 1)).sum())
    event_term = -torch.log(h_k.clamp_min(PROB_FLOOR))
    if full_likelihood:
        s_prev = torch.where(k > 0, pred.survival.gather(-1, (k - 1).clamp_min(0)[:, None])[:, 0],
                             torch.ones_like(s_k))
        event_term = event_term - torch.log(s_prev.clamp_min(PROB_FLOOR))
    per = d * event_term + (1.0 - d) * -torch.log(s_k.clamp_min(PROB_FLOOR))
    return per.mean() if reduce else per


def warmup_inputs(g, sigma: float, gen=None):
    """``[g; eps]`` with ``eps ~ N(0, sigma^2 I)`` of width ``2D`` so the head sees ``3D``."""
    noise = torch.randn(*g.shape[:-1], 2 * g.shape[-1], generator=gen, dtype=g.dtype) * sigma
    return torch.cat([g, noise], dim=-1)


def warmup_loss(g_P, g_G, head: HazardHead, interval, event, sigma=0.1, gen=None,
                present_P=None, present_G=None, full_likelihood=False, stats=None):
    """Per-modality survival loss on noise-padded global representations.

    ``present_*`` masks drop a modality's term for patients lacking it.
    """
    total = 0.0
    for g, present in ((g_P, present_P), (g_G, present_G)):
        per = nll_loss(head(warmup_inputs(g, sigma, gen)), interval, event, reduce=False,
                       full_likelihood=full_likelihood, stats=stats)
        if present is not None:
            per = torch.where(present, per, torch.zeros_like(per))
        total = total + per.mean()
    return total
