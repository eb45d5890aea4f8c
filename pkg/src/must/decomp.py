"""Low-rank shared subspace and the algebraic decomposition losses.

``P = B B^T`` projects onto the shared subspace. Shared components are
``P c``; modality-specific components are ``(I - P) u``. In ``exact`` mode B is
retracted onto orthonormal columns after every optimizer step, so P is an
orthogonal projector; in ``penalty`` mode B is free and
``||B^T B - I||_F^2`` is added to the objective instead.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from torch import nn

from .encoders import EncoderOutputs

log = logging.getLogger(__name__)

COS_EPS = 1e-8


class SharedProjector(nn.Module):
    def __init__(self, dim: int, rank: int, mode: str = "exact", gen=None, dtype=torch.float32):
        super().__init__()
        from .synthcohort import ConfigError
        if not 1 <= rank <= dim:
            raise ConfigError("rank", f"must satisfy 1 <= r <= D={dim}, got {rank}")
        if mode not in ("exact", "penalty"):
            raise ConfigError("projector_mode", f"unknown mode {mode!r}")
        self.mode = mode
        self.rank = rank
        self._gen = gen
        q, _ = torch.linalg.qr(torch.randn(dim, rank, generator=gen, dtype=torch.float64))
        self.B = nn.Parameter(q.to(dtype).contiguous())

    def matrix(self) -> torch.Tensor:
        return self.B @ self.B.T

    def shared(self, x):
        """P x (batched over leading axes)."""
        return (x @ self.B) @ self.B.T

    def specific(self, x):
        """(I - P) x."""
        return x - self.shared(x)

    def penalty(self) -> torch.Tensor:
        eye = torch.eye(self.rank, dtype=self.B.dtype)
        return ((self.B.T @ self.B - eye) ** 2).sum()

    @torch.no_grad()
    def init_from_cross_covariance(self, a, b):
        """Set B to the top-r eigenvectors of sym(a^T b / n), sorted descending."""
        a, b = a.to(torch.float64), b.to(torch.float64)
        cov = a.T @ b / max(len(a), 1)
        _, vecs = torch.linalg.eigh(0.5 * (cov + cov.T))
        self.B.copy_(vecs[:, -self.rank:].flip(-1).to(self.B.dtype))
        self.retract()

    @torch.no_grad()
    def retract(self, tol: float = 1e-10) -> list[int]:
        """Replace B by the sign-fixed thin-QR factor of its column space.

        Columns whose R diagonal falls below ``tol * max|diag R|`` are redrawn
        at random and re-orthonormalized; their indices are returned and logged.
        """
        B = self.B.detach().to(torch.float64)
        if not torch.isfinite(B).all():
            raise FloatingPointError("projector basis has non-finite entries")
        q, r = torch.linalg.qr(B)
        diag = torch.diagonal(r)
        scale = diag.abs().max().item()
        bad = [j for j in range(self.rank) if abs(diag[j].item()) <= tol * max(scale, 1e-300)]
        if bad:
            log.warning("projector basis rank-deficient; re-initialising columns %s", bad)
            fresh = B.clone()
            for j in bad:
                fresh[:, j] = torch.randn(B.shape[0], generator=self._gen, dtype=torch.float64)
            q, r = torch.linalg.qr(fresh)
            diag = torch.diagonal(r)
        signs = torch.where(diag < 0, -1.0, 1.0).to(q.dtype)
        self.B.copy_((q * signs).to(self.B.dtype))
        return bad


@dataclass
class Decomposition:
    hat_c_PG: torch.Tensor
    hat_c_GP: torch.Tensor
    hat_u_P: torch.Tensor
    hat_u_G: torch.Tensor

    @property
    def shared_c(self) -> torch.Tensor:
        return 0.5 * (self.hat_c_PG + self.hat_c_GP)


def project(projector: SharedProjector, enc: EncoderOutputs) -> Decomposition:
    return Decomposition(
        hat_c_PG=projector.shared(enc.c_PG),
        hat_c_GP=projector.shared(enc.c_GP),
        hat_u_P=projector.specific(enc.u_P),
        hat_u_G=projector.specific(enc.u_G),
    )


def sq_norm(x):
    return (x ** 2).sum(-1)


def cosine(a, b, eps: float = COS_EPS):
    """Cosine along the last axis; 0 when either vector is shorter than ``eps``."""
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    ok = (na >= eps) & (nb >= eps)
    denom = torch.where(ok, na * nb, torch.ones_like(na))
    return torch.where(ok, (a * b).sum(-1) / denom, torch.zeros_like(na))


def decomp_loss(dec: Decomposition, enc: EncoderOutputs, reduce=True):
    per = sq_norm(enc.g_P - (dec.hat_u_P + dec.hat_c_GP)) + sq_norm(enc.g_G - (dec.hat_u_G + dec.hat_c_PG))
    return per.mean() if reduce else per


def shared_loss(dec: Decomposition, reduce=True):
    per = sq_norm(dec.hat_c_PG - dec.hat_c_GP)
    return per.mean() if reduce else per


def orth_loss(dec: Decomposition, reduce=True, intra=True):
    """``|cos(u_P, u_G)| + |cos(u_P, c_PG)| + |cos(u_G, c_GP)|``.

    The pairing of specific and shared terms is kept as written in the
    objective. With ``intra=False`` the last two terms are taken as exactly
    zero, which they are algebraically when P is an orthogonal projector;
    evaluating them would only feed round-off through the kink of ``|.|``.
    """
    per = cosine(dec.hat_u_P, dec.hat_u_G).abs()
    if intra:
        per = per + cosine(dec.hat_u_P, dec.hat_c_PG).abs() + cosine(dec.hat_u_G, dec.hat_c_GP).abs()
    return per.mean() if reduce else per


def fuse_for_prediction(u_P, c, u_G):
    """Fixed slot layout ``[u_P; c; u_G]`` shared by every inference path."""
    return torch.cat([u_P, c, u_G], dim=-1)


def fuse_decomposition(dec: Decomposition):
    return fuse_for_prediction(dec.hat_u_P, dec.shared_c, dec.hat_u_G)
