"""Token embedding, intra-modal aggregation, cross-attention and specific extraction."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .diffcore import AttentionParams, Linear, ShapeError, TransformerBlock, cross_attention, gelu


@dataclass
class EncoderConfig:
    raw_path_dim: int = 64
    raw_gene_dim: int = 32
    n_gene_groups: int = 6
    dim: int = 256
    heads: int = 4
    agg_layers: int = 2
    gene_group_hidden: tuple[int, ...] = (64,)
    max_path_tokens: int = 2048

    def validate(self):
        from .synthcohort import ConfigError
        if self.dim <= 0:
            raise ConfigError("dim", "must be positive")
        if self.heads <= 0 or self.dim % self.heads:
            raise ConfigError("heads", f"dim {self.dim} not divisible by heads {self.heads}")
        if self.agg_layers < 1:
            raise ConfigError("agg_layers", "must be >= 1")


@dataclass
class TokenBatch:
    path: torch.Tensor       # (B, N, raw_path_dim), zero padded
    path_mask: torch.Tensor  # (B, N) bool, True for real tokens
    gene: torch.Tensor       # (B, G, raw_gene_dim)

    def __len__(self):
        return self.path.shape[0]

    def select(self, idx) -> "TokenBatch":
        mask = self.path_mask[idx]
        n = int(mask.sum(1).max())
        return TokenBatch(self.path[idx][:, :n], mask[:, :n], self.gene[idx])


def cap_tokens(tokens: np.ndarray, cap: int, seed: int) -> np.ndarray:
    """Uniform seeded subsample to at most ``cap`` rows (order preserved)."""
    if tokens.shape[0] <= cap:
        return tokens
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(tokens.shape[0], size=cap, replace=False))
    return tokens[keep]


def collate(records, dtype=torch.float32, max_tokens: int = 2048, seed: int = 0) -> TokenBatch:
    paths = [cap_tokens(r.path_tokens, max_tokens, seed + i) for i, r in enumerate(records)]
    n = max(p.shape[0] for p in paths)
    B, raw = len(records), paths[0].shape[1]
    path = np.zeros((B, n, raw), dtype=np.float64)
    mask = np.zeros((B, n), dtype=bool)
    for i, p in enumerate(paths):
        path[i, : p.shape[0]] = p
        mask[i, : p.shape[0]] = True
    gene = np.stack([r.gene_tokens for r in records]).astype(np.float64)
    return TokenBatch(torch.as_tensor(path, dtype=dtype), torch.as_tensor(mask),
                      torch.as_tensor(gene, dtype=dtype))


@dataclass
class EncoderOutputs:
    g_P: torch.Tensor | None = None
    g_G: torch.Tensor | None = None
    u_P: torch.Tensor | None = None
    u_G: torch.Tensor | None = None
    c_PG: torch.Tensor | None = None  # pathology queries over genomics
    c_GP: torch.Tensor | None = None  # genomics queries over pathology
    cls_uP: torch.Tensor | None = None
    cls_uG: torch.Tensor | None = None

    def detach(self) -> "EncoderOutputs":
        return EncoderOutputs(**{f.name: None if getattr(self, f.name) is None
                                 else getattr(self, f.name).detach() for f in fields(self)})


class GroupMLP(nn.Module):
    """One independent MLP per genomic group, stored as stacked weights."""

    def __init__(self, groups, d_in, hidden: Sequence[int], d_out, gen=None, dtype=torch.float32):
        super().__init__()
        sizes = [d_in, *hidden, d_out]
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for a, b in zip(sizes[:-1], sizes[1:]):
            bound = (6.0 / (a + b)) ** 0.5
            w = (torch.rand(groups, a, b, generator=gen, dtype=dtype) * 2 - 1) * bound
            self.weights.append(nn.Parameter(w))
            self.biases.append(nn.Parameter(torch.zeros(groups, b, dtype=dtype)))
        self.groups = groups

    def forward(self, x):
        if x.shape[-2] != self.groups:
            raise ShapeError(f"expected {self.groups} gene groups, got {x.shape[-2]}")
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = torch.einsum("...gi,gio->...go", x, w) + b
            if i < n - 1:
                x = gelu(x)
        return x


class SetPool(nn.Module):
    """Class token prepended to a token set, pooled after a stack of self-attention blocks."""

    def __init__(self, dim, heads, layers, gen=None, dtype=torch.float32):
        super().__init__()
        self.cls = nn.Parameter(0.02 * torch.randn(dim, generator=gen, dtype=dtype))
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads, gen, dtype) for _ in range(layers))

    def forward(self, tokens, mask=None):
        if tokens.shape[-2] == 0:
            raise ShapeError("cannot aggregate an empty token set")
        lead = tokens.shape[:-2]
        cls = self.cls.expand(*lead, 1, -1)
        x = torch.cat([cls, tokens], dim=-2)
        if mask is not None:
            mask = torch.cat([torch.ones(*lead, 1, dtype=torch.bool), mask], dim=-1)
        for blk in self.blocks:
            x = blk(x, mask)
        return x[..., 0, :]


class CrossPool(nn.Module):
    """A query-side class token cross-attends over the other modality's tokens."""

    def __init__(self, dim, heads, gen=None, dtype=torch.float32):
        super().__init__()
        self.cls = nn.Parameter(0.02 * torch.randn(dim, generator=gen, dtype=dtype))
        self.attn = AttentionParams(dim, gen, dtype, output=False)
        self.heads = heads

    def forward(self, query_tokens, key_tokens, key_mask=None, return_tokens=False):
        lead = key_tokens.shape[:-2]
        cls = self.cls.expand(*lead, 1, -1)
        queries = torch.cat([cls, query_tokens], dim=-2) if return_tokens else cls
        out = cross_attention(queries, key_tokens, self.attn, self.heads, key_mask)
        if return_tokens:
            return out[..., 0, :], out[..., 1:, :]
        return out[..., 0, :]


class ModalityEncoder(nn.Module):
    def __init__(self, embed: nn.Module, cfg: EncoderConfig, gen=None, dtype=torch.float32):
        super().__init__()
        D = cfg.dim
        self.embed = embed
        self.global_pool = SetPool(D, cfg.heads, cfg.agg_layers, gen, dtype)
        self.specific_pool = SetPool(D, cfg.heads, cfg.agg_layers, gen, dtype)
        self.cross = CrossPool(D, cfg.heads, gen, dtype)


class MUSTEncoder(nn.Module):
    """Pathology and genomics branches with no shared parameters.

    Projected embeddings feed the global aggregator, the cross-attention and
    the specific extractor in parallel.
    """

    def __init__(self, cfg: EncoderConfig, gen=None, dtype=torch.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        D = cfg.dim
        self.path = ModalityEncoder(Linear(cfg.raw_path_dim, D, gen, dtype), cfg, gen, dtype)
        self.gene = ModalityEncoder(
            GroupMLP(cfg.n_gene_groups, cfg.raw_gene_dim, cfg.gene_group_hidden, D, gen, dtype),
            cfg, gen, dtype)

    @property
    def cls_uP(self):
        return self.path.specific_pool.cls

    @property
    def cls_uG(self):
        return self.gene.specific_pool.cls

    def embed_pathology(self, path_tokens):
        if path_tokens.shape[-1] != self.cfg.raw_path_dim:
            raise ShapeError(f"pathology tokens have dim {path_tokens.shape[-1]}, "
                             f"expected {self.cfg.raw_path_dim}")
        return self.path.embed(path_tokens)

    def embed_genomics(self, gene_tokens):
        if gene_tokens.shape[-1] != self.cfg.raw_gene_dim:
            raise ShapeError(f"gene tokens have dim {gene_tokens.shape[-1]}, "
                             f"expected {self.cfg.raw_gene_dim}")
        return self.gene.embed(gene_tokens)

    def aggregate_global(self, tokens, modality, mask=None):
        enc = self.path if modality == "P" else self.gene
        return enc.global_pool(tokens, mask)

    def extract_specific(self, tokens, modality, mask=None):
        enc = self.path if modality == "P" else self.gene
        return enc.specific_pool(tokens, mask)

    def cross_attend(self, path_emb, gene_emb, path_mask=None, return_tokens=False):
        """(c_PG, c_GP): each side's class token attends over the other side's tokens."""
        if path_emb.shape[-2] == 0 or gene_emb.shape[-2] == 0:
            raise ShapeError("cross-attention needs both token sets nonempty")
        c_pg = self.path.cross(path_emb, gene_emb, None, return_tokens)
        c_gp = self.gene.cross(gene_emb, path_emb, path_mask, return_tokens)
        return c_pg, c_gp

    def forward(self, batch: TokenBatch, sides: str = "PG", specific=True, cross=True) -> EncoderOutputs:
        out = EncoderOutputs(cls_uP=self.cls_uP, cls_uG=self.cls_uG)
        pe = self.embed_pathology(batch.path) if "P" in sides or cross else None
        ge = self.embed_genomics(batch.gene) if "G" in sides or cross else None
        if "P" in sides:
            out.g_P = self.aggregate_global(pe, "P", batch.path_mask)
            if specific:
                out.u_P = self.extract_specific(pe, "P", batch.path_mask)
        if "G" in sides:
            out.g_G = self.aggregate_global(ge, "G")
            if specific:
                out.u_G = self.extract_specific(ge, "G")
        if cross:
            out.c_PG, out.c_GP = self.cross_attend(pe, ge, batch.path_mask)
        return out
