"""Small differentiable kernel: functional layers, parameter modules, AdamW, grad checks.

Reverse-mode gradients come from torch autograd. The layer math (softmax,
attention, layer norm, GELU) is written out here so every op the model uses
is visible and individually gradient-checked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ShapeError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class NonFiniteLossError(FloatingPointError):
    pass


def resolve_dtype(dtype) -> torch.dtype:
    if isinstance(dtype, torch.dtype):
        return dtype
    try:
        return DTYPES[dtype]
    except KeyError:
        raise ValueError(f"unsupported precision {dtype!r}; use one of {sorted(DTYPES)}") from None


# ---------------------------------------------------------------------------
# functional ops


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` shaped (d_in, d_out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight rows {weight.shape[0]}")
    return F.linear(x, weight.T, bias)


def softmax(x, axis: int = -1, mask=None):
    """Max-shifted softmax. ``mask`` (broadcastable, bool) marks admissible entries."""
    if mask is not None:
        x = x.masked_fill(~mask, float("-inf"))
    shift = x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(x - shift)
    return e / e.sum(dim=axis, keepdim=True)


def gelu(x):
    """Exact GELU, ``0.5 x (1 + erf(x / sqrt 2))``."""
    return F.gelu(x)


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5):
    """``(x - mean) / sqrt(biased var + eps)`` over the last axis, then affine."""
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def _split_heads(x, heads):
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).transpose(-3, -2)


def _merge_heads(x):
    *lead, h, n, dh = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, h * dh)


def attention(q, k, v, heads: int, key_mask=None):
    """Scaled dot-product attention over already-projected q, k, v.

    ``q``: (..., Nq, D), ``k``/``v``: (..., Nk, D), ``key_mask``: (..., Nk) bool.
    The scale is ``1/sqrt(D/heads)``, i.e. per-head width.
    """
    d = q.shape[-1]
    if d % heads:
        raise ShapeError(f"feature dim {d} not divisible by {heads} heads")
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    mask = None if key_mask is None else key_mask[..., None, None, :]
    # fused softmax(q k^T / sqrt(d_head) + mask) v; a True mask entry takes part
    return _merge_heads(F.scaled_dot_product_attention(qh, kh, vh, attn_mask=mask))


def multi_head_self_attention(tokens, params: "AttentionParams", heads: int, mask=None):
    if tokens.shape[-1] % heads:
        raise ShapeError(f"feature dim {tokens.shape[-1]} not divisible by {heads} heads")
    q = linear(tokens, params.w_q, params.b_q)
    k = linear(tokens, params.w_k, params.b_k)
    v = linear(tokens, params.w_v, params.b_v)
    out = attention(q, k, v, heads, mask)
    return linear(out, params.w_o, params.b_o)


def cross_attention(query_tokens, key_tokens, params: "AttentionParams", heads: int = 1, key_mask=None):
    """``softmax(Q W_Q (K W_K)^T / sqrt(d_k)) K W_V``; no output projection.

    Each output row is a convex combination of value-projected key tokens.
    """
    if query_tokens.shape[-1] != params.w_q.shape[0] or key_tokens.shape[-1] != params.w_k.shape[0]:
        raise ShapeError("cross_attention: token dims disagree with projections")
    q = linear(query_tokens, params.w_q, params.b_q)
    k = linear(key_tokens, params.w_k, params.b_k)
    v = linear(key_tokens, params.w_v, params.b_v)
    return attention(q, k, v, heads, key_mask)


def mlp(x, layers: Sequence[tuple], activation: Callable = gelu):
    """Apply ``[(W, b), ...]`` with ``activation`` between (not after) layers."""
    for i, (w, b) in enumerate(layers):
        x = linear(x, w, b)
        if i < len(layers) - 1:
            x = activation(x)
    return x


# ---------------------------------------------------------------------------
# parameter containers


def _init_weight(d_in, d_out, gen, dtype, gain=1.0):
    bound = gain * math.sqrt(6.0 / (d_in + d_out))
    return nn.Parameter((torch.rand(d_in, d_out, generator=gen, dtype=dtype) * 2 - 1) * bound)


class Linear(nn.Module):
    def __init__(self, d_in, d_out, gen=None, dtype=torch.float32, bias=True, gain=1.0):
        super().__init__()
        self.weight = _init_weight(d_in, d_out, gen, dtype, gain)
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim, dtype=torch.float32, eps=1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


class MLP(nn.Module):
    def __init__(self, sizes: Sequence[int], gen=None, dtype=torch.float32):
        super().__init__()
        self.layers = nn.ModuleList(Linear(a, b, gen, dtype) for a, b in zip(sizes[:-1], sizes[1:]))

    def forward(self, x):
        return mlp(x, [(l.weight, l.bias) for l in self.layers])


class AttentionParams(nn.Module):
    """Q/K/V (and optional output) projections."""

    def __init__(self, dim, gen=None, dtype=torch.float32, kv_dim=None, output=True):
        super().__init__()
        kv_dim = dim if kv_dim is None else kv_dim
        self.w_q = _init_weight(dim, dim, gen, dtype)
        self.w_k = _init_weight(kv_dim, dim, gen, dtype)
        self.w_v = _init_weight(kv_dim, dim, gen, dtype)
        self.b_q = nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.b_k = nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.b_v = nn.Parameter(torch.zeros(dim, dtype=dtype))
        if output:
            self.w_o = _init_weight(dim, dim, gen, dtype)
            self.b_o = nn.Parameter(torch.zeros(dim, dtype=dtype))
        else:
            self.w_o = self.b_o = None


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + GELU MLP, both residual."""

    def __init__(self, dim, heads, gen=None, dtype=torch.float32, mlp_ratio=2):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = AttentionParams(dim, gen, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ff = MLP([dim, mlp_ratio * dim, dim], gen, dtype)

    def forward(self, x, mask=None):
        x = x + multi_head_self_attention(self.norm1(x), self.attn, self.heads, mask)
        return x + self.ff(self.norm2(x))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoupled: bool = True
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


class AdamW:
    """Adam with decoupled weight decay; ``decoupled=False`` gives L2-style Adam.

    Parameters without a gradient are skipped entirely (no decay either), so
    modules outside the current objective stay untouched.
    """

    def __init__(self, named_params: Iterable[tuple[str, torch.Tensor]], lr, weight_decay=0.0,
                 betas=(0.9, 0.999), eps=1e-8, decoupled=True):
        self.params = dict(named_params)
        self.state = OptimizerState(lr, weight_decay, betas[0], betas[1], eps, decoupled)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self):
        st = self.state
        for name, p in self.params.items():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteGradientError(name)
        st.step += 1
        bc1 = 1.0 - st.beta1 ** st.step
        bc2 = 1.0 - st.beta2 ** st.step
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not st.decoupled and st.weight_decay:
                g = g + st.weight_decay * p
            m = st.exp_avg.get(name)
            if m is None:
                m = st.exp_avg[name] = torch.zeros_like(p)
                st.exp_avg_sq[name] = torch.zeros_like(p)
            v = st.exp_avg_sq[name]
            if st.decoupled and st.weight_decay:
                p.mul_(1.0 - st.lr * st.weight_decay)
            m.mul_(st.beta1).add_(g, alpha=1.0 - st.beta1)
            v.mul_(st.beta2).addcmul_(g, g, value=1.0 - st.beta2)
            denom = (v / bc2).sqrt_().add_(st.eps)
            p.addcdiv_(m, denom, value=-st.lr / bc1)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, t in self.state.exp_avg.items():
            out[f"m::{name}"] = t
            out[f"v::{name}"] = self.state.exp_avg_sq[name]
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor], step: int):
        self.state.step = step
        self.state.exp_avg.clear()
        self.state.exp_avg_sq.clear()
        for key, t in tensors.items():
            kind, name = key.split("::", 1)
            target = self.state.exp_avg if kind == "m" else self.state.exp_avg_sq
            target[name] = t.clone()


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst: tuple = ()

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(a: float, b: float, floor: float = 1e-5) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], tolerance=1e-4,
               max_coords: int | None = 64, seed: int = 0, names: Sequence[str] | None = None,
               floor: float = 1e-5) -> GradCheckReport:
    """Compare autograd against central differences on a coordinate sample.

    ``fn`` is re-evaluated for every perturbation and must return a scalar;
    ``params`` are float64 leaf tensors that ``fn`` closes over. The step is
    ``1e-5 * max(1, |theta|)``. Relative errors use ``max(|a|, |n|, floor)``
    as denominator, so gradients smaller than ``floor`` (where central
    differences carry ~1e-10 of round-off) are compared on an absolute scale.
    """
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("grad_check needs float64 parameters")
    for p in params:
        p.grad = None
    loss = fn()
    if loss.numel() != 1:
        raise ValueError("fn must return a scalar")
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"loss is {loss.item()}")
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g.contiguous() for p, g in zip(params, grads)]

    coords = [(pi, j) for pi, p in enumerate(params) for j in range(p.numel())]
    rng = np.random.default_rng(seed)
    if max_coords is not None and len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst, worst_at = 0.0, ()
    with torch.no_grad():
        for pi, j in coords:
            flat = params[pi].view(-1)
            orig = flat[j].item()
            h = 1e-5 * max(1.0, abs(orig))
            flat[j] = orig + h
            f_plus = fn().item()
            flat[j] = orig - h
            f_minus = fn().item()
            flat[j] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NonFiniteLossError("loss became non-finite under perturbation")
            numeric = (f_plus - f_minus) / (2 * h)
            analytic = grads[pi].view(-1)[j].item()
            err = relative_error(analytic, numeric, floor)
            if err > worst:
                label = names[pi] if names else pi
                worst, worst_at = err, (label, j, analytic, numeric)
    return GradCheckReport(worst, len(coords), tolerance, worst_at)
