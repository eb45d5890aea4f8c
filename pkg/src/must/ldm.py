"""Conditional latent diffusion over modality-specific components.

One denoiser per target modality learns to predict the noise added to that
modality's specific component ``u`` given the condition ``[c; CLS_u]``, where
``c`` is the shared component recovered from the other modality and
``CLS_u`` is the frozen class token of the target modality's specific
extractor. Sampling is deterministic DDIM over an evenly spaced sub-schedule.

Targets and shared conditions are standardized before diffusion (per
coordinate mean, one scalar scale) so the unit-variance prior of ``z_T``
matches the data scale; the statistics travel with the denoiser checkpoint.
During sampling the clean-point estimate is clipped to the coordinate range
seen in training, which keeps early high-noise steps (where ``1/sqrt(a_t)``
amplifies any noise-prediction error by ~150x) from throwing samples far off
the data manifold.
"""

from __future__ import annotations

import dataclasses
import math
import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .diffcore import AdamW, LayerNorm, Linear, TransformerBlock, resolve_dtype
from .encoders import collate
from .model import MUSTModel, parameter_hash
from .synthcohort import ConfigError

MODALITIES = ("P", "G")


class ModalityMismatchError(ValueError):
    pass


class FrozenModelMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# noise schedule


class NoiseSchedule:
    """Linear betas; ``alpha(t)`` is the cumulative product with ``alpha(0) = 1``."""

    def __init__(self, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if T < 1:
            raise ConfigError("T", "must be >= 1")
        if not 0 < beta_start <= beta_end < 1:
            raise ConfigError("betas", "need 0 < beta_start <= beta_end < 1")
        self.T = T
        self.betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        self.alphas_cum = torch.cumprod(1.0 - self.betas, dim=0)
        # index 0 holds alpha(0) = 1 so t can index directly
        self._table = torch.cat([torch.ones(1, dtype=torch.float64), self.alphas_cum])

    def alpha(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < 0).any() or (t > self.T).any():
            raise ValueError(f"timestep outside [0, {self.T}]")
        return self._table[t]

    def ddim_timesteps(self, n_steps: int) -> list[int]:
        """Evenly spaced, strictly decreasing, first T and last 1."""
        if n_steps < 1:
            raise ConfigError("ddim_steps", "must be >= 1")
        if n_steps == 1:
            return [self.T]
        ts = np.unique(np.round(np.linspace(self.T, 1, min(n_steps, self.T))).astype(int))[::-1]
        return [int(t) for t in ts]


def forward_noise(z0, t, schedule: NoiseSchedule, gen=None, eps=None):
    """``z_t = sqrt(a_t) z0 + sqrt(1 - a_t) eps``; returns ``(z_t, eps)``."""
    t = torch.as_tensor(t, dtype=torch.long)
    if (t < 1).any() or (t > schedule.T).any():
        raise ValueError(f"t must lie in [1, {schedule.T}]")
    if eps is None:
        eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    a = schedule.alpha(t).to(z0.dtype)
    if a.dim() > 0:
        a = a.reshape(*a.shape, *([1] * (z0.dim() - a.dim())))
    return a.sqrt() * z0 + (1.0 - a).sqrt() * eps, eps


def ddim_step(z_t, eps_hat, t: int, t_prev: int, schedule: NoiseSchedule, x0_bound=None):
    """Deterministic (eta = 0) update; returns ``(z_prev, x0_hat)``.

    With ``x0_bound`` the clean estimate is clamped to ``[-bound, bound]``
    (per coordinate) and the noise estimate is re-derived from it.
    """
    a_t = schedule.alpha(t).to(z_t.dtype)
    a_prev = schedule.alpha(t_prev).to(z_t.dtype)
    x0_hat = (z_t - (1.0 - a_t).sqrt() * eps_hat) / a_t.sqrt()
    if x0_bound is not None:
        x0_hat = torch.maximum(torch.minimum(x0_hat, x0_bound), -x0_bound)
        eps_hat = (z_t - a_t.sqrt() * x0_hat) / (1.0 - a_t).sqrt()
    return a_prev.sqrt() * x0_hat + (1.0 - a_prev).sqrt() * eps_hat, x0_hat


def timestep_embedding(t, dim: int, dtype=torch.float32):
    """Sinusoidal embedding of integer timesteps, width ``dim``."""
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(len(t), 1, dtype=torch.float64)], dim=-1)
    return emb.to(dtype)


# ---------------------------------------------------------------------------
# denoiser


@dataclass
class DenoiserConfig:
    dim: int = 256
    layers: int = 4
    heads: int = 4
    use_cls: bool = True
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    precision: str = "float32"
    seed: int = 0
    # "eps": the readout is eps_hat directly; "x0": the readout is a clean-point
    # estimate and eps_hat = (z_t - sqrt(a_t) x0_hat) / sqrt(1 - a_t)
    parameterization: str = "eps"

    def validate(self):
        if self.parameterization not in ("eps", "x0"):
            raise ConfigError("parameterization", f"expected 'eps' or 'x0', got {self.parameterization!r}")
        if self.layers < 1:
            raise ConfigError("layers", "must be >= 1")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError("heads", f"dim {self.dim} not divisible by heads {self.heads}")


class Denoiser(nn.Module):
    """Transformer over ``[z_t, c, CLS, time]`` tokens; output read at the ``z_t`` slot.

    With ``use_cls=False`` the CLS token is dropped (the ``[c]``-only
    conditioning ablation).
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dtype = resolve_dtype(cfg.precision)
        self.dtype = dtype
        gen = torch.Generator().manual_seed(cfg.seed)
        D = cfg.dim
        n_tok = 4 if cfg.use_cls else 3
        self.in_z = Linear(D, D, gen, dtype)
        self.in_c = Linear(D, D, gen, dtype)
        self.in_cls = Linear(D, D, gen, dtype) if cfg.use_cls else None
        self.in_t = Linear(D, D, gen, dtype)
        self.type_emb = nn.Parameter(0.02 * torch.randn(n_tok, D, generator=gen, dtype=dtype))
        self.blocks = nn.ModuleList(TransformerBlock(D, cfg.heads, gen, dtype) for _ in range(cfg.layers))
        self.norm = LayerNorm(D, dtype)
        self.out = Linear(D, D, gen, dtype, gain=0.1)
        sched = NoiseSchedule(cfg.T, cfg.beta_start, cfg.beta_end)
        self.register_buffer("alphas", sched.alpha(torch.arange(cfg.T + 1)).to(torch.float64), persistent=False)

    def forward(self, z_t, t, c, cls=None):
        """``eps_hat`` with the shape of ``z_t`` (leading batch axis)."""
        B = z_t.shape[0]
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(B)
        h_c = self.in_c(c)
        h_t = self.in_t(timestep_embedding(t, self.cfg.dim, self.dtype))
        # the z_t token also carries the condition and time additively so the
        # readout slot sees them before any attention has been learned
        tokens = [self.in_z(z_t) + h_c + h_t, h_c]
        if self.cfg.use_cls:
            if cls is None:
                raise ValueError("denoiser built with use_cls needs a CLS vector")
            tokens.append(self.in_cls(cls.expand(B, -1)))
        tokens.append(h_t)
        x = torch.stack(tokens, dim=1) + self.type_emb
        for blk in self.blocks:
            x = blk(x)
        y = self.out(self.norm(x[:, 0]))
        if self.cfg.parameterization == "eps":
            return y
        a = self.alphas[t].to(self.dtype).unsqueeze(-1)
        return (z_t - a.sqrt() * y) / (1.0 - a).sqrt()


@dataclass
class Normaliser:
    """Per-coordinate mean and one scalar scale."""

    mean: torch.Tensor
    scale: torch.Tensor

    @classmethod
    def fit(cls, x: torch.Tensor) -> "Normaliser":
        mean = x.mean(0)
        scale = ((x - mean) ** 2).sum(-1).mean().div(x.shape[-1]).sqrt().clamp_min(1e-6)
        return cls(mean, scale)

    def encode(self, x):
        return (x - self.mean) / self.scale

    def decode(self, z):
        return z * self.scale + self.mean


@dataclass
class LDMConfig:
    steps: int = 50_000
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    condition: str = "recovered"  # or "exact"
    log_every: int = 500
    # Min-SNR-gamma timestep weighting of the noise-prediction loss; 0 disables it
    snr_gamma: float = 0.0

    def validate(self):
        if self.steps < 0:
            raise ConfigError("steps", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr", "must be positive")
        if self.snr_gamma < 0:
            raise ConfigError("snr_gamma", "must be >= 0")
        if self.condition not in ("recovered", "exact"):
            raise ConfigError("condition", "expected 'recovered' or 'exact'")


@dataclass
class LDM:
    """A trained denoiser bound to one target modality and one frozen model."""

    modality: str
    denoiser: Denoiser
    schedule: NoiseSchedule
    z_norm: Normaliser
    c_norm: Normaliser
    frozen_hash: str
    history: list = dataclasses.field(default_factory=list)
    x0_bound: torch.Tensor | None = None  # per-coordinate max |z0| over training targets

    def eps(self, z_t, t, c_raw, cls):
        return self.denoiser(z_t, t, self.c_norm.encode(c_raw), cls)

    # -- persistence --------------------------------------------------------

    def save(self, path):
        tensors = {f"param::{k}": v for k, v in self.denoiser.state_dict().items()}
        tensors.update({"norm::z_mean": self.z_norm.mean, "norm::z_scale": self.z_norm.scale.reshape(1),
                        "norm::c_mean": self.c_norm.mean, "norm::c_scale": self.c_norm.scale.reshape(1)})
        if self.x0_bound is not None:
            tensors["norm::x0_bound"] = self.x0_bound
        meta = {"kind": "must-ldm", "modality": self.modality, "frozen_hash": self.frozen_hash,
                "denoiser_config": dataclasses.asdict(self.denoiser.cfg), "history": self.history}
        save_checkpoint(path, tensors, meta)


def load_ldm(path, expect_modality: str | None = None, frozen_model: MUSTModel | None = None) -> LDM:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "must-ldm":
        raise ModalityMismatchError(f"{path} is not a denoiser checkpoint")
    if expect_modality is not None and meta["modality"] != expect_modality:
        raise ModalityMismatchError(
            f"{path} holds a {meta['modality']!r} denoiser, expected {expect_modality!r}")
    if frozen_model is not None and parameter_hash(frozen_model) != meta["frozen_hash"]:
        raise FrozenModelMismatchError(f"{path} was trained against a different main model")
    cfg = DenoiserConfig(**meta["denoiser_config"])
    den = Denoiser(cfg)
    den.load_state_dict({k.split("::", 1)[1]: v for k, v in tensors.items() if k.startswith("param::")})
    return LDM(meta["modality"], den, NoiseSchedule(cfg.T, cfg.beta_start, cfg.beta_end),
               Normaliser(tensors["norm::z_mean"], tensors["norm::z_scale"][0]),
               Normaliser(tensors["norm::c_mean"], tensors["norm::c_scale"][0]),
               meta["frozen_hash"], list(meta.get("history", [])), tensors.get("norm::x0_bound"))


# ---------------------------------------------------------------------------
# training


@torch.no_grad()
def diffusion_pairs(model: MUSTModel, records, modality: str, condition: str = "recovered"):
    """Per-patient ``(u_target, c_cond)`` from the frozen model.

    ``u_target`` is the projected specific component of ``modality``;
    ``c_cond`` is the shared component recovered from the *other* modality
    (``g - (I - P) u``), or the full-data mean ``c`` with ``condition="exact"``.
    """
    if modality not in MODALITIES:
        raise ConfigError("modality", f"expected 'P' or 'G', got {modality!r}")
    batch = collate(records, model.dtype, model.cfg.encoder.max_path_tokens)
    enc = model.encoder(batch)
    u = model.projector.specific(enc.u_P if modality == "P" else enc.u_G)
    if condition == "exact":
        c = 0.5 * (model.projector.shared(enc.c_PG) + model.projector.shared(enc.c_GP))
    else:
        c = model.recovered_shared(enc, "G" if modality == "P" else "P")
    return u, c


def target_cls(model: MUSTModel, modality: str) -> torch.Tensor:
    return (model.encoder.cls_uP if modality == "P" else model.encoder.cls_uG).detach()


def snr_weights(t, schedule: NoiseSchedule, gamma: float | None):
    """Min-SNR-gamma weights ``min(SNR_t, gamma) / SNR_t`` (all ones when gamma is None)."""
    a = schedule.alpha(t)
    if gamma is None:
        return torch.ones_like(a)
    snr = a / (1.0 - a)
    return torch.clamp(snr, max=gamma) / snr


def denoising_loss(den: Denoiser, z0, c, cls, schedule: NoiseSchedule, gen=None, t=None, eps=None,
                   snr_gamma: float | None = None):
    """``||eps - eps_theta(z_t, t, c, cls)||^2`` averaged over the batch, optionally
    reweighted per timestep by :func:`snr_weights`."""
    if t is None:
        t = torch.randint(1, schedule.T + 1, (z0.shape[0],), generator=gen)
    z_t, eps = forward_noise(z0, t, schedule, gen, eps)
    per = ((den(z_t, t, c, cls) - eps) ** 2).sum(-1)
    if snr_gamma is not None:
        per = per * snr_weights(t, schedule, snr_gamma).to(per.dtype)
    return per.mean()


def train_ldm(model: MUSTModel, records, modality: str, cfg: LDMConfig | None = None,
              den_cfg: DenoiserConfig | None = None, val_records=None,
              log_fn: Callable[[dict], None] | None = None) -> LDM:
    """Fit the ``modality`` denoiser on a frozen main model.

    The main model's parameters are checked bit-identical before and after.
    """
    cfg = cfg or LDMConfig()
    cfg.validate()
    den_cfg = den_cfg or DenoiserConfig(dim=model.dim, precision=model.cfg.precision, seed=cfg.seed)
    if den_cfg.dim != model.dim:
        raise ConfigError("dim", f"denoiser width {den_cfg.dim} must equal model dim {model.dim}")
    requires = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    before = parameter_hash(model)
    try:
        u, c = diffusion_pairs(model, records, modality, cfg.condition)
        cls = target_cls(model, modality)
        z_norm, c_norm = Normaliser.fit(u), Normaliser.fit(c)
        z0, cn = z_norm.encode(u), c_norm.encode(c)
        den = Denoiser(den_cfg)
        schedule = NoiseSchedule(den_cfg.T, den_cfg.beta_start, den_cfg.beta_end)
        ldm = LDM(modality, den, schedule, z_norm, c_norm, before, x0_bound=z0.abs().amax(0))
        gen = torch.Generator().manual_seed(cfg.seed + 101)
        val = None
        if val_records:
            vu, vc = diffusion_pairs(model, val_records, modality, cfg.condition)
            vgen = torch.Generator().manual_seed(cfg.seed + 202)
            vz = z_norm.encode(vu)
            vt = torch.randint(1, schedule.T + 1, (len(vz),), generator=vgen)
            veps = torch.randn(vz.shape, generator=vgen, dtype=vz.dtype)
            val = (vz, c_norm.encode(vc), vt, veps)

        def val_loss():
            with torch.no_grad():
                return float(denoising_loss(den, val[0], val[1], cls, schedule, t=val[2], eps=val[3]))

        if val is not None:
            ldm.history.append({"kind": "ldm", "step": 0, "val_loss": val_loss()})
        opt = AdamW(den.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        n = len(z0)
        running = []
        for step in range(1, cfg.steps + 1):
            idx = torch.randint(0, n, (min(cfg.batch_size, n),), generator=gen)
            opt.zero_grad()
            loss = denoising_loss(den, z0[idx], cn[idx], cls, schedule, gen, snr_gamma=cfg.snr_gamma or None)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite denoising loss at step {step}")
            loss.backward()
            opt.step()
            running.append(float(loss.detach()))
            if step % cfg.log_every == 0 or step == cfg.steps:
                rec = {"kind": "ldm", "modality": modality, "step": step,
                       "loss": float(np.mean(running))}
                if val is not None:
                    rec["val_loss"] = val_loss()
                running = []
                ldm.history.append(rec)
                if log_fn is not None:
                    log_fn(rec)
    finally:
        for p, r in zip(model.parameters(), requires):
            p.requires_grad_(r)
    if parameter_hash(model) != before:
        raise RuntimeError("main model parameters changed during denoiser training")
    return ldm


# ---------------------------------------------------------------------------
# sampling


def sample_seed(master_seed: int, patient_id: str, sample_index: int) -> int:
    ss = np.random.SeedSequence([master_seed, zlib.crc32(patient_id.encode()), sample_index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & ((1 << 63) - 1))


def initial_noise(ids, n_samples: int, dim: int, master_seed: int, dtype=torch.float32):
    """``z_T`` of shape (len(ids), n_samples, dim), one RNG stream per (patient, sample)."""
    out = torch.empty(len(ids), n_samples, dim, dtype=dtype)
    for i, pid in enumerate(ids):
        for s in range(n_samples):
            g = torch.Generator().manual_seed(sample_seed(master_seed, pid, s))
            out[i, s] = torch.randn(dim, generator=g, dtype=torch.float64).to(dtype)
    return out


@torch.no_grad()
def ddim_sample(ldm: LDM, c_raw, cls, z_T, n_steps: int = 50, projector=None, eps_fn=None):
    """Average of DDIM samples in the model's feature scale.

    ``z_T`` has shape (B, n_samples, D); ``c_raw`` is (B, D). ``eps_fn``
    overrides the network (used for oracle checks). When ``projector`` is
    given the average is mapped through ``(I - P)``.
    """
    B, S, D = z_T.shape
    z = z_T.reshape(B * S, D)
    c = c_raw.repeat_interleave(S, dim=0)
    ts = ldm.schedule.ddim_timesteps(n_steps)
    # inference mode skips version-counter bookkeeping in the step loop; the
    # clone hands callers an ordinary tensor
    with torch.inference_mode():
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            eps_hat = eps_fn(z, t) if eps_fn is not None else ldm.eps(z, t, c, cls)
            z, _ = ddim_step(z, eps_hat, t, t_prev, ldm.schedule, ldm.x0_bound)
    z = z.clone()
    u = ldm.z_norm.decode(z).reshape(B, S, D).mean(1)
    if projector is not None:
        u = projector.specific(u)
    return u


def generate_specific(ldm: LDM, model: MUSTModel, c_raw, ids, n_steps=50, n_samples=5,
                      master_seed=0) -> tuple[torch.Tensor, float]:
    """Sample the missing ``u`` for each patient; returns ``(u, milliseconds)``."""
    start = time.perf_counter()
    z_T = initial_noise(ids, n_samples, model.dim, master_seed, model.dtype)
    proj = model.projector if model.projector.mode == "exact" else None
    u = ddim_sample(ldm, c_raw, target_cls(model, ldm.modality), z_T, n_steps, proj)
    return u, 1000.0 * (time.perf_counter() - start)
