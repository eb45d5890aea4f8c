"""Two-stage progressive training with windowed gradient accumulation.

Stage 1 optimizes the noise-injected per-modality warm-up loss on the global
representations only; the projector, specific extractors and cross-attention
are not in that graph and receive no gradient. Stage 2 optimizes

    L_surv + lambda_dec L_decomp + lambda_sh L_shared + lambda_orth L_orth

and, in exact projector mode, retracts the basis after every optimizer step.

A window of ``accum_steps`` patients is evaluated as one padded batch whose
mean loss is back-propagated; this equals summing the per-patient gradients
and dividing by the window size.
"""

from __future__ import annotations

import base64
import dataclasses
import json
import logging
import sys
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .diffcore import AdamW, NonFiniteGradientError
from .encoders import collate
from .model import MUSTModel, ModelConfig
from .survival import warmup_loss
from .synthcohort import ConfigError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    stage1_epochs: int = 30
    stage2_epochs: int = 30
    lr_stage1: float = 1e-3
    lr_stage2: float = 2e-4
    weight_decay: float = 1e-5
    accum_steps: int = 32
    sigma: float = 0.1
    lambda_dec: float = 1.0
    lambda_sh: float = 1.0
    lambda_orth: float = 0.5
    lambda_proj: float = 1.0
    seed: int = 0
    optimizer: str = "adamw"
    full_likelihood: bool = False
    train_missing_rate: float = 0.0
    train_missing_modality: str = "both"
    # "eig": at the start of stage 2, set the projector basis to the top-r
    # eigenvectors of the symmetrised cross-covariance of (g_P, g_G).
    projector_init: str = "random"
    # gradient routing into g inside L_decomp: "live", "detached" (stop-gradient)
    # or "split" (stop-gradient on the shared part P g only)
    decomp_target: str = "live"

    def validate(self):
        for name in ("stage1_epochs", "stage2_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        for name in ("lr_stage1", "lr_stage2"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        for name in ("weight_decay", "sigma", "lambda_dec", "lambda_sh", "lambda_orth", "lambda_proj"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be nonnegative")
        if self.accum_steps < 1:
            raise ConfigError("accum_steps", "must be >= 1")
        if self.optimizer not in ("adamw", "adam"):
            raise ConfigError("optimizer", "expected 'adamw' or 'adam'")
        if not 0.0 <= self.train_missing_rate <= 1.0:
            raise ConfigError("train_missing_rate", "must lie in [0, 1]")
        if self.train_missing_modality not in ("P", "G", "both"):
            raise ConfigError("train_missing_modality", "expected 'P', 'G' or 'both'")
        if self.projector_init not in ("random", "eig"):
            raise ConfigError("projector_init", "expected 'random' or 'eig'")
        if self.decomp_target not in ("live", "detached", "split"):
            raise ConfigError("decomp_target", "expected 'live', 'detached' or 'split'")
        if self.train_missing_rate == 1.0 and self.train_missing_modality == "both":
            raise ConfigError("train_missing_rate", "rate 1 for both modalities leaves no paired data")


class TrainingDiverged(RuntimeError):
    pass


def missing_assignment(ids, rate: float, modality: str, seed: int):
    """Per-patient (present_P, present_G) flags, each patient seeded independently."""
    pP = np.ones(len(ids), dtype=bool)
    pG = np.ones(len(ids), dtype=bool)
    if rate <= 0:
        return pP, pG
    for i, pid in enumerate(ids):
        rng = np.random.default_rng([seed, zlib.crc32(pid.encode()), 7])
        if rng.random() >= rate:
            continue
        which = modality if modality != "both" else ("P" if rng.random() < 0.5 else "G")
        if which == "P":
            pP[i] = False
        else:
            pG[i] = False
    return pP, pG


def epoch_order(n: int, seed: int, stage: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, stage, epoch]).permutation(n)


class Trainer:
    """Stateful run over (stage, epoch, window) so it can stop and resume anywhere."""

    def __init__(self, model: MUSTModel, records, intervals, cfg: TrainConfig,
                 log_fn: Callable[[dict], None] | None = None, checkpoint_path=None):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        self.ids = [r.id for r in records]
        self.batch = collate(records, model.dtype, model.cfg.encoder.max_path_tokens, cfg.seed)
        self.interval = torch.as_tensor(np.asarray(intervals), dtype=torch.long)
        self.event = torch.as_tensor([r.event for r in records], dtype=torch.long)
        pP, pG = missing_assignment(self.ids, cfg.train_missing_rate, cfg.train_missing_modality, cfg.seed)
        self.present_P, self.present_G = torch.as_tensor(pP), torch.as_tensor(pG)
        self.noise_gen = torch.Generator().manual_seed(cfg.seed + 1)
        self.stage = 1 if cfg.stage1_epochs > 0 else 2
        self.epoch = 0
        self.window = 0
        self.optimizer: AdamW | None = None
        self.history: list[dict] = []
        self.log_fn = log_fn
        self.checkpoint_path = checkpoint_path
        self.clamp_stats: dict = {}
        self._last_good = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def done(self) -> bool:
        return self.stage > 2

    def _stage_epochs(self, stage):
        return self.cfg.stage1_epochs if stage == 1 else self.cfg.stage2_epochs

    def _make_optimizer(self):
        lr = self.cfg.lr_stage1 if self.stage == 1 else self.cfg.lr_stage2
        self.optimizer = AdamW(self.model.named_parameters(), lr=lr,
                               weight_decay=self.cfg.weight_decay,
                               decoupled=self.cfg.optimizer == "adamw")

    def _init_projector(self):
        if self.cfg.projector_init != "eig":
            return
        paired = (self.present_P & self.present_G).nonzero().flatten()
        with torch.no_grad():
            enc = self.model.encoder(self.batch.select(paired), specific=False, cross=False)
            self.model.projector.init_from_cross_covariance(enc.g_P, enc.g_G)

    def _emit(self, rec: dict):
        self.history.append(rec)
        if self.log_fn is not None:
            self.log_fn(rec)

    # -- losses -----------------------------------------------------------

    def window_loss(self, idx) -> dict[str, torch.Tensor]:
        sub = self.batch.select(idx)
        iv, ev = self.interval[idx], self.event[idx]
        pP, pG = self.present_P[idx], self.present_G[idx]
        partial = self.cfg.train_missing_rate > 0
        if self.stage == 1:
            enc = self.model.encoder(sub, specific=False, cross=False)
            loss = warmup_loss(enc.g_P, enc.g_G, self.model.head, iv, ev, self.cfg.sigma,
                               self.noise_gen, pP if partial else None, pG if partial else None,
                               self.cfg.full_likelihood, self.clamp_stats)
            return {"warmup": loss, "total": loss}
        return self.model.main_objective(
            sub, iv, ev, (self.cfg.lambda_dec, self.cfg.lambda_sh, self.cfg.lambda_orth),
            pP if partial else None, pG if partial else None, self.cfg.full_likelihood,
            self.cfg.lambda_proj, self.clamp_stats, self.cfg.decomp_target)

    # -- main loop --------------------------------------------------------

    def run(self, max_windows: int | None = None, stop_after_stage: int | None = None) -> MUSTModel:
        """Advance training; returns early after ``max_windows`` optimizer steps."""
        steps = 0
        while not self.done:
            if stop_after_stage is not None and self.stage > stop_after_stage:
                break
            if self.epoch >= self._stage_epochs(self.stage):
                self.stage += 1
                self.epoch = self.window = 0
                self.optimizer = None
                continue
            if self.optimizer is None:
                if self.stage == 2 and self.epoch == 0 and self.window == 0:
                    self._init_projector()
                self._make_optimizer()
            order = epoch_order(self.n, self.cfg.seed, self.stage, self.epoch)
            A = self.cfg.accum_steps
            n_windows = -(-self.n // A)
            while self.window < n_windows:
                if max_windows is not None and steps >= max_windows:
                    return self.model
                idx = torch.as_tensor(order[self.window * A:(self.window + 1) * A])
                self._step(idx)
                self.window += 1
                steps += 1
            self._end_epoch()
        return self.model

    def _step(self, idx):
        self._last_good = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
        self.optimizer.zero_grad()
        try:
            terms = self.window_loss(idx)
            total = terms["total"]
            if not torch.isfinite(total):
                raise TrainingDiverged(f"non-finite loss at stage {self.stage} epoch {self.epoch}")
            total.backward()
            grad_norm = float(torch.sqrt(sum((p.grad ** 2).sum() for p in self.model.parameters()
                                             if p.grad is not None)))
            self.optimizer.step()
        except (TrainingDiverged, NonFiniteGradientError, FloatingPointError) as exc:
            self.model.load_state_dict(self._last_good)
            if self.checkpoint_path is not None:
                self.save(self.checkpoint_path)
            raise TrainingDiverged(str(exc)) from exc
        if self.stage == 2 and self.model.projector.mode == "exact":
            self.model.projector.retract()
        rec = {"kind": "step", "stage": self.stage, "epoch": self.epoch, "window": self.window,
               "grad_norm": grad_norm}
        rec.update({k: float(v.detach()) for k, v in terms.items()})
        self.history.append(rec)

    def _end_epoch(self):
        steps = [h for h in self.history
                 if h.get("kind") == "step" and h["stage"] == self.stage and h["epoch"] == self.epoch]
        rec = {"kind": "epoch", "stage": self.stage, "epoch": self.epoch}
        if steps:
            for key in steps[-1]:
                if key not in ("kind", "stage", "epoch", "window"):
                    rec[key] = float(np.mean([s[key] for s in steps]))
        self._emit(rec)
        self.epoch += 1
        self.window = 0

    def step_losses(self, stage=None) -> list[float]:
        return [h["total"] for h in self.history
                if h.get("kind") == "step" and (stage is None or h["stage"] == stage)]

    # -- persistence ------------------------------------------------------

    def state(self) -> tuple[dict[str, torch.Tensor], dict]:
        tensors = {f"param::{k}": v for k, v in self.model.state_dict().items()}
        if self.optimizer is not None:
            tensors.update({f"optim::{k}": v for k, v in self.optimizer.state_tensors().items()})
        tensors["rng::noise"] = self.noise_gen.get_state()
        meta = {
            "kind": "must-main",
            "model_config": self.model.cfg.to_dict(),
            "train_config": dataclasses.asdict(self.cfg),
            "config_hash": config_hash({"model": self.model.cfg.to_dict(),
                                        "train": dataclasses.asdict(self.cfg)}),
            "stage": self.stage,
            "epoch": self.epoch,
            "window": self.window,
            "optimizer_step": None if self.optimizer is None else self.optimizer.state.step,
            "history": self.history,
        }
        return tensors, meta

    def save(self, path):
        tensors, meta = self.state()
        save_checkpoint(path, tensors, meta)

    def restore(self, tensors: dict, meta: dict):
        params = {k.split("::", 1)[1]: v for k, v in tensors.items() if k.startswith("param::")}
        self.model.load_state_dict(params)
        self.stage, self.epoch, self.window = meta["stage"], meta["epoch"], meta["window"]
        self.history = list(meta.get("history", []))
        if "rng::noise" in tensors:
            self.noise_gen.set_state(tensors["rng::noise"])
        optim = {k.split("::", 1)[1]: v for k, v in tensors.items() if k.startswith("optim::")}
        self.optimizer = None
        if meta.get("optimizer_step") is not None and not self.done:
            self._make_optimizer()
            self.optimizer.load_state_tensors(optim, meta["optimizer_step"])


def model_from_checkpoint(path) -> tuple[MUSTModel, dict, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "must-main":
        raise ConfigError("ckpt", f"{path} is not a main-model checkpoint")
    model = MUSTModel(ModelConfig.from_dict(meta["model_config"]))
    params = {k.split("::", 1)[1]: v for k, v in tensors.items() if k.startswith("param::")}
    model.load_state_dict(params)
    return model, tensors, meta


def resume_trainer(path, records, intervals, **kwargs) -> Trainer:
    model, tensors, meta = model_from_checkpoint(path)
    cfg = TrainConfig(**meta["train_config"])
    trainer = Trainer(model, records, intervals, cfg, **kwargs)
    trainer.restore(tensors, meta)
    return trainer


def jsonl_logger(stream=None) -> Callable[[dict], None]:
    stream = stream or sys.stderr

    def emit(rec):
        stream.write(json.dumps(rec, sort_keys=True) + "\n")
        stream.flush()

    return emit


def train(model: MUSTModel, records, intervals, cfg: TrainConfig, **kwargs) -> Trainer:
    trainer = Trainer(model, records, intervals, cfg, **kwargs)
    trainer.run()
    return trainer


def run_stage1(model, records, intervals, cfg: TrainConfig, **kwargs) -> Trainer:
    trainer = Trainer(model, records, intervals, cfg, **kwargs)
    trainer.run(stop_after_stage=1)
    return trainer


def run_stage2(model, records, intervals, cfg: TrainConfig, **kwargs) -> Trainer:
    cfg = dataclasses.replace(cfg, stage1_epochs=0)
    return train(model, records, intervals, cfg, **kwargs)


def run_with_training_missingness(model, records, intervals, cfg: TrainConfig, **kwargs) -> Trainer:
    if cfg.train_missing_rate <= 0:
        raise ConfigError("train_missing_rate", "must be > 0 for training-time missingness")
    return train(model, records, intervals, cfg, **kwargs)


# ---------------------------------------------------------------------------
# unimodal baselines (single-modality ablations)


class UnimodalModel(torch.nn.Module):
    """Embedding + class-token aggregator + hazard head for one modality."""

    def __init__(self, modality: str, mcfg: ModelConfig):
        super().__init__()
        from .encoders import GroupMLP, SetPool
        from .diffcore import Linear, resolve_dtype
        from .survival import HazardHead
        ecfg = mcfg.encoder
        self.dtype = resolve_dtype(mcfg.precision)
        gen = torch.Generator().manual_seed(mcfg.seed + (11 if modality == "P" else 13))
        self.modality = modality
        D = ecfg.dim
        if modality == "P":
            self.embed = Linear(ecfg.raw_path_dim, D, gen, self.dtype)
        else:
            self.embed = GroupMLP(ecfg.n_gene_groups, ecfg.raw_gene_dim, ecfg.gene_group_hidden, D, gen, self.dtype)
        self.pool = SetPool(D, ecfg.heads, ecfg.agg_layers, gen, self.dtype)
        self.head = HazardHead(D, mcfg.K, mcfg.head_hidden, gen, self.dtype)

    def forward(self, batch):
        if self.modality == "P":
            g = self.pool(self.embed(batch.path), batch.path_mask)
        else:
            g = self.pool(self.embed(batch.gene))
        return self.head(g)


def train_unimodal(modality: str, mcfg: ModelConfig, records, intervals, cfg: TrainConfig) -> UnimodalModel:
    from .survival import nll_loss
    model = UnimodalModel(modality, mcfg)
    batch = collate(records, model.dtype, mcfg.encoder.max_path_tokens, cfg.seed)
    iv = torch.as_tensor(np.asarray(intervals), dtype=torch.long)
    ev = torch.as_tensor([r.event for r in records], dtype=torch.long)
    opt = AdamW(model.named_parameters(), lr=cfg.lr_stage1, weight_decay=cfg.weight_decay,
                decoupled=cfg.optimizer == "adamw")
    A, n = cfg.accum_steps, len(records)
    for epoch in range(cfg.stage1_epochs + cfg.stage2_epochs):
        order = epoch_order(n, cfg.seed, 9, epoch)
        for w in range(-(-n // A)):
            idx = torch.as_tensor(order[w * A:(w + 1) * A])
            opt.zero_grad()
            loss = nll_loss(model(batch.select(idx)), iv[idx], ev[idx], full_likelihood=cfg.full_likelihood)
            loss.backward()
            opt.step()
    return model
