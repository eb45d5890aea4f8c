"""Probe the missing-modality imputation on one fold.

Trains the main model and both LDMs for a fold, then scores the held-out
patients with five choices for the specific component of the missing modality:
the true one (computed from the withheld data), LDM samples, a linear
regression on the recovered shared component, the training mean and zero.
The gap between "true" and "mean" bounds what any generator can add.
"""

import argparse
import json

import numpy as np
import torch

from must.config import load_config
from must.decomp import cosine, fuse_for_prediction
from must.encoders import collate
from must.evalkit import _fit_fold
from must.inference import ModalityMask, predict_missing
from must.ldm import diffusion_pairs, train_ldm
from must.metrics import c_index
from must.synthcohort import generate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/desk.ini")
    ap.add_argument("--fold", type=int, default=0)
    args = ap.parse_args()
    cfg = load_config(args.config)
    pcfg = cfg.pipeline
    train, test = generate(cfg.data).split(args.fold)
    model, _, _, _ = _fit_fold(train, pcfg)
    times = np.array([r.time for r in test])
    events = np.array([r.event for r in test])
    out = {}
    for miss in ("P", "G"):
        avail = "G" if miss == "P" else "P"
        ldm = train_ldm(model, train, miss, pcfg.ldm, pcfg.denoiser_config(model.dim))
        with torch.no_grad():
            u_tr, c_tr = diffusion_pairs(model, train, miss)
            u_te, c_te = diffusion_pairs(model, test, miss)
            enc = model.encoder(collate(test, model.dtype), cross=False)
            u_avail = model.projector.specific(enc.u_P if avail == "P" else enc.u_G)
            gen = predict_missing(model, test, ModalityMask.from_missing(miss), ldm,
                                  ddim_steps=pcfg.ddim_steps, n_samples=pcfg.n_samples, seed=pcfg.seed)
            X = torch.cat([c_tr, torch.ones(len(c_tr), 1, dtype=c_tr.dtype)], 1).double()
            W = torch.linalg.lstsq(X, u_tr.double()).solution
            reg = (torch.cat([c_te, torch.ones(len(c_te), 1, dtype=c_te.dtype)], 1).double() @ W).to(u_te.dtype)
            r2 = 1 - ((reg - u_te) ** 2).sum() / ((u_te - u_te.mean(0)) ** 2).sum()

            def score(u):
                f = fuse_for_prediction(u, c_te, u_avail) if miss == "P" else fuse_for_prediction(u_avail, c_te, u)
                return c_index(model.head(f).risk.numpy(), times, events)

            out[f"missing-{miss}"] = {
                "C_true": score(u_te), "C_ldm": score(gen.generated_u), "C_regression": score(reg),
                "C_mean": score(u_tr.mean(0, keepdim=True).expand_as(u_te)),
                "C_zero": score(torch.zeros_like(u_te)),
                "cos_ldm_true": cosine(gen.generated_u, u_te).mean().item(),
                "regression_r2": r2.item(),
            }
    print(json.dumps(out, indent=1, default=float))


if __name__ == "__main__":
    main()
