import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from must.encoders import EncoderConfig
from must.model import ModelConfig
from must.synthcohort import GeneratorConfig, generate
from must.trainer import TrainConfig

settings.register_profile("must", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("must")


TINY_GEN = GeneratorConfig(seed=3, num_patients=60, n_path_tokens_range=(2, 6), raw_path_dim=8,
                           raw_gene_dim=4, n_gene_groups=3, d_shared=2, d_spec_p=2, d_spec_g=2,
                           n_folds=3)


def tiny_model_config(precision="float64", rank=3, seed=0, **enc) -> ModelConfig:
    e = EncoderConfig(raw_path_dim=8, raw_gene_dim=4, n_gene_groups=3, dim=8, heads=2, agg_layers=1,
                      gene_group_hidden=(8,))
    e = dataclasses.replace(e, **enc)
    return ModelConfig(encoder=e, rank=rank, head_hidden=8, precision=precision, seed=seed)


def tiny_train_config(**kw) -> TrainConfig:
    base = dict(stage1_epochs=2, stage2_epochs=2, accum_steps=8, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_cohort():
    return generate(TINY_GEN)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
