import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from tah.backbone import TaHModel  # noqa: E402
from tah.config import ModelConfig  # noqa: E402
from tah.numerics import seed_everything  # noqa: E402


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab_size=11, hidden_dim=16, num_layers=2, num_heads=2, head_dim=8, mlp_dim=24,
                max_depth=2, lora_rank=2, lwe_top_k=4, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def with_random_lora(model: TaHModel, seed: int = 1, scale: float = 0.1) -> TaHModel:
    """Adapters start at B = 0; give them weight so depth > 1 actually differs."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.lora_parameters():
            if name.endswith("lora_B"):
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * scale)
    return model


@pytest.fixture(autouse=True)
def _seed():
    seed_everything(0)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_model(tiny_cfg):
    return with_random_lora(TaHModel(tiny_cfg, seed=3))
