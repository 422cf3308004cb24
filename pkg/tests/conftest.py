import numpy as np
import pytest

from src.schemas.config import RunConfig


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def tiny_config() -> RunConfig:
    """Ligne sphere / vMF minuscule: quelques iterations sur un petit encodeur."""
    return RunConfig(
        preset="tiny",
        row="r01",
        dim=3,
        replicates=2,
        gt_space="sphere",
        gt_marginal="uniform",
        gt_conditional="vmf(kappa=1)",
        model_head="sphere",
        model_conditional="vmf(kappa=1)",
        iterations=6,
        batch_size=16,
        eval_every=3,
        eval_size=64,
        encoder_hidden=[2, 2],
        lr=1e-3,
    )
