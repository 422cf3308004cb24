import math

import numpy as np
import pandas as pd
import pytest

from src.schemas.config import ModelType, RunConfig
from src.schemas.results import HISTORY_COLUMNS
from src.services import training_service
from src.services.training_service import (
    AdamState,
    adam_step,
    build_ground_truth,
    train,
    write_history_csv,
)
from src.utils.errors import DivergenceError


def _variant(config: RunConfig, **changes) -> RunConfig:
    return RunConfig(**{**config.model_dump(), **changes})


# Adam -------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_parameters():
    params = [np.array([[1.0, -2.0]])]
    new, state = adam_step(params, [np.zeros((1, 2))], AdamState.zeros(params), lr=0.1)
    assert np.array_equal(new[0], params[0])
    assert state.t == 1


def test_adam_first_step_moves_by_lr_times_sign():
    params = [np.zeros((2, 2))]
    grads = [np.array([[3.0, -0.5], [1e-3, -200.0]])]
    new, _ = adam_step(params, grads, AdamState.zeros(params), lr=0.01)
    assert np.allclose(new[0], -0.01 * np.sign(grads[0]), rtol=1e-4)


def test_adam_minimizes_a_quadratic():
    params = [np.array([[3.0, -2.0, 1.0]])]
    state = AdamState.zeros(params)
    for _ in range(2000):
        params, state = adam_step(params, [2.0 * params[0]], state, lr=0.05)
    assert np.linalg.norm(params[0]) < 0.1


def test_adam_rejects_non_finite_gradient():
    params = [np.ones((1, 2))]
    with pytest.raises(DivergenceError) as info:
        adam_step(params, [np.array([[np.nan, 0.0]])], AdamState.zeros(params), iteration=17)
    assert info.value.iteration == 17


def test_adam_shape_checks():
    params = [np.ones((1, 2))]
    with pytest.raises(ValueError):
        adam_step(params, [np.ones((2, 1))], AdamState.zeros(params))
    with pytest.raises(ValueError):
        adam_step(params, [], AdamState.zeros(params))


# Boucle -----------------------------------------------------------------------

def test_training_is_deterministic(tiny_config):
    config = tiny_config.train_config(ModelType.UNSUPERVISED, 3)
    first, second = train(config), train(config)
    for a, b in zip(first.encoder.parameters(), second.encoder.parameters()):
        assert np.array_equal(a, b)
    assert [r.model_dump() for r in first.history] == [r.model_dump() for r in second.history]


def test_seeds_change_the_run(tiny_config):
    first = train(tiny_config.train_config(ModelType.UNSUPERVISED, 0))
    second = train(tiny_config.train_config(ModelType.UNSUPERVISED, 1))
    assert not np.array_equal(first.ground_truth.eval_set.z, second.ground_truth.eval_set.z)


def test_history_iterations(tiny_config):
    result = train(tiny_config.train_config(ModelType.UNSUPERVISED, 0))
    assert [r.iteration for r in result.history] == [0, 3, 6]
    assert result.final_loss == result.history[-1].loss

    uneven = _variant(tiny_config, iterations=7)
    result = train(uneven.train_config(ModelType.UNSUPERVISED, 0))
    assert [r.iteration for r in result.history] == [0, 3, 6, 7]


def test_zero_iterations_returns_initial_encoder(tiny_config):
    config = _variant(tiny_config, iterations=0).train_config(ModelType.UNSUPERVISED, 0)
    result = train(config)
    assert [r.iteration for r in result.history] == [0]
    assert math.isfinite(result.history[0].loss)
    assert 0.0 <= result.history[0].mcc <= 1.0


def test_training_changes_parameters(tiny_config):
    config = tiny_config.train_config(ModelType.UNSUPERVISED, 0)
    before = train(_variant(tiny_config, iterations=0).train_config(ModelType.UNSUPERVISED, 0))
    after = train(config)
    changed = [not np.array_equal(a, b) for a, b in zip(before.encoder.parameters(), after.encoder.parameters())]
    assert any(changed)


def test_supervised_training_reports_mse(tiny_config):
    result = train(tiny_config.train_config(ModelType.SUPERVISED, 0))
    last = result.history[-1]
    assert math.isfinite(last.loss) and last.loss >= 0.0
    assert math.isnan(last.align) and math.isnan(last.uniform)


def test_fresh_negatives_training(tiny_config):
    config = _variant(tiny_config, negatives="fresh_marginal", n_negatives=8)
    result = train(config.train_config(ModelType.UNSUPERVISED, 0))
    assert all(math.isfinite(r.loss) for r in result.history)


def test_box_delta_contrastive_training(tiny_config):
    config = _variant(
        tiny_config,
        gt_space="box",
        gt_conditional="laplace(lambda=0.1)",
        model_head="box",
        model_conditional="laplace",
    )
    result = train(config.train_config(ModelType.UNSUPERVISED, 0))
    assert all(math.isfinite(r.loss) for r in result.history)


def test_ground_truth_reused(tiny_config):
    config = tiny_config.train_config(ModelType.UNSUPERVISED, 0)
    truth = build_ground_truth(config)
    result = train(config, ground_truth=truth)
    assert result.ground_truth is truth
    assert truth.eval_set.z.shape == (64, 3)
    assert np.allclose(np.linalg.norm(truth.eval_set.z, axis=1), 1.0)


def test_divergence_carries_partial_history(tiny_config, monkeypatch):
    config = tiny_config.train_config(ModelType.UNSUPERVISED, 0)
    truth = build_ground_truth(config)
    monkeypatch.setattr(
        training_service, "mixing_forward",
        lambda g, z: np.full((z.shape[0], g.out_dim), np.nan),
    )
    with pytest.raises(DivergenceError) as info:
        train(config, ground_truth=truth)
    assert info.value.iteration == 1
    assert [r.iteration for r in info.value.history] == [0]


def test_write_history_csv(tiny_config, tmp_path):
    result = train(tiny_config.train_config(ModelType.UNSUPERVISED, 0))
    path = write_history_csv(result.history, tmp_path / "out" / "history.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == HISTORY_COLUMNS
    assert frame["iteration"].tolist() == [0, 3, 6]
