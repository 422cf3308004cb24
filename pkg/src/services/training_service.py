"""
Service d'entrainement.
Boucle Adam deterministe de l'encodeur sur des paires tirees en flux.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from src.schemas.config import NegativeMode, ObjectiveKind, TrainConfig
from src.schemas.results import HISTORY_COLUMNS, HistoryRecord
from src.services.loss_service import (
    alignment_uniformity,
    contrastive_loss,
    contrastive_loss_value,
    measure_for,
    supervised_mse,
)
from src.services.network_service import (
    Encoder,
    MixingNet,
    build_mixing_from_spec,
    encoder_forward,
    init_encoder,
    mixing_forward,
    predict,
)
from src.services.sampling_service import pair_batch, sample_conditional, sample_marginal
from src.services.scoring_service import mcc, r2_score
from src.services.space_service import LatentSpace
from src.utils import diffgraph as dg
from src.utils.errors import DivergenceError
from src.utils.random_streams import EVAL_SET, INIT, MIXING, TRAIN_PAIRS, named_stream

logger = logging.getLogger(__name__)


# Adam -------------------------------------------------------------------------

@dataclass
class AdamState:
    """Moments d'Adam et pas de temps."""
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 1e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    iteration: Optional[int] = None,
) -> tuple[list[np.ndarray], AdamState]:
    """
    Une mise a jour d'Adam avec correction de biais.

    Args:
        params: Parametres courants
        grads: Gradients, memes formes
        state: Etat courant (non modifie)
        lr: Pas d'apprentissage
        betas: Taux de decroissance des moments
        eps: Stabilisateur du denominateur
        iteration: Indice reporte en cas de divergence

    Returns:
        (nouveaux parametres, nouvel etat)

    Raises:
        DivergenceError: gradient non fini
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must have the same length")
    beta1, beta2 = betas
    t = state.t + 1
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            where = t if iteration is None else iteration
            raise DivergenceError(f"divergence detected at iteration {where}", iteration=where)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_params.append(p - lr * (m / bias1) / (np.sqrt(v / bias2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)


# Verite terrain ---------------------------------------------------------------

@dataclass
class EvalSet:
    """Jeu d'evaluation fixe: latents, positifs et leurs observations."""
    z: np.ndarray
    x: np.ndarray
    z_pos: np.ndarray
    x_pos: np.ndarray


@dataclass
class GroundTruth:
    """Processus generatif d'une graine: espace, melange et jeu d'evaluation."""
    space: LatentSpace
    mixing: MixingNet
    eval_set: EvalSet


def build_ground_truth(config: TrainConfig) -> GroundTruth:
    """
    Construit le melange et le jeu d'evaluation a partir de la graine.

    Les latents d'evaluation sont tires avant les positifs, si bien qu'ils ne
    dependent pas de la conditionnelle.
    """
    space = LatentSpace.from_spec(config.space)
    mixing = build_mixing_from_spec(config.mixing, config.space.dim, named_stream(config.seed, MIXING))
    rng = named_stream(config.seed, EVAL_SET)
    z = sample_marginal(config.marginal, space, config.eval_size, rng)
    z_pos = sample_conditional(config.conditional, space, z, rng)
    eval_set = EvalSet(z, mixing_forward(mixing, z), z_pos, mixing_forward(mixing, z_pos))
    return GroundTruth(space, mixing, eval_set)


# Boucle -----------------------------------------------------------------------

@dataclass
class TrainResult:
    encoder: Encoder
    history: list[HistoryRecord]
    ground_truth: GroundTruth
    final_loss: float = math.nan


def _batch_loss(config: TrainConfig, encoder: Encoder, tape: dg.Tape, x: np.ndarray, x_pos: np.ndarray,
                z: np.ndarray, x_neg: Optional[np.ndarray]) -> tuple[dg.Node, list[dg.Node]]:
    if config.objective.kind == ObjectiveKind.SUPERVISED_MSE:
        out, params = encoder_forward(encoder, x, tape)
        return supervised_mse(out, tape.constant(z)), params
    anchors, params = encoder_forward(encoder, x, tape)
    positives, _ = encoder_forward(encoder, x_pos, tape, params=params)
    negatives = None
    if x_neg is not None:
        negatives, _ = encoder_forward(encoder, x_neg, tape, params=params)
    return contrastive_loss(anchors, positives, config.objective, negatives), params


def _evaluate(config: TrainConfig, encoder: Encoder, truth: GroundTruth, iteration: int) -> HistoryRecord:
    eval_set = truth.eval_set
    features = predict(encoder, eval_set.x)
    size = min(config.batch_size, eval_set.z.shape[0])
    if config.objective.kind == ObjectiveKind.SUPERVISED_MSE:
        loss = float(np.mean((features[:size] - eval_set.z[:size]) ** 2))
        align = uniform = math.nan
    else:
        positives = predict(encoder, eval_set.x_pos[:size])
        loss = contrastive_loss_value(features[:size], positives, config.objective)
        align, uniform = alignment_uniformity(
            features[:size], positives, measure_for(config.objective), config.objective.tau
        )
    return HistoryRecord(
        iteration=iteration,
        loss=loss,
        align=align,
        uniform=uniform,
        r2=r2_score(features, eval_set.z),
        mcc=mcc(features, eval_set.z).score,
    )


def train(config: TrainConfig, ground_truth: Optional[GroundTruth] = None) -> TrainResult:
    """
    Entraine un encodeur selon la configuration.

    Tout l'aleatoire derive de `config.seed` par flux nommes: "mixing" (g),
    "init" (f), "train-pairs" (batches) et "eval-set" (jeu fixe de
    `eval_size` latents). L'evaluation a lieu a l'iteration 0, toutes les
    `eval_every` iterations et a la fin.

    Args:
        config: Configuration validee
        ground_truth: Verite terrain deja construite pour la meme graine

    Returns:
        TrainResult

    Raises:
        DivergenceError: perte ou gradient non fini (historique partiel joint)
    """
    truth = ground_truth if ground_truth is not None else build_ground_truth(config)
    space, mixing = truth.space, truth.mixing
    encoder = init_encoder(mixing.out_dim, config.space.dim, config.head, named_stream(config.seed, INIT),
                           config.encoder)
    rng = named_stream(config.seed, TRAIN_PAIRS)
    state = AdamState.zeros(encoder.parameters())
    supervised = config.objective.kind == ObjectiveKind.SUPERVISED_MSE
    fresh = config.objective.n_negatives if config.objective.negatives == NegativeMode.FRESH_MARGINAL else 0

    history = [_evaluate(config, encoder, truth, 0)]
    logger.info("iteration 0: loss=%.4f r2=%.4f mcc=%.4f", history[0].loss, history[0].r2, history[0].mcc)

    for iteration in range(1, config.iterations + 1):
        if supervised:
            z = sample_marginal(config.marginal, space, config.batch_size, rng)
            x, x_pos = mixing_forward(mixing, z), None
        else:
            z, z_pos = pair_batch(config.marginal, config.conditional, space, config.batch_size, rng)
            x, x_pos = mixing_forward(mixing, z), mixing_forward(mixing, z_pos)
        x_neg = None
        if fresh:
            x_neg = mixing_forward(mixing, sample_marginal(config.marginal, space, fresh, rng))

        tape = dg.Tape()
        loss, params = _batch_loss(config, encoder, tape, x, x_pos, z, x_neg)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise DivergenceError(f"divergence detected at iteration {iteration}", iteration, history)
        tape.backward(loss)
        try:
            new_params, state = adam_step(
                encoder.parameters(), [p.grad for p in params], state,
                config.lr, config.betas, config.adam_eps, iteration,
            )
        except DivergenceError as exc:
            exc.history = history
            raise
        encoder = encoder.with_parameters(new_params)

        if iteration % config.eval_every == 0 or iteration == config.iterations:
            record = _evaluate(config, encoder, truth, iteration)
            history.append(record)
            logger.info("iteration %d: loss=%.4f r2=%.4f mcc=%.4f", iteration, record.loss, record.r2, record.mcc)

    return TrainResult(encoder, history, truth, final_loss=history[-1].loss)


def history_frame(history: Sequence[HistoryRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in history], columns=HISTORY_COLUMNS)


def write_history_csv(history: Sequence[HistoryRecord], path: Union[str, Path]) -> Path:
    """Ecrit l'historique (iteration, loss, align, uniform, r2, mcc)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    history_frame(history).to_csv(path, index=False, float_format="%.10g")
    return path
