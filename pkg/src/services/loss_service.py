"""
Service des objectifs.
Pertes contrastives (InfoNCE, delta-contrastive), perte supervisee,
decomposition alignement / uniformite et estimateurs de la limite
en entropie croisee.
"""

import math
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from src.schemas.config import ConditionalSpec, MarginalSpec, MeasureKind, ObjectiveKind, ObjectiveSpec, SpaceKind
from src.services.sampling_service import log_mean_exp, sample_conditional, sample_marginal
from src.services.space_service import LatentSpace, SimilarityMeasure
from src.utils import diffgraph as dg
from src.utils.errors import ConfigError

LatentMap = Callable[[np.ndarray], np.ndarray]

ORACLE_CHUNK = 256


def _positive_scores(a: dg.Node, p: dg.Node, measure: SimilarityMeasure) -> dg.Node:
    if measure.kind == MeasureKind.DOT:
        return dg.row_dot(a, p)
    return -dg.row_lp_pow(a, p, measure.alpha)


def _pair_scores(x: dg.Node, y: dg.Node, measure: SimilarityMeasure) -> dg.Node:
    if measure.kind == MeasureKind.DOT:
        return dg.pairwise_dot(x, y)
    return -dg.pairwise_lp_pow(x, y, measure.alpha)


def _contrastive(
    anchors: dg.Node,
    positives: dg.Node,
    measure: SimilarityMeasure,
    tau: float,
    negatives: Optional[dg.Node],
    include_positive: bool,
) -> dg.Node:
    if anchors.shape != positives.shape:
        raise ValueError(f"dimension mismatch: {anchors.shape} vs {positives.shape}")
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    inv_tau = 1.0 / tau
    pos = _positive_scores(anchors, positives, measure) * inv_tau

    if negatives is None:
        # Negatifs du batch: les autres positifs, compares au positif de l'ancre
        if positives.shape[0] < 2:
            raise ValueError("no negatives available")
        neg = _pair_scores(positives, positives, measure) * inv_tau
        neg = dg.masked_fill(neg, np.eye(positives.shape[0], dtype=bool), -np.inf)
    else:
        if negatives.shape[0] < 1:
            raise ValueError("no negatives available")
        neg = _pair_scores(positives, negatives, measure) * inv_tau

    logits = dg.concat_cols(pos, neg) if include_positive else neg
    return dg.mean(dg.logsumexp_rows(logits) - pos)


def info_nce(
    anchors: dg.Node,
    positives: dg.Node,
    tau: float = 1.0,
    negatives: Optional[dg.Node] = None,
    include_positive: bool = True,
) -> dg.Node:
    """
    Perte InfoNCE moyennee sur le batch.

    -log[e^{a.p/tau} / (e^{a.p/tau} + sum_n e^{n.p/tau})]

    Args:
        anchors: Caracteristiques des ancres (B x N)
        positives: Caracteristiques des positifs (B x N)
        tau: Temperature
        negatives: Negatifs frais partages (M x N); None pour les negatifs du batch
        include_positive: Garde le terme positif au denominateur

    Returns:
        Perte 1 x 1 differentiable
    """
    return _contrastive(anchors, positives, SimilarityMeasure.dot(), tau, negatives, include_positive)


def delta_contrastive(
    anchors: dg.Node,
    positives: dg.Node,
    measure: SimilarityMeasure,
    tau: float = 1.0,
    negatives: Optional[dg.Node] = None,
    include_positive: bool = True,
) -> dg.Node:
    """Perte contrastive avec -delta(., .) comme score."""
    if measure.kind == MeasureKind.DOT:
        raise ValueError("delta_contrastive needs an lp_pow measure; use info_nce for the dot product")
    return _contrastive(anchors, positives, measure, tau, negatives, include_positive)


def supervised_mse(pred: dg.Node, target: dg.Node) -> dg.Node:
    """Erreur quadratique moyenne sur le batch et les dimensions."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return dg.mean(dg.square(pred - target))


def measure_for(objective: ObjectiveSpec) -> SimilarityMeasure:
    if objective.measure == MeasureKind.DOT:
        return SimilarityMeasure.dot()
    return SimilarityMeasure.lp_pow(objective.alpha)


def contrastive_loss(
    anchors: dg.Node,
    positives: dg.Node,
    objective: ObjectiveSpec,
    negatives: Optional[dg.Node] = None,
) -> dg.Node:
    """Aiguille vers info_nce ou delta_contrastive selon l'objectif."""
    if objective.kind == ObjectiveKind.INFO_NCE:
        return info_nce(anchors, positives, objective.tau, negatives, objective.include_positive)
    if objective.kind == ObjectiveKind.DELTA_CONTRASTIVE:
        return delta_contrastive(
            anchors, positives, measure_for(objective), objective.tau, negatives, objective.include_positive
        )
    raise ConfigError(f"{objective.kind.value} is not a contrastive objective")


def contrastive_loss_value(
    anchors: np.ndarray,
    positives: np.ndarray,
    objective: ObjectiveSpec,
    negatives: Optional[np.ndarray] = None,
) -> float:
    """Valeur de la perte contrastive sur des tableaux, sans gradient."""
    tape = dg.Tape()
    neg = tape.constant(negatives) if negatives is not None else None
    return contrastive_loss(tape.constant(anchors), tape.constant(positives), objective, neg).item()


def alignment_uniformity(
    anchors: np.ndarray,
    positives: np.ndarray,
    measure: SimilarityMeasure,
    tau: float = 1.0,
    negatives: Optional[np.ndarray] = None,
) -> tuple[float, float]:
    """
    Decomposition diagnostique de la perte contrastive.

    align = moyenne de delta(a, p) / tau (ou -a.p / tau);
    uniform = moyenne sur les ancres de log moyenne_n e^{s(n, p) / tau}.
    Sans `negatives`, chaque positif est compare aux autres positifs du batch.

    Returns:
        (align, uniform)
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    positives = np.asarray(positives, dtype=np.float64)
    align = -float(np.mean(measure.score(anchors, positives))) / tau
    if negatives is None:
        if positives.shape[0] < 2:
            raise ValueError("no negatives available")
        scores = measure.pairwise_score(positives, positives) / tau
        np.fill_diagonal(scores, -np.inf)
        uniform = log_mean_exp(scores, axis=1) + math.log(scores.shape[1]) - math.log(scores.shape[1] - 1)
    else:
        scores = measure.pairwise_score(positives, np.asarray(negatives, dtype=np.float64)) / tau
        uniform = log_mean_exp(scores, axis=1)
    return align, float(np.mean(uniform))


# Limite en entropie croisee ---------------------------------------------------

def _check_bounded(space: LatentSpace) -> None:
    if space.kind == SpaceKind.UNBOUNDED:
        raise ConfigError("log volume undefined on unbounded space")


def ce_limit_oracle(
    h: LatentMap,
    space: LatentSpace,
    conditional: ConditionalSpec,
    tau: float = 1.0,
    measure: SimilarityMeasure = SimilarityMeasure.dot(),
    n_anchors: int = 1024,
    n_partition: int = 8192,
    rng: Optional[np.random.Generator] = None,
) -> tuple[float, float]:
    """
    Estime E_z[H(p(.|z), q_h(.|z))] sous la marginale uniforme.

    q_h(z~|z) = e^{s(h(z~), h(z)) / tau} / C_h(z), avec
    log C_h(z) = log|Z| + log moyenne_u e^{s(h(u), h(z)) / tau} estime sur
    `n_partition` tirages uniformes partages entre les ancres.

    Args:
        h: Application latent -> latent (batch -> batch)
        space: Sphere ou boite
        conditional: Conditionnelle du processus generatif
        tau: Temperature
        measure: Produit scalaire ou LpPow
        n_anchors: Nombre d'ancres Monte Carlo
        n_partition: Tirages uniformes pour la fonction de partition
        rng: Generateur

    Returns:
        (estimation, erreur standard)
    """
    _check_bounded(space)
    measure.check_space(space.kind)
    rng = rng if rng is not None else np.random.default_rng(0)
    anchors = space.uniform_sample(n_anchors, rng)
    positives = sample_conditional(conditional, space, anchors, rng)
    h_anchor, h_positive = h(anchors), h(positives)
    h_uniform = h(space.uniform_sample(n_partition, rng))

    log_partition = np.empty(n_anchors)
    for start in range(0, n_anchors, ORACLE_CHUNK):
        stop = min(start + ORACLE_CHUNK, n_anchors)
        scores = measure.pairwise_score(h_anchor[start:stop], h_uniform) / tau
        log_partition[start:stop] = log_mean_exp(scores, axis=1)

    terms = -measure.score(h_positive, h_anchor) / tau + space.log_volume() + log_partition
    return float(terms.mean()), float(terms.std(ddof=1) / math.sqrt(n_anchors))


def contrastive_limit_estimate(
    h: LatentMap,
    space: LatentSpace,
    marginal: MarginalSpec,
    conditional: ConditionalSpec,
    measure: SimilarityMeasure,
    tau: float,
    n_negatives: int,
    n_anchors: int = 1024,
    rng: Optional[np.random.Generator] = None,
    include_positive: bool = True,
) -> tuple[float, float]:
    """
    Estime L_contr(M) - log M + log|Z| avec des negatifs frais de la marginale.

    Chaque ancre recoit ses propres M negatifs, compares au positif.

    Returns:
        (estimation, erreur standard)
    """
    _check_bounded(space)
    if n_negatives < 1:
        raise ValueError(f"n_negatives must be >= 1, got {n_negatives}")
    rng = rng if rng is not None else np.random.default_rng(0)
    anchors = sample_marginal(marginal, space, n_anchors, rng)
    positives = sample_conditional(conditional, space, anchors, rng)
    h_anchor, h_positive = h(anchors), h(positives)
    pos = measure.score(h_anchor, h_positive) / tau

    chunk = max(1, ORACLE_CHUNK * 1024 // max(n_negatives, 1))
    losses = np.empty(n_anchors)
    for start in range(0, n_anchors, chunk):
        stop = min(start + chunk, n_anchors)
        count = stop - start
        h_neg = h(sample_marginal(marginal, space, count * n_negatives, rng)).reshape(count, n_negatives, -1)
        target = np.broadcast_to(h_positive[start:stop, None, :], h_neg.shape)
        neg = measure.score(h_neg, target) / tau
        logits = np.concatenate([pos[start:stop, None], neg], axis=1) if include_positive else neg
        losses[start:stop] = logsumexp(logits, axis=1) - pos[start:stop]

    terms = losses - math.log(n_negatives) + space.log_volume()
    return float(terms.mean()), float(terms.std(ddof=1) / math.sqrt(n_anchors))
