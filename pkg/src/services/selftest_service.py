"""
Service d'auto-verification.
Sous-ensemble rapide des verifications par oracle, executable depuis la CLI.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from src.schemas.config import EncoderSpec, HeadKind, MeasureKind
from src.services.loss_service import delta_contrastive, info_nce
from src.services.network_service import build_mixing, encoder_forward, init_encoder, mixing_forward, mixing_invert
from src.services.scoring_service import fit_linear
from src.services.space_service import LatentSpace, SimilarityMeasure
from src.utils import diffgraph as dg
from src.utils.linalg import hungarian

logger = logging.getLogger(__name__)

MEASURES = [
    SimilarityMeasure.dot(),
    SimilarityMeasure.lp_pow(1),
    SimilarityMeasure.lp_pow(2),
    SimilarityMeasure.lp_pow(3),
]


@dataclass
class SelfCheck:
    name: str
    passed: bool
    detail: str = ""


def composite_loss(head: HeadKind, measure: SimilarityMeasure, x: np.ndarray, x_pos: np.ndarray,
                   encoder_spec: EncoderSpec, seed: int = 0):
    """Parametres initiaux et fonction (tape, noeuds) -> perte encodeur + objectif."""
    latent_dim = 3
    encoder = init_encoder(x.shape[1], latent_dim, head, np.random.default_rng(seed), encoder_spec)

    def fn(tape: dg.Tape, nodes: list[dg.Node]) -> dg.Node:
        anchors, _ = encoder_forward(encoder, x, tape, params=nodes)
        positives, _ = encoder_forward(encoder, x_pos, tape, params=nodes)
        if measure.kind == MeasureKind.DOT:
            return info_nce(anchors, positives, tau=0.5)
        return delta_contrastive(anchors, positives, measure, tau=0.5)

    return encoder.parameters(), fn


def check_gradients(seed: int = 0) -> list[SelfCheck]:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, 4))
    x_pos = x + 0.1 * rng.standard_normal((6, 4))
    checks = []
    for head in HeadKind:
        for measure in MEASURES:
            params, fn = composite_loss(head, measure, x, x_pos, EncoderSpec(hidden=(2, 2)), seed)
            report = dg.grad_check(fn, params, n_coords=40, rng=np.random.default_rng(seed))
            checks.append(SelfCheck(
                f"grad {head.value}/{measure.label}",
                report.passed,
                f"err={report.max_rel_err:.2e}, {report.checked} coords, {len(report.kinks)} kinks",
            ))
    return checks


def brute_force_assignment(cost: np.ndarray) -> tuple[float, tuple[int, ...]]:
    """Cout minimal et plus petite permutation optimale, par enumeration."""
    n = cost.shape[0]
    best = (math.inf, tuple(range(n)))
    for perm in itertools.permutations(range(n)):
        total = float(cost[np.arange(n), perm].sum())
        if total < best[0] - 1e-12:
            best = (total, perm)
    return best


def check_hungarian(seed: int = 0, trials: int = 30) -> SelfCheck:
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        n = int(rng.integers(1, 7))
        cost = rng.standard_normal((n, n))
        perm = hungarian(cost)
        expected, _ = brute_force_assignment(cost)
        total = float(cost[np.arange(n), perm].sum())
        if abs(total - expected) > 1e-9:
            return SelfCheck("hungarian", False, f"trial {trial}: {total} vs {expected}")
    return SelfCheck("hungarian", True, f"{trials} matrices")


def check_least_squares(seed: int = 0) -> SelfCheck:
    rng = np.random.default_rng(seed)
    recovered = rng.standard_normal((200, 5))
    truth = recovered @ rng.standard_normal((5, 4)) + 0.1 * rng.standard_normal((200, 4))
    fit = fit_linear(recovered, truth)
    design = np.hstack([recovered, np.ones((200, 1))])
    oracle = np.linalg.pinv(design) @ truth
    gap = max(np.max(np.abs(fit.A.T - oracle[:5])), np.max(np.abs(fit.b - oracle[5])))
    return SelfCheck("least squares", gap < 1e-8, f"max gap {gap:.1e}")


def naive_contrastive(anchors: np.ndarray, positives: np.ndarray, score: Callable, tau: float) -> float:
    """Double boucle: negatifs = autres positifs, compares au positif."""
    losses = []
    for i in range(len(anchors)):
        pos = score(anchors[i], positives[i]) / tau
        terms = [math.exp(pos)] + [
            math.exp(score(positives[j], positives[i]) / tau) for j in range(len(anchors)) if j != i
        ]
        losses.append(-pos + math.log(sum(terms)))
    return sum(losses) / len(losses)


def check_info_nce(seed: int = 0) -> SelfCheck:
    rng = np.random.default_rng(seed)
    space = LatentSpace.sphere(4)
    anchors, positives = space.uniform_sample(16, rng), space.uniform_sample(16, rng)
    tape = dg.Tape()
    value = info_nce(tape.constant(anchors), tape.constant(positives), tau=0.3).item()
    oracle = naive_contrastive(anchors, positives, lambda a, b: float(a @ b), 0.3)
    return SelfCheck("info_nce", abs(value - oracle) < 1e-10, f"gap {abs(value - oracle):.1e}")


def check_mixing(seed: int = 0) -> SelfCheck:
    rng = np.random.default_rng(seed)
    mixing = build_mixing(10, 6.0, rng)
    z = rng.standard_normal((10_000, 10))
    error = float(np.max(np.abs(mixing_invert(mixing, mixing_forward(mixing, z)) - z)))
    return SelfCheck("mixing round trip", error <= 1e-6, f"max error {error:.1e}")


def run_selftest(seed: int = 0) -> list[SelfCheck]:
    """Execute toutes les verifications rapides."""
    checks = check_gradients(seed)
    checks += [check_hungarian(seed), check_least_squares(seed), check_info_nce(seed), check_mixing(seed)]
    for check in checks:
        log = logger.info if check.passed else logger.error
        log("%s: %s (%s)", check.name, "ok" if check.passed else "ECHEC", check.detail)
    return checks
