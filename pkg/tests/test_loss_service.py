import inspect
import math

import numpy as np
import pytest

from src.schemas.config import ConditionalSpec, EncoderSpec, HeadKind, MarginalSpec, ObjectiveSpec
from src.services.loss_service import (
    alignment_uniformity,
    ce_limit_oracle,
    contrastive_limit_estimate,
    contrastive_loss_value,
    delta_contrastive,
    info_nce,
    supervised_mse,
)
from src.services.network_service import init_encoder, predict
from src.services.sampling_service import sample_conditional, vmf_entropy
from src.services.selftest_service import naive_contrastive
from src.services.space_service import LatentSpace, SimilarityMeasure
from src.utils import diffgraph as dg
from src.utils.errors import ConfigError


def _info_nce(anchors, positives, tau=1.0, negatives=None, include_positive=True) -> float:
    tape = dg.Tape()
    neg = tape.constant(negatives) if negatives is not None else None
    return info_nce(tape.constant(anchors), tape.constant(positives), tau, neg, include_positive).item()


def _delta(anchors, positives, measure, tau=1.0, negatives=None) -> float:
    tape = dg.Tape()
    neg = tape.constant(negatives) if negatives is not None else None
    return delta_contrastive(tape.constant(anchors), tape.constant(positives), measure, tau, neg).item()


def test_identical_features_give_log_of_candidates():
    features = np.tile([0.6, 0.8], (5, 1))
    assert _info_nce(features, features, tau=0.3) == pytest.approx(math.log(5))
    negatives = np.tile([0.6, 0.8], (7, 1))
    assert _info_nce(features, features, negatives=negatives) == pytest.approx(math.log(8))
    assert _delta(features, features, SimilarityMeasure.lp_pow(2)) == pytest.approx(math.log(5))


def test_info_nce_hand_computed():
    e1 = np.array([[1.0, 0.0]])
    value = _info_nce(e1, e1, tau=1.0, negatives=-e1)
    assert value == pytest.approx(math.log1p(math.exp(-2.0)), abs=1e-14)


def test_delta_contrastive_hand_computed():
    a = np.array([[0.0, 0.0]])
    n = np.array([[1.0, 1.0]])
    value = _delta(a, a, SimilarityMeasure.lp_pow(2), negatives=n)
    assert value == pytest.approx(math.log1p(math.exp(-2.0)), abs=1e-14)


def test_info_nce_matches_naive_loop(rng):
    for _ in range(100):
        anchors = rng.standard_normal((16, 4))
        positives = rng.standard_normal((16, 4))
        tau = float(rng.uniform(0.2, 2.0))
        oracle = naive_contrastive(anchors, positives, lambda a, b: float(a @ b), tau)
        assert _info_nce(anchors, positives, tau) == pytest.approx(oracle, abs=1e-10)


@pytest.mark.parametrize("alpha", [1.0, 2.0, 3.0])
def test_delta_contrastive_matches_naive_loop(alpha, rng):
    measure = SimilarityMeasure.lp_pow(alpha)
    for _ in range(100):
        anchors = 0.5 * rng.standard_normal((16, 3))
        positives = 0.5 * rng.standard_normal((16, 3))
        oracle = naive_contrastive(anchors, positives, lambda a, b: -float(np.sum(np.abs(a - b) ** alpha)), 0.7)
        assert _delta(anchors, positives, measure, tau=0.7) == pytest.approx(oracle, abs=1e-10)


def test_fresh_negatives_are_compared_to_the_positive(rng):
    anchors, positives = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    negatives = rng.standard_normal((6, 3))
    expected = np.mean([
        -anchors[i] @ positives[i]
        + math.log(math.exp(anchors[i] @ positives[i]) + np.sum(np.exp(negatives @ positives[i])))
        for i in range(4)
    ])
    assert _info_nce(anchors, positives, negatives=negatives) == pytest.approx(expected, abs=1e-12)


def test_negatives_only_denominator(rng):
    anchors, positives = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    negatives = rng.standard_normal((6, 3))
    expected = np.mean([
        -anchors[i] @ positives[i] + math.log(np.sum(np.exp(negatives @ positives[i])))
        for i in range(4)
    ])
    value = _info_nce(anchors, positives, negatives=negatives, include_positive=False)
    assert value == pytest.approx(expected, abs=1e-12)


def test_shift_invariance_of_scores(rng):
    # s(a, p) = a.p; ajouter une coordonnee constante c a chaque vecteur decale tous les scores de c^2
    anchors, positives = rng.standard_normal((8, 3)), rng.standard_normal((8, 3))
    pad = np.full((8, 1), 3.0)
    shifted = _info_nce(np.hstack([anchors, pad]), np.hstack([positives, pad]))
    assert shifted == pytest.approx(_info_nce(anchors, positives), abs=1e-9)


def test_permutation_equivariance(rng):
    anchors, positives = rng.standard_normal((10, 3)), rng.standard_normal((10, 3))
    order = rng.permutation(10)
    for measure in (None, SimilarityMeasure.lp_pow(1)):
        if measure is None:
            base, moved = _info_nce(anchors, positives), _info_nce(anchors[order], positives[order])
        else:
            base = _delta(anchors, positives, measure)
            moved = _delta(anchors[order], positives[order], measure)
        assert abs(base - moved) < 1e-12


def test_no_negatives_available():
    one = np.array([[1.0, 0.0]])
    with pytest.raises(ValueError, match="no negatives available"):
        _info_nce(one, one)


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        _info_nce(np.ones((3, 2)), np.ones((4, 2)))


def test_delta_contrastive_refuses_dot_product():
    tape = dg.Tape()
    x = tape.constant(np.ones((3, 2)))
    with pytest.raises(ValueError):
        delta_contrastive(x, x, SimilarityMeasure.dot())


def test_supervised_mse_examples(rng):
    tape = dg.Tape()
    target = rng.standard_normal((5, 3))
    assert supervised_mse(tape.constant(target), tape.constant(target)).item() == 0.0
    assert supervised_mse(tape.constant(target + 1.0), tape.constant(target)).item() == pytest.approx(1.0)
    pred = rng.standard_normal((5, 3))
    naive = sum((pred[i, j] - target[i, j]) ** 2 for i in range(5) for j in range(3)) / 15
    assert supervised_mse(tape.constant(pred), tape.constant(target)).item() == pytest.approx(naive, abs=1e-12)
    with pytest.raises(ValueError, match="shape mismatch"):
        supervised_mse(tape.constant(pred), tape.constant(target[:4]))


@pytest.mark.parametrize("measure", [SimilarityMeasure.dot(), SimilarityMeasure.lp_pow(1), SimilarityMeasure.lp_pow(3)])
def test_loss_gradients_pass_grad_check(measure, rng):
    anchors = rng.standard_normal((16, 3))
    positives = anchors + 0.2 * rng.standard_normal((16, 3))

    def fn(tape, nodes):
        a, p = nodes
        if measure.label == "dot":
            return info_nce(a, p, tau=1.0)
        return delta_contrastive(a, p, measure, tau=1.0)

    assert dg.grad_check(fn, [anchors, positives], rng=rng).passed


def test_contrastive_loss_value_dispatch(rng):
    anchors, positives = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
    objective = ObjectiveSpec(kind="delta_contrastive", measure="lp_pow", alpha=2.0, tau=0.5)
    assert contrastive_loss_value(anchors, positives, objective) == pytest.approx(
        _delta(anchors, positives, SimilarityMeasure.lp_pow(2), tau=0.5)
    )
    with pytest.raises(ConfigError):
        contrastive_loss_value(anchors, positives, ObjectiveSpec(kind="supervised_mse", measure="lp_pow"))


def test_alignment_is_zero_for_aligned_pairs(rng):
    a = rng.standard_normal((10, 3))
    align, _ = alignment_uniformity(a, a, SimilarityMeasure.lp_pow(2))
    assert align == 0.0


def test_uniformity_on_the_circle():
    theta = np.arange(360) * 2 * np.pi / 360
    points = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    # oracle: moyenne directe de e^{cos(theta)} sur la grille
    expected = math.log(np.mean(np.exp(np.cos(theta))))
    _, uniform = alignment_uniformity(points, points, SimilarityMeasure.dot(), negatives=points)
    assert uniform == pytest.approx(expected, abs=1e-12)
    assert uniform == pytest.approx(math.log(1.2660658777520082), abs=1e-9)


def test_alignment_uniformity_in_batch_excludes_self(rng):
    a, p = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    align, uniform = alignment_uniformity(a, p, SimilarityMeasure.dot())
    scores = p @ p.T
    expected = np.mean([math.log(np.mean(np.delete(np.exp(scores[i]), i))) for i in range(5)])
    assert uniform == pytest.approx(expected, abs=1e-12)
    assert align == pytest.approx(-np.mean(np.sum(a * p, axis=1)))


def test_ce_limit_oracle_default_sample_sizes():
    params = inspect.signature(ce_limit_oracle).parameters
    assert params["n_partition"].default >= 2 ** 13
    assert params["n_anchors"].default == 2 ** 10


def test_ce_limit_oracle_needs_bounded_space():
    with pytest.raises(ConfigError, match="log volume undefined on unbounded space"):
        ce_limit_oracle(lambda z: z, LatentSpace.unbounded(3), ConditionalSpec(family="normal", sigma=1.0),
                        measure=SimilarityMeasure.lp_pow(2))


def test_ce_limit_oracle_matches_entropy_when_model_is_exact():
    kappa, tau, dim = 4.0, 0.5, 3
    space = LatentSpace.sphere(dim)
    radius = math.sqrt(tau * kappa)
    estimate, stderr = ce_limit_oracle(
        lambda z: radius * z, space, ConditionalSpec(family="vmf", kappa=kappa), tau=tau,
        n_anchors=2048, n_partition=16384, rng=np.random.default_rng(3),
    )
    entropy = vmf_entropy(kappa, dim)
    assert abs(estimate - entropy) < 3 * stderr + 0.02


def test_ce_limit_oracle_gibbs_inequality():
    space = LatentSpace.sphere(3)
    conditional = ConditionalSpec(family="vmf", kappa=4.0)
    matched, _ = ce_limit_oracle(lambda z: 2.0 * z, space, conditional, rng=np.random.default_rng(5))
    mismatched, _ = ce_limit_oracle(lambda z: z, space, conditional, rng=np.random.default_rng(5))
    assert mismatched > matched


def _random_sphere_encoder(dim: int, min_spread: float = 20.0):
    """
    Perceptron aleatoire fixe a tete sphere.

    Le rayon est le plus petit de la liste pour lequel
    R = E[e^{2 s}] / E[e^{s}]^2 - 1 (scores entre images uniformes) atteint
    `min_spread`; le biais de log-moyenne-exp sur M negatifs vaut ~ R / (2M).
    """
    spec = EncoderSpec(hidden=(4, 4))
    directions = predict(
        init_encoder(dim, dim, HeadKind.SPHERE_L2, np.random.default_rng(7), spec),
        LatentSpace.sphere(dim).uniform_sample(2048, np.random.default_rng(8)),
    )
    cosines = directions @ directions.T
    for kappa in (4.0, 8.0, 16.0, 32.0, 64.0, 128.0):
        spread = np.mean(np.exp(2 * kappa * (cosines - 1))) / np.mean(np.exp(kappa * (cosines - 1))) ** 2 - 1
        if spread >= min_spread:
            break
    assert spread >= min_spread
    encoder = init_encoder(dim, dim, HeadKind.SPHERE_L2, np.random.default_rng(7),
                           spec.model_copy(update={"magnitude_init": math.sqrt(kappa)}))
    return lambda z: predict(encoder, z)


def test_contrastive_limit_converges_to_cross_entropy():
    """L(M) - log M + log|Z| approche la limite en entropie croisee quand M croit."""
    dim = 4
    space = LatentSpace.sphere(dim)
    conditional = ConditionalSpec(family="vmf", kappa=1.0)
    h = _random_sphere_encoder(dim)

    oracle, oracle_err = ce_limit_oracle(h, space, conditional, n_anchors=4096, n_partition=65536,
                                         rng=np.random.default_rng(11))
    # memes ancres et positifs pour tous les M, flux distinct de celui de l'oracle
    estimates = {
        m: contrastive_limit_estimate(h, space, MarginalSpec(family="uniform"), conditional, SimilarityMeasure.dot(),
                                      1.0, m, n_anchors=8192, rng=np.random.default_rng(12), include_positive=False)
        for m in (255, 1023, 4095)
    }
    values = {m: value for m, (value, _) in estimates.items()}

    # sans le positif au denominateur, l'estimation croit vers la limite
    assert values[255] < values[1023] < values[4095]
    assert values[4095] - values[1023] < values[1023] - values[255]
    final, final_err = estimates[4095]
    assert abs(final - oracle) < 3 * math.hypot(final_err, oracle_err)


def test_alignment_uniformity_approaches_loss_minus_log_negatives():
    dim = 4
    space = LatentSpace.sphere(dim)
    encoder = init_encoder(dim, dim, HeadKind.SPHERE_L2, np.random.default_rng(7), EncoderSpec(hidden=(4, 4)))
    rng = np.random.default_rng(21)
    anchors = space.uniform_sample(512, rng)
    positives = sample_conditional(ConditionalSpec(family="vmf", kappa=1.0), space, anchors, rng)
    a, p = predict(encoder, anchors), predict(encoder, positives)

    gaps = {}
    for m in (1023, 4095):
        negatives = predict(encoder, space.uniform_sample(m, rng))
        align, uniform = alignment_uniformity(a, p, SimilarityMeasure.dot(), negatives=negatives)
        # L - log M - (align + uniform) = moyenne de log(1 + e^{a.p} / somme des e^{n.p})
        gaps[m] = _info_nce(a, p, negatives=negatives) - math.log(m) - (align + uniform)

    assert 0.0 < gaps[4095] < gaps[1023]
    assert gaps[4095] < 3 * gaps[1023]
    assert gaps[4095] < 0.01


def test_contrastive_limit_estimate_errors():
    with pytest.raises(ValueError):
        contrastive_limit_estimate(lambda z: z, LatentSpace.sphere(3), MarginalSpec(family="uniform"),
                                   ConditionalSpec(family="vmf", kappa=1.0), SimilarityMeasure.dot(), 1.0, 0)
