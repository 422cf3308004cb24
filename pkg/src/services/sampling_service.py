"""
Service d'echantillonnage.
Tire les paires (ancre, positif) selon marginale x conditionnelle et mesure
l'ecart de la marginale a l'uniforme.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import integrate, stats
from scipy.special import ive, logsumexp

from src.schemas.config import ConditionalFamily, ConditionalSpec, MarginalFamily, MarginalSpec, SpaceKind
from src.services.space_service import LatentSpace
from src.utils.errors import ConfigError, SamplingError

logger = logging.getLogger(__name__)

MAX_REJECTIONS = 1_000_000
MOVED_MASS_MC_SAMPLES = 1_000_000


# von Mises-Fisher -------------------------------------------------------------

def _vmf_cosines(kappa: float, dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """
    Composante w = mu.z~ par rejet avec enveloppe beta.

    Le test d'acceptation est calcule en log pour rester stable jusqu'a
    kappa ~ 1e5.
    """
    d = dim - 1
    b = d / (math.sqrt(4.0 * kappa * kappa + d * d) + 2.0 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    # log(1 - x0^2) = log(4b) - 2 log(1 + b)
    c = kappa * x0 + d * (math.log(4.0 * b) - 2.0 * math.log1p(b))

    w = np.empty(n)
    pending = np.arange(n)
    rounds = 0
    while pending.size:
        rounds += 1
        if rounds > MAX_REJECTIONS:
            raise SamplingError("vmf rejection sampler did not converge")
        z = rng.beta(d / 2.0, d / 2.0, size=pending.size)
        cand = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.random(pending.size)
        accept = kappa * cand + d * np.log1p(-x0 * cand) - c >= np.log(u)
        w[pending[accept]] = cand[accept]
        pending = pending[~accept]
    return np.clip(w, -1.0, 1.0)


def sample_vmf_batch(mus: np.ndarray, kappa: float, rng: np.random.Generator) -> np.ndarray:
    """
    Un tirage vMF(mu_i, kappa) par ligne de `mus`.

    Args:
        mus: Directions moyennes unitaires (n x N)
        kappa: Concentration >= 0
        rng: Generateur

    Returns:
        Points unitaires (n x N)
    """
    if kappa < 0:
        raise ConfigError(f"vmf concentration must be >= 0, got {kappa}")
    mus = np.atleast_2d(np.asarray(mus, dtype=np.float64))
    n, dim = mus.shape
    if dim < 2:
        raise ConfigError("vmf needs dimension >= 2")
    if n == 0:
        return np.zeros((0, dim))
    if np.any(np.abs(np.linalg.norm(mus, axis=1) - 1.0) > 1e-9):
        raise ValueError("vmf mean direction must be a unit vector")

    w = _vmf_cosines(kappa, dim, n, rng)
    # Direction tangente uniforme, orthogonale a mu
    tangent = rng.standard_normal((n, dim))
    tangent -= np.sum(tangent * mus, axis=1, keepdims=True) * mus
    norms = np.linalg.norm(tangent, axis=1, keepdims=True)
    while np.any(degenerate := norms[:, 0] == 0.0):
        redo = rng.standard_normal((int(degenerate.sum()), dim))
        redo -= np.sum(redo * mus[degenerate], axis=1, keepdims=True) * mus[degenerate]
        tangent[degenerate] = redo
        norms = np.linalg.norm(tangent, axis=1, keepdims=True)
    tangent /= norms
    points = w[:, None] * mus + np.sqrt(np.maximum(1.0 - w * w, 0.0))[:, None] * tangent
    return points / np.linalg.norm(points, axis=1, keepdims=True)


def sample_vmf(mu: np.ndarray, kappa: float, rng: np.random.Generator) -> np.ndarray:
    """Un tirage exact de vMF(mu, kappa) sur la sphere unite."""
    mu = np.asarray(mu, dtype=np.float64)
    if abs(float(np.linalg.norm(mu)) - 1.0) > 1e-9:
        raise ValueError("vmf mean direction must be a unit vector")
    return sample_vmf_batch(mu[None, :], kappa, rng)[0]


def vmf_log_normalizer(kappa: float, dim: int) -> float:
    """
    log C_p avec C_p = integrale sur S^{N-1} de exp(kappa mu.z).

    Forme fermee C_p = (2 pi)^{N/2} I_{N/2-1}(kappa) / kappa^{N/2-1}, Bessel
    mise a l'echelle (ive) pour rester finie aux grandes concentrations.
    """
    if kappa == 0:
        return LatentSpace.sphere(dim).log_volume()
    order = dim / 2.0 - 1.0
    return 0.5 * dim * math.log(2.0 * math.pi) + math.log(ive(order, kappa)) + kappa - order * math.log(kappa)


def vmf_mean_cosine(kappa: float, dim: int) -> float:
    """E[mu.z~] = I_{N/2}(kappa) / I_{N/2-1}(kappa) sous vMF(mu, kappa)."""
    if kappa == 0:
        return 0.0
    return float(ive(dim / 2.0, kappa) / ive(dim / 2.0 - 1.0, kappa))


def vmf_entropy(kappa: float, dim: int) -> float:
    """Entropie differentielle de vMF(kappa) sur S^{N-1}."""
    return vmf_log_normalizer(kappa, dim) - kappa * vmf_mean_cosine(kappa, dim)


def _vmf_cosine_tail(kappa: float, dim: int, cut: float) -> float:
    """
    P(mu.z~ > cut) sous vMF(mu, kappa).

    Integree en s = kappa (1 - t): la densite devient
    e^{-s} (s (2 - s / kappa))^{(N-3)/2}, un pic de largeur O(N) pour tout kappa.
    """
    exponent = (dim - 3) / 2.0

    def density(s: float) -> float:
        base = s * max(2.0 - s / kappa, 0.0)
        return math.exp(-s) * base ** exponent if base > 0.0 else 0.0

    def integral(end: float) -> float:
        if end <= 0.0:
            return 0.0
        points = [p for p in (max(exponent, 1.0), 4.0 * (exponent + 10.0)) if p < end]
        value, _ = integrate.quad(density, 0.0, end, points=points or None, limit=200,
                                  epsabs=1e-14, epsrel=1e-10)
        return value

    total = 2.0 * kappa
    return min(integral(min(kappa * (1.0 - cut), total)) / integral(total), 1.0)


# Marginales -------------------------------------------------------------------

def _north_pole(dim: int) -> np.ndarray:
    pole = np.zeros(dim)
    pole[-1] = 1.0
    return pole


def _truncated_normal_in_box(center: np.ndarray, sigma: float, space: LatentSpace, n: int,
                             rng: np.random.Generator) -> np.ndarray:
    """Normale centree tronquee a la boite, par rejet ligne par ligne."""
    out = np.empty((n, space.dim))
    pending = np.arange(n)
    attempts = 0
    while pending.size:
        attempts += 1
        if attempts > MAX_REJECTIONS:
            raise SamplingError("conditional effectively degenerate")
        draws = center[pending] + sigma * rng.standard_normal((pending.size, space.dim))
        inside = space.contains(draws)
        out[pending[inside]] = draws[inside]
        pending = pending[~inside]
    return out


def sample_marginal(spec: MarginalSpec, space: LatentSpace, n: int, rng: np.random.Generator) -> np.ndarray:
    """
    n tirages i.i.d. de la marginale.

    Raises:
        ConfigError: famille incompatible avec l'espace
    """
    if not spec.supports(space.kind):
        raise ConfigError(f"marginal {spec} is incompatible with a {space.kind.value} space")
    if n == 0:
        return np.zeros((0, space.dim))

    family = spec.family
    if family == MarginalFamily.UNIFORM:
        return space.uniform_sample(n, rng)
    if family == MarginalFamily.VMF_POLE:
        poles = np.tile(_north_pole(space.dim), (n, 1))
        return sample_vmf_batch(poles, spec.kappa, rng)
    if family == MarginalFamily.PROJECTED_NORMAL:
        draws = _north_pole(space.dim) + spec.sigma * rng.standard_normal((n, space.dim))
        return space.project(draws)
    if family == MarginalFamily.NORMAL:
        return spec.sigma * rng.standard_normal((n, space.dim))
    if family == MarginalFamily.LAPLACE:
        return rng.laplace(0.0, spec.lam, size=(n, space.dim))
    # CENTERED_NORMAL
    centers = np.tile(space.center, (n, 1))
    return _truncated_normal_in_box(centers, spec.sigma, space, n, rng)


# Conditionnelles --------------------------------------------------------------

def sample_noise(spec: ConditionalSpec, shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """
    Bruit coordonnee par coordonnee de la conditionnelle.

    GenNorm(beta, lambda): |x| = lambda G^(1/beta) avec G ~ Gamma(1/beta, 1),
    signe aleatoire.
    """
    family = spec.family
    if family == ConditionalFamily.NORMAL:
        return spec.sigma * rng.standard_normal(shape)
    if family == ConditionalFamily.LAPLACE:
        return rng.laplace(0.0, spec.lam, size=shape)
    if family == ConditionalFamily.GENNORM:
        magnitude = spec.lam * rng.gamma(1.0 / spec.beta, 1.0, size=shape) ** (1.0 / spec.beta)
        sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
        return sign * magnitude
    raise ConfigError(f"conditional {spec} has no coordinatewise noise")


def sample_conditional(spec: ConditionalSpec, space: LatentSpace, anchors: np.ndarray,
                       rng: np.random.Generator) -> np.ndarray:
    """
    Tire un positif par ancre.

    Sphere + vMF: tirage exact. Sphere + bruit: ancre + bruit puis projection L2.
    Boite: ancre + bruit, rejete jusqu'a tomber dans la boite (densite tronquee
    exacte). R^N: ancre + bruit.

    Args:
        spec: Conditionnelle
        space: Espace latent
        anchors: Un point (N,) ou un batch (n x N)
        rng: Generateur

    Returns:
        Positifs de meme forme que `anchors`
    """
    if not spec.supports(space.kind):
        raise ConfigError(f"conditional {spec} is incompatible with a {space.kind.value} space")
    anchors = np.asarray(anchors, dtype=np.float64)
    single = anchors.ndim == 1
    batch = np.atleast_2d(anchors)
    if batch.shape[1] != space.dim:
        raise ValueError(f"expected anchors of dimension {space.dim}, got {batch.shape[1]}")
    n = batch.shape[0]
    if n == 0:
        return np.zeros((0, space.dim))

    if spec.family == ConditionalFamily.VMF:
        if spec.kappa is None:
            raise ConfigError("vmf conditional needs kappa")
        out = sample_vmf_batch(batch, spec.kappa, rng)
    elif spec.scale_param is None:
        raise ConfigError(f"conditional {spec} needs a scale parameter")
    elif space.kind == SpaceKind.SPHERE:
        out = space.project(batch + sample_noise(spec, batch.shape, rng))
    elif space.kind == SpaceKind.BOX:
        out = np.empty_like(batch)
        pending = np.arange(n)
        attempts = 0
        while pending.size:
            attempts += 1
            if attempts > MAX_REJECTIONS:
                raise SamplingError("conditional effectively degenerate")
            draws = batch[pending] + sample_noise(spec, (pending.size, space.dim), rng)
            inside = space.contains(draws)
            out[pending[inside]] = draws[inside]
            pending = pending[~inside]
    else:
        out = batch + sample_noise(spec, batch.shape, rng)
    return out[0] if single else out


def pair_batch(marginal: MarginalSpec, conditional: ConditionalSpec, space: LatentSpace, n: int,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """n paires (ancres i.i.d. de la marginale, positifs conditionnels)."""
    anchors = sample_marginal(marginal, space, n, rng)
    positives = sample_conditional(conditional, space, anchors, rng)
    return anchors, positives


# Masse deplacee ---------------------------------------------------------------

@dataclass(frozen=True)
class MovedMass:
    """Distance en variation totale a l'uniforme, avec son erreur standard (0 si exacte)."""
    value: float
    stderr: float = 0.0


def _vmf_moved_mass(kappa: float, dim: int) -> float:
    """
    P_vMF(t > t*) - P_uni(t > t*), ou t* = log E_uni[e^{kappa t}] / kappa est le
    cosinus au-dela duquel la densite vMF depasse l'uniforme.
    """
    if kappa == 0:
        return 0.0
    crossing = (vmf_log_normalizer(kappa, dim) - LatentSpace.sphere(dim).log_volume()) / kappa
    # Sous l'uniforme, (1 + t) / 2 suit Beta((N-1)/2, (N-1)/2)
    shape = (dim - 1) / 2.0
    uniform_tail = float(stats.beta.sf((1.0 + crossing) / 2.0, shape, shape))
    return float(np.clip(_vmf_cosine_tail(kappa, dim, crossing) - uniform_tail, 0.0, 1.0))


def _box_normal_moved_mass(sigma: float, space: LatentSpace, rng: np.random.Generator) -> MovedMass:
    """
    E_p[(1 - p_uni / p)^+] par tirages de p, une normale tronquee independante par axe.

    Chaque terme est dans [0, 1]: la variance reste bornee quelle que soit sigma.
    """
    center = space.center
    a = (space.lo - center) / sigma
    b = (space.hi - center) / sigma
    draws = stats.truncnorm.rvs(a, b, loc=center, scale=sigma, size=(MOVED_MASS_MC_SAMPLES, space.dim),
                                random_state=rng)
    log_density = stats.truncnorm.logpdf(draws, a, b, loc=center, scale=sigma).sum(axis=1)
    excess = -np.expm1(np.minimum(-space.log_volume() - log_density, 0.0))
    return MovedMass(
        value=float(excess.mean()),
        stderr=float(excess.std(ddof=1) / math.sqrt(excess.size)),
    )


def marginal_moved_mass(spec: MarginalSpec, space: LatentSpace,
                        rng: Optional[np.random.Generator] = None) -> MovedMass:
    """
    Masse de probabilite a deplacer pour rendre la marginale uniforme.

    Sphere + vMF au pole: forme fermee du seuil de croisement et queues
    exactes (valeur exacte, stderr 0). Boite + normale centree: Monte Carlo
    sur 10^6 tirages de la marginale elle-meme.

    Args:
        spec: Marginale
        space: Sphere ou boite
        rng: Generateur du Monte Carlo (graine 0 par defaut)

    Returns:
        MovedMass(value, stderr)
    """
    if space.kind == SpaceKind.UNBOUNDED:
        raise ConfigError("moved mass undefined on unbounded space")
    if not spec.supports(space.kind):
        raise ConfigError(f"marginal {spec} is incompatible with a {space.kind.value} space")
    if spec.family == MarginalFamily.UNIFORM:
        return MovedMass(0.0)
    if spec.family == MarginalFamily.VMF_POLE:
        return MovedMass(_vmf_moved_mass(spec.kappa, space.dim))
    if spec.family == MarginalFamily.CENTERED_NORMAL:
        return _box_normal_moved_mass(spec.sigma, space, rng if rng is not None else np.random.default_rng(0))
    raise ConfigError(f"moved mass is not implemented for marginal {spec}")


def log_mean_exp(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """log de la moyenne des exponentielles, stable."""
    return logsumexp(values, axis=axis) - math.log(values.shape[axis])
