"""
Service de calcul des scores d'identifiabilite.
R2 par regression lineaire, MCC par appariement optimal et diagnostics de
structure de l'application lineaire ajustee.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg, stats

from src.schemas.config import Correlation
from src.schemas.results import EvalReport
from src.utils.linalg import hungarian, jacobi_svd

logger = logging.getLogger(__name__)

RIDGE = 1e-8


@dataclass
class LinearFit:
    """truth ~ recovered @ A.T + b."""
    A: np.ndarray
    b: np.ndarray
    residual: float
    ridge: bool = False

    def predict(self, recovered: np.ndarray) -> np.ndarray:
        return recovered @ self.A.T + self.b


@dataclass
class MccResult:
    """Score MCC et appariement recupere -> verite (signe inclus)."""
    score: float
    assignment: list[int]
    signs: list[int]
    warnings: list[str] = field(default_factory=list)

    def __iter__(self):
        yield self.score
        yield self.assignment


def _as_batch(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return values[:, None] if values.ndim == 1 else values


def fit_linear(recovered: np.ndarray, truth: np.ndarray) -> LinearFit:
    """
    Moindres carres avec intercept, par equations normales centrees.

    Cholesky sur X^T X; en cas d'echec, ajout d'une crete 1e-8 (avertissement).

    Args:
        recovered: Latents retrouves (n x K)
        truth: Latents de reference (n x N)

    Returns:
        LinearFit avec A (N x K), b (N,) et l'erreur quadratique moyenne

    Raises:
        ValueError: moins de K + 1 echantillons
    """
    recovered, truth = _as_batch(recovered), _as_batch(truth)
    if recovered.shape[0] != truth.shape[0]:
        raise ValueError(f"sample count mismatch: {recovered.shape[0]} vs {truth.shape[0]}")
    n, k = recovered.shape
    if n < k + 1:
        raise ValueError(f"too few samples for a fit: {n} < {k + 1}")

    x_mean, y_mean = recovered.mean(axis=0), truth.mean(axis=0)
    xc, yc = recovered - x_mean, truth - y_mean
    gram, rhs = xc.T @ xc, xc.T @ yc
    ridge = False
    try:
        coef = linalg.cho_solve(linalg.cho_factor(gram), rhs)
    except linalg.LinAlgError:
        logger.warning("matrice de Gram singuliere, crete %.0e appliquee", RIDGE)
        ridge = True
        coef = linalg.cho_solve(linalg.cho_factor(gram + RIDGE * np.eye(k)), rhs)

    a = coef.T
    b = y_mean - a @ x_mean
    residual = float(np.mean((recovered @ a.T + b - truth) ** 2))
    return LinearFit(a, b, residual, ridge)


def r2_per_dimension(predicted: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, list[str]]:
    """R2 par dimension; nan (et avertissement) pour une dimension de variance nulle."""
    truth = _as_batch(truth)
    ss_res = np.sum((truth - predicted) ** 2, axis=0)
    ss_tot = np.sum((truth - truth.mean(axis=0)) ** 2, axis=0)
    warnings = []
    scores = np.full(truth.shape[1], np.nan)
    for j in range(truth.shape[1]):
        if ss_tot[j] == 0.0:
            warnings.append(f"dimension {j} has zero variance; excluded from R2")
            continue
        scores[j] = 1.0 - ss_res[j] / ss_tot[j]
    for message in warnings:
        logger.warning(message)
    return scores, warnings


def r2_score(recovered: np.ndarray, truth: np.ndarray, holdout: bool = True) -> float:
    """
    R2 moyen de la prediction affine de `truth` a partir de `recovered`.

    Avec holdout, la regression est ajustee sur la premiere moitie et
    evaluee sur la seconde.
    """
    recovered, truth = _as_batch(recovered), _as_batch(truth)
    if holdout:
        half = recovered.shape[0] // 2
        fit = fit_linear(recovered[:half], truth[:half])
        scores, _ = r2_per_dimension(fit.predict(recovered[half:]), truth[half:])
    else:
        fit = fit_linear(recovered, truth)
        scores, _ = r2_per_dimension(fit.predict(recovered), truth)
    return float(np.nanmean(scores)) if np.any(np.isfinite(scores)) else math.nan


def _standardize(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centered = values - values.mean(axis=0)
    std = np.sqrt(np.sum(centered ** 2, axis=0))
    constant = std == 0.0
    return centered / np.where(constant, 1.0, std), constant


def correlation_matrix(recovered: np.ndarray, truth: np.ndarray,
                       corr: Correlation = Correlation.PEARSON) -> tuple[np.ndarray, list[str]]:
    """Correlations C[i, j] entre recovered_i et truth_j; 0 pour une dimension constante."""
    recovered, truth = _as_batch(recovered), _as_batch(truth)
    if corr == Correlation.SPEARMAN:
        recovered = stats.rankdata(recovered, axis=0)
        truth = stats.rankdata(truth, axis=0)
    xs, x_const = _standardize(recovered)
    ys, y_const = _standardize(truth)
    matrix = xs.T @ ys
    matrix[x_const, :] = 0.0
    matrix[:, y_const] = 0.0
    warnings = [f"recovered dimension {i} has zero variance" for i in np.flatnonzero(x_const)]
    warnings += [f"truth dimension {j} has zero variance" for j in np.flatnonzero(y_const)]
    for message in warnings:
        logger.warning(message)
    return np.clip(matrix, -1.0, 1.0), warnings


def mcc(recovered: np.ndarray, truth: np.ndarray, corr: Correlation = Correlation.PEARSON) -> MccResult:
    """
    Coefficient de correlation moyen apres appariement optimal.

    Args:
        recovered: Latents retrouves (n x N)
        truth: Latents de reference (n x N)
        corr: Pearson (defaut) ou Spearman

    Returns:
        MccResult(score dans [0, 1], appariement, signes)
    """
    recovered, truth = _as_batch(recovered), _as_batch(truth)
    if recovered.shape[0] < 2:
        raise ValueError("mcc needs at least 2 samples")
    if recovered.shape[1] != truth.shape[1]:
        raise ValueError(f"dimension mismatch: {recovered.shape[1]} vs {truth.shape[1]}")
    matrix, warnings = correlation_matrix(recovered, truth, corr)
    perm = hungarian(-np.abs(matrix))
    matched = matrix[np.arange(len(perm)), perm]
    return MccResult(
        score=float(np.mean(np.abs(matched))),
        assignment=[int(j) for j in perm],
        signs=[-1 if c < 0 else 1 for c in matched],
        warnings=warnings,
    )


def orthogonality_residual(fit: LinearFit) -> float:
    """
    Defaut d'orthogonalite sans echelle: ||A'^T A' - I||_F / sqrt(N), A' = A / moyenne(sv).

    nan si A n'est pas carree.
    """
    a = fit.A
    if a.shape[0] != a.shape[1]:
        return math.nan
    _, s, _ = jacobi_svd(a)
    if s.mean() == 0.0:
        return math.nan
    scaled = a / s.mean()
    return float(np.linalg.norm(scaled.T @ scaled - np.eye(a.shape[0])) / math.sqrt(a.shape[0]))


def permutation_residual(fit: LinearFit) -> float:
    """
    Part de la masse |A| hors de l'appariement optimal.

    Nul si et seulement si A est une permutation generalisee.
    """
    magnitude = np.abs(fit.A)
    if magnitude.shape[0] != magnitude.shape[1]:
        return math.nan
    total = magnitude.sum()
    if total == 0.0:
        return math.nan
    perm = hungarian(-magnitude)
    return float(1.0 - magnitude[np.arange(len(perm)), perm].sum() / total)


def isometry_residual(features: np.ndarray, latents: np.ndarray, kappa: float, tau: float = 1.0) -> float:
    """
    Ecart relatif entre F F^T / tau et kappa Z Z^T.

    Un minimiseur de l'entropie croisee preserve les produits scalaires a ce
    facteur pres.
    """
    features, latents = _as_batch(features), _as_batch(latents)
    target = kappa * latents @ latents.T
    gap = features @ features.T / tau - target
    return float(np.linalg.norm(gap) / np.linalg.norm(target))


def evaluate(
    recovered: np.ndarray,
    truth: np.ndarray,
    corr: Correlation = Correlation.PEARSON,
    isometry: Optional[tuple[float, float]] = None,
    isometry_sample: int = 512,
) -> EvalReport:
    """
    Calcule tous les scores sur un jeu d'evaluation.

    Args:
        recovered: Latents retrouves (ou observations pour le modele identite)
        truth: Latents de reference
        corr: Correlation du MCC
        isometry: (kappa, tau) pour le residu d'isometrie, sinon ignore
        isometry_sample: Nombre de points pour le residu d'isometrie

    Returns:
        EvalReport
    """
    recovered, truth = _as_batch(recovered), _as_batch(truth)
    half = recovered.shape[0] // 2
    holdout_fit = fit_linear(recovered[:half], truth[:half])
    r2_dims, warnings = r2_per_dimension(holdout_fit.predict(recovered[half:]), truth[half:])
    full_fit = fit_linear(recovered, truth)
    train_dims, _ = r2_per_dimension(full_fit.predict(recovered), truth)
    if full_fit.ridge or holdout_fit.ridge:
        warnings.append("ridge fallback used in the linear fit")

    if recovered.shape[1] == truth.shape[1]:
        matching = mcc(recovered, truth, corr)
        warnings += [w for w in matching.warnings if w not in warnings]
    else:
        matching = MccResult(math.nan, [], [])

    iso = None
    if isometry is not None:
        kappa, tau = isometry
        iso = isometry_residual(recovered[:isometry_sample], truth[:isometry_sample], kappa, tau)

    def mean_of(scores: np.ndarray) -> float:
        return float(np.nanmean(scores)) if np.any(np.isfinite(scores)) else math.nan

    return EvalReport(
        r2_mean=mean_of(r2_dims),
        r2_train=mean_of(train_dims),
        r2_per_dim=[float(s) for s in r2_dims],
        mcc=matching.score,
        assignment=matching.assignment,
        signs=matching.signs,
        orthogonality_residual=orthogonality_residual(full_fit),
        permutation_residual=permutation_residual(full_fit),
        isometry_residual=iso,
        warnings=warnings,
    )
