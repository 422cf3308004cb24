"""
Service des espaces latents.
Domaines Z (sphere, boite, R^N) et mesures de similarite delta.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import gammaln

from src.schemas.config import MeasureKind, SpaceKind, SpaceSpec
from src.utils.errors import ConfigError

SPHERE_TOL = 1e-9


@dataclass(frozen=True)
class LatentSpace:
    """
    Domaine latent Z de dimension `dim`.

    Pour une boite, les bornes par defaut sont [0, 1]^N.
    """
    kind: SpaceKind
    dim: int
    box_lo: Optional[tuple[float, ...]] = None
    box_hi: Optional[tuple[float, ...]] = None
    _lo: np.ndarray = field(init=False, repr=False, compare=False)
    _hi: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"dimension must be positive, got {self.dim}")
        if self.kind == SpaceKind.SPHERE and self.dim < 2:
            raise ConfigError(f"sphere needs dim >= 2, got {self.dim}")
        lo = np.zeros(self.dim) if self.box_lo is None else np.asarray(self.box_lo, dtype=np.float64)
        hi = np.ones(self.dim) if self.box_hi is None else np.asarray(self.box_hi, dtype=np.float64)
        if lo.shape != (self.dim,) or hi.shape != (self.dim,):
            raise ConfigError(f"box bounds must have length {self.dim}")
        if np.any(hi <= lo):
            raise ConfigError("box_hi must exceed box_lo in every dimension")
        object.__setattr__(self, "_lo", lo)
        object.__setattr__(self, "_hi", hi)

    @classmethod
    def from_spec(cls, spec: SpaceSpec) -> "LatentSpace":
        if spec.kind == SpaceKind.BOX:
            return cls(spec.kind, spec.dim, (spec.box_lo,) * spec.dim, (spec.box_hi,) * spec.dim)
        return cls(spec.kind, spec.dim)

    @classmethod
    def sphere(cls, dim: int) -> "LatentSpace":
        return cls(SpaceKind.SPHERE, dim)

    @classmethod
    def box(cls, dim: int, lo: float = 0.0, hi: float = 1.0) -> "LatentSpace":
        return cls(SpaceKind.BOX, dim, (lo,) * dim, (hi,) * dim)

    @classmethod
    def unbounded(cls, dim: int) -> "LatentSpace":
        return cls(SpaceKind.UNBOUNDED, dim)

    @property
    def lo(self) -> np.ndarray:
        return self._lo

    @property
    def hi(self) -> np.ndarray:
        return self._hi

    @property
    def center(self) -> np.ndarray:
        return (self._lo + self._hi) / 2

    def _check_width(self, points: np.ndarray) -> None:
        if points.shape[-1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got {points.shape[-1]}")

    def contains(self, points: np.ndarray, tol: float = SPHERE_TOL) -> np.ndarray:
        """Appartenance point par point (booleen, ou tableau de booleens)."""
        points = np.asarray(points, dtype=np.float64)
        self._check_width(points)
        finite = np.all(np.isfinite(points), axis=-1)
        if self.kind == SpaceKind.SPHERE:
            return finite & (np.abs(np.linalg.norm(points, axis=-1) - 1.0) <= tol)
        if self.kind == SpaceKind.BOX:
            return finite & np.all((points >= self._lo) & (points <= self._hi), axis=-1)
        return finite

    def project(self, points: np.ndarray) -> np.ndarray:
        """
        Projette sur Z: normalisation L2 (sphere), troncature (boite), identite sinon.

        Raises:
            ValueError: vecteur nul sur la sphere
        """
        points = np.asarray(points, dtype=np.float64)
        self._check_width(points)
        if self.kind == SpaceKind.SPHERE:
            norms = np.linalg.norm(points, axis=-1, keepdims=True)
            if np.any(norms == 0.0):
                raise ValueError("unprojectable zero vector")
            return points / norms
        if self.kind == SpaceKind.BOX:
            return np.clip(points, self._lo, self._hi)
        return points.copy()

    def uniform_sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """
        Tirage uniforme de n points.

        Sur la sphere: gaussienne normalisee (invariante par rotation).
        Dans la boite: uniformes independantes par coordonnee.
        """
        if self.kind == SpaceKind.UNBOUNDED:
            raise ConfigError("uniform marginal undefined on unbounded space")
        if n < 0:
            raise ValueError(f"sample count must be >= 0, got {n}")
        if self.kind == SpaceKind.SPHERE:
            draws = rng.standard_normal((n, self.dim))
            # Une norme nulle est de probabilite nulle, mais on la retire quand meme
            while n and np.any(bad := np.linalg.norm(draws, axis=1) == 0.0):
                draws[bad] = rng.standard_normal((int(bad.sum()), self.dim))
            return self.project(draws)
        return self._lo + (self._hi - self._lo) * rng.random((n, self.dim))

    def log_volume(self) -> float:
        """log |Z|: aire de la sphere unite ou volume de la boite."""
        if self.kind == SpaceKind.UNBOUNDED:
            raise ConfigError("log volume undefined on unbounded space")
        if self.kind == SpaceKind.SPHERE:
            half = self.dim / 2.0
            return math.log(2.0) + half * math.log(math.pi) - float(gammaln(half))
        return float(np.sum(np.log(self._hi - self._lo)))


@dataclass(frozen=True)
class SimilarityMeasure:
    """
    Produit scalaire, ou puissance alpha-ieme de la distance L^alpha.

    LpPow(alpha) stocke sum_i |a_i - b_i|^alpha (sans racine), une
    semi-metrique.
    """
    kind: MeasureKind
    alpha: float = 2.0

    def __post_init__(self):
        if self.kind == MeasureKind.LP_POW and self.alpha < 1:
            raise ConfigError(f"lp_pow needs alpha >= 1, got {self.alpha}")

    @classmethod
    def dot(cls) -> "SimilarityMeasure":
        return cls(MeasureKind.DOT)

    @classmethod
    def lp_pow(cls, alpha: float) -> "SimilarityMeasure":
        return cls(MeasureKind.LP_POW, float(alpha))

    @property
    def label(self) -> str:
        if self.kind == MeasureKind.DOT:
            return "dot"
        return f"lp_pow({self.alpha:g})"

    def check_space(self, kind: SpaceKind) -> None:
        if self.kind == MeasureKind.DOT and kind != SpaceKind.SPHERE:
            raise ConfigError("the dot-product similarity is only valid on the sphere")

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """delta(a, b) pour LpPow, a.b pour le produit scalaire (ligne a ligne)."""
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
        if self.kind == MeasureKind.DOT:
            return np.sum(a * b, axis=-1)
        return np.sum(np.abs(a - b) ** self.alpha, axis=-1)

    def score(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Logit non tempere: a.b, ou -delta(a, b)."""
        value = self(a, b)
        return value if self.kind == MeasureKind.DOT else -value

    def pairwise_score(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Matrice des scores s(a_i, b_j)."""
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape[1] != b.shape[1]:
            raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
        if self.kind == MeasureKind.DOT:
            return a @ b.T
        if self.alpha == 2.0:
            sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2 * a @ b.T
            return -np.maximum(sq, 0.0)
        return -np.sum(np.abs(a[:, None, :] - b[None, :, :]) ** self.alpha, axis=2)


def similarity(measure: SimilarityMeasure, a: np.ndarray, b: np.ndarray) -> float:
    """delta(a, b) (LpPow) ou a.b (produit scalaire) pour deux points."""
    return float(measure(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))
