"""
Schemas Pydantic des configurations.
Distributions, objectifs, entrainement et lignes de grille.
"""

import re
from enum import Enum
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, model_serializer, model_validator


class SpaceKind(str, Enum):
    """Domaines latents."""
    SPHERE = "sphere"
    BOX = "box"
    UNBOUNDED = "unbounded"


class HeadKind(str, Enum):
    """Normalisation de sortie de l'encodeur (espace suppose par le modele)."""
    SPHERE_L2 = "sphere"
    BOX_LINF = "box"
    NONE = "unbounded"


class MarginalFamily(str, Enum):
    """Familles de lois marginales."""
    UNIFORM = "uniform"
    VMF_POLE = "vmf_pole"
    PROJECTED_NORMAL = "projected_normal"
    NORMAL = "normal"
    LAPLACE = "laplace"
    CENTERED_NORMAL = "centered_normal"


class ConditionalFamily(str, Enum):
    """Familles de lois conditionnelles (paires positives)."""
    VMF = "vmf"
    NORMAL = "normal"
    LAPLACE = "laplace"
    GENNORM = "gennorm"


class ObjectiveKind(str, Enum):
    INFO_NCE = "info_nce"
    DELTA_CONTRASTIVE = "delta_contrastive"
    SUPERVISED_MSE = "supervised_mse"


class MeasureKind(str, Enum):
    DOT = "dot"
    LP_POW = "lp_pow"


class NegativeMode(str, Enum):
    """Origine des negatifs: le reste du batch ou des tirages frais de la marginale."""
    IN_BATCH = "in_batch"
    FRESH_MARGINAL = "fresh_marginal"


class Correlation(str, Enum):
    PEARSON = "pearson"
    SPEARMAN = "spearman"


class ModelType(str, Enum):
    """Les trois modeles evalues pour chaque ligne."""
    IDENTITY = "identity"
    SUPERVISED = "supervised"
    UNSUPERVISED = "unsupervised"


# Libelles compacts ----------------------------------------------------------

_LABEL = re.compile(r"^\s*([a-z_]+)\s*(?:\((.*)\))?\s*$")
# Nom du parametre dans les libelles -> nom du champ
_LABEL_KEYS = {"kappa": "kappa", "sigma": "sigma", "lambda": "lam", "beta": "beta"}
_FIELD_KEYS = {v: k for k, v in _LABEL_KEYS.items()}


def format_number(value: float) -> str:
    """Ecriture courte d'un flottant qui se relit a l'identique."""
    text = format(float(value), ".15g")
    if float(text) != float(value):
        text = repr(float(value))
    return text


def parse_label(label: str) -> dict[str, Any]:
    """
    Decompose un libelle du type "gennorm(beta=3, lambda=0.05)".

    Returns:
        Dictionnaire {"family": ..., parametres...}
    """
    match = _LABEL.match(label)
    if not match:
        raise ValueError(f"malformed distribution label: {label!r}")
    data: dict[str, Any] = {"family": match.group(1)}
    args = match.group(2)
    if args and args.strip():
        for part in args.split(","):
            if "=" not in part:
                raise ValueError(f"malformed parameter {part.strip()!r} in {label!r}")
            key, raw = (s.strip() for s in part.split("=", 1))
            if key not in _LABEL_KEYS:
                raise ValueError(f"unknown parameter {key!r} in {label!r}")
            data[_LABEL_KEYS[key]] = float(raw)
    return data


class _LabelledSpec(BaseModel):
    """Base commune: se lit et s'ecrit sous forme de libelle."""

    model_config = ConfigDict(frozen=True)

    kappa: Optional[float] = None
    sigma: Optional[float] = None
    lam: Optional[float] = None
    beta: Optional[float] = None

    @model_validator(mode="before")
    @classmethod
    def _from_label(cls, data: Any) -> Any:
        if isinstance(data, str):
            return parse_label(data)
        return data

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.kappa is not None and self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        for name in ("sigma", "lam"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ValueError(f"{_FIELD_KEYS[name]} must be > 0, got {value}")
        if self.beta is not None and self.beta < 1:
            raise ValueError(f"beta must be >= 1, got {self.beta}")
        return self

    def label(self) -> str:
        params = [
            f"{_FIELD_KEYS[name]}={format_number(getattr(self, name))}"
            for name in ("beta", "kappa", "sigma", "lam")
            if getattr(self, name) is not None
        ]
        family = self.family.value  # type: ignore[attr-defined]
        return f"{family}({', '.join(params)})" if params else family

    @model_serializer
    def _to_label(self) -> str:
        return self.label()

    def __str__(self) -> str:
        return self.label()


class MarginalSpec(_LabelledSpec):
    """Loi marginale p(z)."""
    family: MarginalFamily

    @model_validator(mode="after")
    def _check_family(self):
        required = {
            MarginalFamily.VMF_POLE: "kappa",
            MarginalFamily.PROJECTED_NORMAL: "sigma",
            MarginalFamily.NORMAL: "sigma",
            MarginalFamily.LAPLACE: "lam",
            MarginalFamily.CENTERED_NORMAL: "sigma",
        }.get(self.family)
        if required and getattr(self, required) is None:
            raise ValueError(f"marginal {self.family.value} needs {_FIELD_KEYS[required]}")
        return self

    def supports(self, space: SpaceKind) -> bool:
        """Compatibilite famille / espace."""
        allowed = {
            MarginalFamily.UNIFORM: {SpaceKind.SPHERE, SpaceKind.BOX},
            MarginalFamily.VMF_POLE: {SpaceKind.SPHERE},
            MarginalFamily.PROJECTED_NORMAL: {SpaceKind.SPHERE},
            MarginalFamily.NORMAL: {SpaceKind.UNBOUNDED},
            MarginalFamily.LAPLACE: {SpaceKind.UNBOUNDED},
            MarginalFamily.CENTERED_NORMAL: {SpaceKind.BOX},
        }
        return space in allowed[self.family]


class ConditionalSpec(_LabelledSpec):
    """
    Loi conditionnelle p(z~|z), ou forme supposee q_h par le modele.

    Pour un modele, seuls la famille et beta (gennorm) comptent; les autres
    parametres peuvent etre omis.
    """
    family: ConditionalFamily

    @model_validator(mode="after")
    def _check_family(self):
        if self.family == ConditionalFamily.GENNORM and self.beta is None:
            raise ValueError("gennorm needs beta")
        if self.kappa is not None and self.kappa == 0 and self.family == ConditionalFamily.VMF:
            raise ValueError("vmf conditional needs kappa > 0")
        return self

    def supports(self, space: SpaceKind) -> bool:
        return self.family != ConditionalFamily.VMF or space == SpaceKind.SPHERE

    @property
    def scale_param(self) -> Optional[float]:
        """Echelle du bruit coordonnee par coordonnee (sigma ou lambda)."""
        if self.family == ConditionalFamily.NORMAL:
            return self.sigma
        if self.family in (ConditionalFamily.LAPLACE, ConditionalFamily.GENNORM):
            return self.lam
        return None

    def power(self) -> float:
        """Exposant alpha de la semi-metrique associee (vmf -> produit scalaire)."""
        return {
            ConditionalFamily.NORMAL: 2.0,
            ConditionalFamily.LAPLACE: 1.0,
            ConditionalFamily.GENNORM: float(self.beta or 2.0),
        }[self.family]


# Objectif et entrainement -----------------------------------------------------

class ObjectiveSpec(BaseModel):
    """Objectif d'entrainement."""
    model_config = ConfigDict(frozen=True)

    kind: ObjectiveKind = ObjectiveKind.INFO_NCE
    tau: float = Field(default=1.0, gt=0)
    measure: MeasureKind = MeasureKind.DOT
    alpha: float = Field(default=2.0, ge=1)
    negatives: NegativeMode = NegativeMode.IN_BATCH
    n_negatives: int = Field(default=0, ge=0)
    include_positive: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.kind == ObjectiveKind.DELTA_CONTRASTIVE and self.measure == MeasureKind.DOT:
            raise ValueError("delta_contrastive needs an lp_pow measure")
        if self.kind == ObjectiveKind.INFO_NCE and self.measure != MeasureKind.DOT:
            raise ValueError("info_nce uses the dot product")
        if self.negatives == NegativeMode.FRESH_MARGINAL and self.n_negatives < 1:
            raise ValueError("fresh_marginal negatives need n_negatives >= 1")
        return self


class SpaceSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: SpaceKind
    dim: int = Field(default=10, ge=1)
    box_lo: float = 0.0
    box_hi: float = 1.0


class MixingSpec(BaseModel):
    """Reseau de melange g."""
    model_config = ConfigDict(frozen=True)

    cond_cap: float = Field(default=6.0, ge=1)
    n_layers: int = Field(default=3, ge=1)
    slope: float = Field(default=0.2, gt=0, lt=1)
    out_dim: Optional[int] = None
    bias_scale: float = Field(default=0.0, ge=0)


class EncoderSpec(BaseModel):
    """Encodeur f: largeurs cachees en multiples de la dimension latente."""
    model_config = ConfigDict(frozen=True)

    hidden: tuple[int, ...] = (10, 50, 50, 50, 50, 10)
    slope: float = Field(default=0.01, gt=0, lt=1)
    magnitude_init: float = Field(default=1.0, gt=0)


class TrainConfig(BaseModel):
    """Configuration d'un entrainement."""
    model_config = ConfigDict(frozen=True)

    iterations: int = Field(default=20000, ge=0)
    batch_size: int = Field(default=512, ge=2)
    lr: float = Field(default=1e-4, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(default=1e-8, gt=0)
    seed: int = Field(default=0, ge=0)
    eval_every: int = Field(default=1000, ge=1)
    eval_size: int = Field(default=4096, ge=4)
    objective: ObjectiveSpec = ObjectiveSpec()
    space: SpaceSpec
    marginal: MarginalSpec
    conditional: ConditionalSpec
    head: HeadKind
    mixing: MixingSpec = MixingSpec()
    encoder: EncoderSpec = EncoderSpec()

    @model_validator(mode="after")
    def _check_compatibility(self):
        if not self.marginal.supports(self.space.kind):
            raise ValueError(f"marginal {self.marginal} is incompatible with {self.space.kind.value}")
        if not self.conditional.supports(self.space.kind):
            raise ValueError(f"conditional {self.conditional} is incompatible with {self.space.kind.value}")
        if self.conditional.family == ConditionalFamily.VMF:
            if self.conditional.kappa is None:
                raise ValueError("ground-truth vmf conditional needs kappa")
        elif self.conditional.scale_param is None:
            raise ValueError(f"ground-truth conditional {self.conditional} needs a scale parameter")
        if self.objective.measure == MeasureKind.DOT and self.objective.kind != ObjectiveKind.SUPERVISED_MSE \
                and self.head != HeadKind.SPHERE_L2:
            raise ValueError("the dot-product objective needs the sphere head")
        for beta in self.betas:
            if not 0.0 <= beta < 1.0:
                raise ValueError(f"adam betas must lie in [0, 1), got {self.betas}")
        return self


PAPER_SCALE = {"iterations": 300_000, "batch_size": 6144}


class RunConfig(BaseModel):
    """
    Une ligne d'experience, stockee en TOML plat (cle = valeur).

    Le processus generatif (gt_*) et le modele (model_*) sont decrits
    independamment; l'objectif se deduit de model_conditional.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    preset: str = "custom"
    row: str = "r00"
    block: int = 0
    seed: int = Field(default=0, ge=0)
    replicates: int = Field(default=5, ge=1)

    dim: int = Field(default=10, ge=2)
    gt_space: SpaceKind
    box_lo: float = 0.0
    box_hi: float = 1.0
    gt_marginal: MarginalSpec
    gt_conditional: ConditionalSpec
    model_head: HeadKind
    model_conditional: ConditionalSpec

    tau: float = Field(default=1.0, gt=0)
    negatives: NegativeMode = NegativeMode.IN_BATCH
    n_negatives: int = Field(default=0, ge=0)
    include_positive: bool = True

    iterations: int = Field(default=20000, ge=0)
    batch_size: int = Field(default=512, ge=2)
    lr: float = Field(default=1e-4, gt=0)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = Field(default=1000, ge=1)
    eval_size: int = Field(default=4096, ge=4)

    cond_cap: float = Field(default=6.0, ge=1)
    mixing_layers: int = Field(default=3, ge=1)
    mixing_out_dim: Optional[int] = None
    mixing_bias_scale: float = 0.0
    encoder_hidden: list[int] = Field(default_factory=lambda: [10, 50, 50, 50, 50, 10])
    encoder_slope: float = 0.01

    baseline_identity: bool = True
    baseline_supervised: bool = True
    correlation: Correlation = Correlation.PEARSON
    note: str = ""

    @model_validator(mode="after")
    def _check(self):
        if self.box_hi <= self.box_lo:
            raise ValueError(f"box_hi must exceed box_lo, got [{self.box_lo}, {self.box_hi}]")
        if self.model_conditional.family == ConditionalFamily.VMF and self.model_head != HeadKind.SPHERE_L2:
            raise ValueError("a vmf model conditional needs model_head = sphere")
        if self.mixing_out_dim is not None and self.mixing_out_dim < self.dim:
            raise ValueError(f"mixing_out_dim must be >= dim, got {self.mixing_out_dim}")
        # Les contraintes famille / espace sont verifiees par TrainConfig
        self.train_config(ModelType.UNSUPERVISED, self.seed)
        return self

    def objective(self) -> ObjectiveSpec:
        """Objectif implique par model_conditional."""
        common = dict(
            tau=self.tau,
            negatives=self.negatives,
            n_negatives=self.n_negatives,
            include_positive=self.include_positive,
        )
        if self.model_conditional.family == ConditionalFamily.VMF:
            return ObjectiveSpec(kind=ObjectiveKind.INFO_NCE, measure=MeasureKind.DOT, **common)
        return ObjectiveSpec(
            kind=ObjectiveKind.DELTA_CONTRASTIVE,
            measure=MeasureKind.LP_POW,
            alpha=self.model_conditional.power(),
            **common,
        )

    @property
    def matched(self) -> bool:
        """Hypotheses du modele identiques au processus generatif."""
        gt, model = self.gt_conditional, self.model_conditional
        if self.gt_marginal.family != MarginalFamily.UNIFORM:
            return False
        if self.model_head.value != self.gt_space.value or gt.family != model.family:
            return False
        # Une normale isotrope est invariante par rotation: aucune garantie hors de la sphere
        if gt.family == ConditionalFamily.NORMAL and self.gt_space != SpaceKind.SPHERE:
            return False
        if gt.family == ConditionalFamily.VMF and model.kappa is not None:
            return gt.kappa == model.kappa
        if gt.family == ConditionalFamily.GENNORM:
            return gt.beta == model.beta
        return True

    def train_config(self, model_type: ModelType, seed: int) -> TrainConfig:
        """TrainConfig pour un type de modele et une graine."""
        if model_type == ModelType.SUPERVISED:
            objective = ObjectiveSpec(kind=ObjectiveKind.SUPERVISED_MSE, measure=MeasureKind.LP_POW)
            head = HeadKind.NONE
        else:
            objective = self.objective()
            head = self.model_head
        return TrainConfig(
            iterations=self.iterations,
            batch_size=self.batch_size,
            lr=self.lr,
            betas=(self.beta1, self.beta2),
            adam_eps=self.adam_eps,
            seed=seed,
            eval_every=self.eval_every,
            eval_size=self.eval_size,
            objective=objective,
            space=SpaceSpec(kind=self.gt_space, dim=self.dim, box_lo=self.box_lo, box_hi=self.box_hi),
            marginal=self.gt_marginal,
            conditional=self.gt_conditional,
            head=head,
            mixing=MixingSpec(
                cond_cap=self.cond_cap,
                n_layers=self.mixing_layers,
                out_dim=self.mixing_out_dim,
                bias_scale=self.mixing_bias_scale,
            ),
            encoder=EncoderSpec(hidden=tuple(self.encoder_hidden), slope=self.encoder_slope),
        )

    def with_paper_scale(self) -> "RunConfig":
        return self.model_copy(update=PAPER_SCALE)


class SweepSpec(BaseModel):
    """Balayage de la concentration de la marginale."""
    space: SpaceKind
    concentrations: list[float]


class GridSpec(BaseModel):
    """Grille nommee (preset) ou liste explicite de lignes."""
    name: str = "custom"
    rows: list[RunConfig] = Field(default_factory=list)
    sweep: Optional[SweepSpec] = None
