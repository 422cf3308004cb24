"""
Schemas Pydantic des resultats.
Rapports d'evaluation, historique d'entrainement et lignes CSV.
"""

from typing import Optional, Union

from pydantic import BaseModel, Field


class EvalReport(BaseModel):
    """Scores d'identifiabilite d'un jeu de latents retrouves."""
    r2_mean: float
    r2_train: float
    r2_per_dim: list[float]
    mcc: float
    assignment: list[int]
    signs: list[int]
    orthogonality_residual: float
    permutation_residual: float
    isometry_residual: Optional[float] = None
    warnings: list[str] = Field(default_factory=list)


class HistoryRecord(BaseModel):
    """Une evaluation periodique pendant l'entrainement."""
    iteration: int
    loss: float
    align: float
    uniform: float
    r2: float
    mcc: float


HISTORY_COLUMNS = ["iteration", "loss", "align", "uniform", "r2", "mcc"]

# Colonnes du CSV de grille, dans l'ordre d'ecriture
RUN_COLUMNS = [
    "run_id", "preset", "row", "seed", "model_type", "space_gt", "marginal",
    "conditional_gt", "head", "conditional_model", "matched_flag", "r2_train",
    "r2_holdout", "mcc", "ortho_residual", "perm_residual", "loss_final",
    "align_final", "uniform_final", "wall_seconds", "status",
    "block", "isometry_residual", "note", "message",
]

METRIC_COLUMNS = [
    "r2_train", "r2_holdout", "mcc", "ortho_residual", "perm_residual",
    "loss_final", "align_final", "uniform_final", "wall_seconds", "isometry_residual",
]


class RunRecord(BaseModel):
    """Une ligne du CSV: (ligne de grille x graine x type de modele)."""
    run_id: str
    preset: str
    row: str
    seed: Union[int, str]
    model_type: str
    space_gt: str
    marginal: str
    conditional_gt: str
    head: str
    conditional_model: str
    matched_flag: bool
    r2_train: Optional[float] = None
    r2_holdout: Optional[float] = None
    mcc: Optional[float] = None
    ortho_residual: Optional[float] = None
    perm_residual: Optional[float] = None
    loss_final: Optional[float] = None
    align_final: Optional[float] = None
    uniform_final: Optional[float] = None
    wall_seconds: Optional[float] = None
    status: str = "ok"
    block: int = 0
    isometry_residual: Optional[float] = None
    note: str = ""
    message: str = ""
