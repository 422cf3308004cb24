"""
Service d'experiences.
Execute les lignes de grille (graines x types de modele), en parallele ou
non, et le balayage de concentration de la marginale.
"""

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Optional, Sequence

import pandas as pd

from src.schemas.config import (
    ConditionalFamily,
    GridSpec,
    MarginalFamily,
    MarginalSpec,
    ModelType,
    RunConfig,
    SpaceKind,
    format_number,
)
from src.schemas.results import METRIC_COLUMNS, RUN_COLUMNS, EvalReport, RunRecord
from src.services.network_service import predict
from src.services.sampling_service import marginal_moved_mass
from src.services.scoring_service import evaluate
from src.services.space_service import LatentSpace
from src.services.training_service import TrainResult, build_ground_truth, train
from src.utils.errors import ConfigError, DivergenceError
from src.utils.random_streams import named_stream

logger = logging.getLogger(__name__)

MODEL_ORDER = (ModelType.IDENTITY, ModelType.SUPERVISED, ModelType.UNSUPERVISED)
MOVED_MASS_STREAM = "moved-mass"
SWEEP_COLUMNS = ["concentration", "moved_mass", "r2_mean", "r2_std", "moved_mass_stderr", "n_ok"]


@dataclass(frozen=True)
class RunTask:
    """Une execution: ligne de grille, graine et type de modele."""
    config: RunConfig
    seed: int
    model_type: ModelType

    @property
    def run_id(self) -> str:
        return f"{self.config.preset}-{self.config.row}-s{self.seed}-{self.model_type.value}"


@dataclass
class RunOutput:
    report: EvalReport
    record: RunRecord
    result: Optional[TrainResult] = None


def model_types(config: RunConfig) -> list[ModelType]:
    wanted = {ModelType.UNSUPERVISED}
    if config.baseline_identity:
        wanted.add(ModelType.IDENTITY)
    if config.baseline_supervised:
        wanted.add(ModelType.SUPERVISED)
    return [m for m in MODEL_ORDER if m in wanted]


def seeds_for(config: RunConfig) -> list[int]:
    return [config.seed + r for r in range(config.replicates)]


def expand_tasks(grid: GridSpec) -> list[RunTask]:
    return [
        RunTask(row, seed, model_type)
        for row in grid.rows
        for seed in seeds_for(row)
        for model_type in model_types(row)
    ]


def _record_meta(task: RunTask) -> dict[str, Any]:
    config = task.config
    if task.model_type == ModelType.IDENTITY:
        head, conditional_model = "-", "-"
    elif task.model_type == ModelType.SUPERVISED:
        head, conditional_model = "unbounded", "mse"
    else:
        head, conditional_model = config.model_head.value, str(config.model_conditional)
    return dict(
        run_id=task.run_id,
        preset=config.preset,
        row=config.row,
        seed=task.seed,
        model_type=task.model_type.value,
        space_gt=config.gt_space.value,
        marginal=str(config.gt_marginal),
        conditional_gt=str(config.gt_conditional),
        head=head,
        conditional_model=conditional_model,
        matched_flag=config.matched,
        block=config.block,
        note=config.note,
    )


def _isometry_target(config: RunConfig) -> Optional[tuple[float, float]]:
    """(kappa, tau) quand le residu d'isometrie a un sens: produit scalaire et vMF sur la sphere."""
    if (config.gt_space == SpaceKind.SPHERE
            and config.gt_conditional.family == ConditionalFamily.VMF
            and config.model_conditional.family == ConditionalFamily.VMF):
        return config.gt_conditional.kappa, config.tau
    return None


def run_task(task: RunTask) -> RunOutput:
    """
    Execute une tache sans capturer les erreurs.

    Le modele identite evalue directement les observations contre les sources.
    """
    config = task.config
    started = time.perf_counter()
    if task.model_type == ModelType.IDENTITY:
        truth = build_ground_truth(config.train_config(ModelType.UNSUPERVISED, task.seed))
        report = evaluate(truth.eval_set.x, truth.eval_set.z, config.correlation)
        result = None
        final = {}
    else:
        result = train(config.train_config(task.model_type, task.seed))
        eval_set = result.ground_truth.eval_set
        isometry = _isometry_target(config) if task.model_type == ModelType.UNSUPERVISED else None
        report = evaluate(predict(result.encoder, eval_set.x), eval_set.z, config.correlation, isometry)
        last = result.history[-1]
        final = dict(loss_final=last.loss, align_final=last.align, uniform_final=last.uniform)

    record = RunRecord(
        **_record_meta(task),
        r2_train=report.r2_train,
        r2_holdout=report.r2_mean,
        mcc=report.mcc,
        ortho_residual=report.orthogonality_residual,
        perm_residual=report.permutation_residual,
        isometry_residual=report.isometry_residual,
        wall_seconds=time.perf_counter() - started,
        status="ok",
        **final,
    )
    return RunOutput(report, record, result)


def execute_task(task: RunTask) -> RunRecord:
    """Execute une tache; une erreur devient une ligne status=error."""
    try:
        return run_task(task).record
    except Exception as exc:  # une ligne en erreur ne doit pas interrompre la grille
        logger.error("%s: %s", task.run_id, exc)
        partial = {}
        if isinstance(exc, DivergenceError) and exc.history:
            last = exc.history[-1]
            partial = dict(loss_final=last.loss, align_final=last.align, uniform_final=last.uniform)
        return RunRecord(**_record_meta(task), status="error", message=str(exc).splitlines()[0], **partial)


def run_single(config: RunConfig, seed: Optional[int] = None) -> dict[ModelType, RunOutput]:
    """
    Entraine (ou evalue) chaque type de modele demande pour une graine.

    Returns:
        {type de modele: RunOutput}
    """
    seed = config.seed if seed is None else seed
    return {m: run_task(RunTask(config, seed, m)) for m in model_types(config)}


def _baseline_key(task: RunTask) -> Optional[str]:
    """Cle de partage des modeles de reference qui ne dependent que de la verite terrain."""
    if task.model_type == ModelType.UNSUPERVISED:
        return None
    config = task.config
    fields = [
        "dim", "gt_space", "box_lo", "box_hi", "gt_marginal", "cond_cap", "mixing_layers",
        "mixing_out_dim", "mixing_bias_scale", "eval_size", "correlation",
    ]
    if task.model_type == ModelType.SUPERVISED:
        fields += [
            "iterations", "batch_size", "lr", "beta1", "beta2", "adam_eps", "eval_every",
            "encoder_hidden", "encoder_slope",
        ]
    payload = config.model_dump(mode="json", include=set(fields))
    return json.dumps([task.model_type.value, task.seed, payload], sort_keys=True)


def _summary_rows(records: Sequence[RunRecord]) -> list[dict[str, Any]]:
    """Lignes moyenne / ecart-type par (ligne de grille, type de modele)."""
    frame = pd.DataFrame([r.model_dump() for r in records], columns=RUN_COLUMNS)
    ok = frame[frame["status"] == "ok"]
    rows = []
    for (preset, row, model_type), group in ok.groupby(["preset", "row", "model_type"], sort=False):
        first = group.iloc[0]
        metrics = group[METRIC_COLUMNS].astype(float)
        for stat, values in (("mean", metrics.mean()), ("std", metrics.std(ddof=1))):
            summary = {column: first[column] for column in RUN_COLUMNS if column not in METRIC_COLUMNS}
            summary.update(values.to_dict())
            summary.update(run_id=f"{preset}-{row}-{stat}-{model_type}", seed=stat, status="ok", message="")
            rows.append(summary)
    return rows


def run_grid(grid: GridSpec, workers: int = 1) -> pd.DataFrame:
    """
    Execute toutes les taches d'une grille.

    Les modeles de reference partageant la meme verite terrain ne sont
    calcules qu'une fois. L'ordre des lignes suit la grille, quel que soit le
    nombre de processus.

    Args:
        grid: Grille de lignes
        workers: Nombre de processus

    Returns:
        DataFrame au schema RUN_COLUMNS, suivi des lignes de resume
    """
    tasks = expand_tasks(grid)
    unique: dict[str, int] = {}
    to_run: list[RunTask] = []
    slots: list[int] = []
    for task in tasks:
        key = _baseline_key(task) or task.run_id
        if key not in unique:
            unique[key] = len(to_run)
            to_run.append(task)
        slots.append(unique[key])
    logger.info("grille %s: %d taches (%d distinctes), %d processus", grid.name, len(tasks), len(to_run), workers)

    if workers > 1 and len(to_run) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            computed = list(pool.map(execute_task, to_run))
    else:
        computed = [execute_task(task) for task in to_run]

    records = []
    for task, slot in zip(tasks, slots):
        source = computed[slot]
        if to_run[slot] is task:
            records.append(source)
        else:
            records.append(source.model_copy(update=_record_meta(task)))

    rows = [r.model_dump() for r in records] + _summary_rows(records)
    return pd.DataFrame(rows, columns=RUN_COLUMNS)


# Balayage de concentration ----------------------------------------------------

def sweep_marginal(space: SpaceKind, concentration: float) -> MarginalSpec:
    """
    Marginale d'un point du balayage; 0 donne l'uniforme.

    Sphere: vMF au pole de concentration kappa. Boite: normale centree
    d'ecart-type 1 / sqrt(concentration).
    """
    if concentration < 0:
        raise ConfigError(f"concentration must be >= 0, got {concentration}")
    if concentration == 0:
        return MarginalSpec(family=MarginalFamily.UNIFORM)
    if space == SpaceKind.SPHERE:
        return MarginalSpec(family=MarginalFamily.VMF_POLE, kappa=concentration)
    if space == SpaceKind.BOX:
        return MarginalSpec(family=MarginalFamily.CENTERED_NORMAL, sigma=1.0 / math.sqrt(concentration))
    raise ConfigError("the concentration sweep needs a sphere or box space")


def conditional_concentration(config: RunConfig) -> float:
    conditional = config.gt_conditional
    if conditional.family == ConditionalFamily.VMF:
        return float(conditional.kappa)
    return 1.0 / float(conditional.scale_param) ** 2


def sweep_grid(base: RunConfig, space: SpaceKind, concentrations: Sequence[float]) -> GridSpec:
    """Une ligne de grille (modele non supervise seul) par concentration."""
    if base.gt_space != space:
        raise ConfigError(f"sweep base row lives on {base.gt_space.value}, not {space.value}")
    reference = conditional_concentration(base)
    if not (min(concentrations) < reference < max(concentrations)):
        raise ConfigError(
            f"concentrations must bracket the conditional concentration {format_number(reference)}"
        )
    rows = [
        base.model_copy(update=dict(
            row=f"c{format_number(c)}",
            gt_marginal=sweep_marginal(space, c),
            baseline_identity=False,
            baseline_supervised=False,
        ))
        for c in concentrations
    ]
    return GridSpec(name=base.preset, rows=rows)


def run_fig2_sweep(
    space: SpaceKind,
    concentrations: Sequence[float],
    base: RunConfig,
    workers: int = 1,
) -> tuple[pd.DataFrame, pd.DataFrame]:
    """
    Masse deplacee et R2 en fonction de la concentration de la marginale.

    Args:
        space: Sphere ou boite
        concentrations: Concentrations de la marginale (0: uniforme)
        base: Ligne de reference (conditionnelle, modele, hyperparametres)
        workers: Nombre de processus

    Returns:
        (tableau du balayage, CSV detaille des executions)
    """
    grid = sweep_grid(base, space, concentrations)
    runs = run_grid(grid, workers)
    latent_space = LatentSpace.from_spec(base.train_config(ModelType.UNSUPERVISED, base.seed).space)
    per_seed = runs[(runs["status"] == "ok") & ~runs["seed"].isin(["mean", "std"])]

    rows = []
    for concentration, row in zip(concentrations, grid.rows):
        moved = marginal_moved_mass(row.gt_marginal, latent_space, named_stream(base.seed, MOVED_MASS_STREAM))
        scores = per_seed.loc[per_seed["row"] == row.row, "r2_holdout"].astype(float)
        rows.append(dict(
            concentration=float(concentration),
            moved_mass=moved.value,
            r2_mean=float(scores.mean()) if len(scores) else math.nan,
            r2_std=float(scores.std(ddof=1)) if len(scores) > 1 else math.nan,
            moved_mass_stderr=moved.stderr,
            n_ok=int(len(scores)),
        ))
        logger.info("concentration %s: masse deplacee %.4f, R2 %.4f",
                    format_number(concentration), moved.value, rows[-1]["r2_mean"])
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS), runs


def apply_overrides(grid: GridSpec, seed: Optional[int] = None, replicates: Optional[int] = None,
                    paper_scale: bool = False) -> GridSpec:
    """Applique les options de ligne de commande a chaque ligne."""
    rows = []
    for row in grid.rows:
        update: dict[str, Any] = {}
        if seed is not None:
            update["seed"] = seed
        if replicates is not None:
            update["replicates"] = replicates
        row = row.model_copy(update=update)
        rows.append(row.with_paper_scale() if paper_scale else row)
    return grid.model_copy(update={"rows": rows})


def comparable(frame: pd.DataFrame) -> pd.DataFrame:
    """CSV sans la colonne de temps mur, trie par run_id, pour comparer deux executions."""
    return frame.drop(columns=["wall_seconds"]).sort_values("run_id").reset_index(drop=True)
