"""
Service des rapports.
Ecrit et relit les CSV de grille et les met en forme en tableau texte.
"""

import math
from pathlib import Path
from typing import Union

import pandas as pd

from src.schemas.results import RUN_COLUMNS
from src.utils.errors import ConfigError

FLOAT_FORMAT = "%.10g"
MODEL_COLUMNS = [("identity", "Identite"), ("supervised", "Supervise"), ("unsupervised", "Non supervise")]
LAYOUT_COLUMNS = ["space_gt", "marginal", "conditional_gt", "head", "conditional_model"]
LAYOUT_HEADERS = ["Espace", "p(z)", "p(z~|z)", "Modele", "q_h(z~|z)"]
REQUIRED_COLUMNS = RUN_COLUMNS[:RUN_COLUMNS.index("status") + 1]


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def read_runs_csv(path: Union[str, Path]) -> pd.DataFrame:
    """
    Relit un CSV de grille.

    Raises:
        ConfigError: fichier absent, illisible ou colonnes manquantes
    """
    try:
        frame = pd.read_csv(path, dtype={"seed": str, "note": str, "message": str}, keep_default_na=True)
    except FileNotFoundError as exc:
        raise ConfigError(f"CSV file not found: {path}") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ConfigError(f"malformed CSV {path}: {exc}") from exc
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise ConfigError(f"malformed CSV {path}: missing columns {missing}")
    return frame


def table_metric(frame: pd.DataFrame) -> str:
    """MCC pour la grille des permutations generalisees, R2 sinon."""
    presets = set(frame["preset"].dropna().astype(str))
    return "mcc" if presets == {"table2"} else "r2_holdout"


def format_cell(values: pd.Series) -> str:
    """Moyenne +/- ecart-type en pourcentage; sans +/- pour une seule valeur."""
    values = values.dropna().astype(float) * 100
    if values.empty:
        return "-"
    if len(values) == 1:
        return f"{values.iloc[0]:.2f}"
    std = values.std(ddof=1)
    return f"{values.mean():.2f} +/- {std:.2f}" if math.isfinite(std) else f"{values.mean():.2f}"


def format_table(frame: pd.DataFrame, metric: str = "") -> str:
    """
    Rend un CSV de grille en tableau texte aligne.

    Une ligne par ligne de grille (ordre d'apparition), groupees par bloc;
    une colonne de score par type de modele. Les lignes de resume et en
    erreur sont ignorees.

    Args:
        frame: CSV de grille
        metric: Colonne de score (par defaut selon le preset)

    Returns:
        Tableau texte
    """
    missing = [c for c in ["preset", "row", "seed", "model_type", "status", *LAYOUT_COLUMNS] if c not in frame.columns]
    if missing:
        raise ConfigError(f"malformed CSV: missing columns {missing}")
    metric = metric or table_metric(frame)
    if metric not in frame.columns:
        raise ConfigError(f"malformed CSV: missing metric column {metric!r}")

    seeds = frame["seed"].astype(str)
    runs = frame[(frame["status"] == "ok") & ~seeds.isin(["mean", "std"])]
    if "block" not in runs.columns:
        runs = runs.assign(block=0)

    lines, blocks = [], []
    for (preset, row), group in runs.groupby(["preset", "row"], sort=False):
        contrastive = group[group["model_type"] == "unsupervised"]
        layout = (contrastive if not contrastive.empty else group).iloc[0]
        line = {header: str(layout[column]) for column, header in zip(LAYOUT_COLUMNS, LAYOUT_HEADERS)}
        for model_type, header in MODEL_COLUMNS:
            line[header] = format_cell(group.loc[group["model_type"] == model_type, metric])
        lines.append(line)
        blocks.append(layout["block"])

    headers = LAYOUT_HEADERS + [header for _, header in MODEL_COLUMNS]
    if not lines:
        return "  ".join(headers)
    text = pd.DataFrame(lines, columns=headers).to_string(index=False, justify="left").splitlines()
    rendered = [text[0]]
    for index, body in enumerate(text[1:]):
        if index and blocks[index] != blocks[index - 1]:
            rendered.append("")
        rendered.append(body)
    label = "MCC" if metric == "mcc" else "R2" if metric.startswith("r2") else metric
    return f"Score: {label} (%)\n" + "\n".join(rendered)
