"""
Service de configuration.
Lit et ecrit les RunConfig en TOML plat et charge les grilles (presets).
"""

import tomllib
from functools import lru_cache
from pathlib import Path
from typing import Any, Optional, Union

import tomli_w
from pydantic import ValidationError

from src.schemas.config import GridSpec, RunConfig, SweepSpec
from src.settings import get_settings
from src.utils.errors import ConfigError

PRESETS = ("table1", "table2", "fig2_sphere", "fig2_box")


def _read_toml(path: Path) -> dict[str, Any]:
    try:
        with path.open("rb") as handle:
            return tomllib.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML in {path}: {exc}") from exc


def parse_run_config(data: dict[str, Any]) -> RunConfig:
    """Valide un dictionnaire plat; les erreurs pydantic deviennent des ConfigError."""
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def run_config_to_dict(config: RunConfig) -> dict[str, Any]:
    return config.model_dump(mode="json", exclude_none=True)


def dump_run_config(config: RunConfig) -> str:
    """Serialise une configuration en TOML plat (les lois en libelles compacts)."""
    return tomli_w.dumps(run_config_to_dict(config))


def loads_run_config(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML: {exc}") from exc
    return parse_run_config(data)


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Charge une configuration unique depuis un fichier TOML plat."""
    return parse_run_config(_read_toml(Path(path)))


def save_run_config(config: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_run_config(config), encoding="utf-8")
    return path


def parse_grid(data: dict[str, Any], name: Optional[str] = None) -> GridSpec:
    """
    Construit une grille a partir d'un document TOML.

    La table [defaults] est fusionnee sous chaque [[rows]]; [sweep] est
    optionnelle.

    Args:
        data: Document TOML decode
        name: Nom de la grille (sinon cle `name`, sinon "custom")

    Returns:
        GridSpec
    """
    unknown = set(data) - {"name", "defaults", "rows", "sweep"}
    if unknown:
        raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
    grid_name = name or data.get("name", "custom")
    defaults = data.get("defaults", {})
    rows = []
    for index, row in enumerate(data.get("rows", [])):
        merged = {"preset": grid_name, "row": f"r{index + 1:02d}", **defaults, **row}
        rows.append(parse_run_config(merged))
    seen: set[str] = set()
    for row in rows:
        if row.row in seen:
            raise ConfigError(f"duplicate row name {row.row!r} in grid {grid_name!r}")
        seen.add(row.row)
    try:
        sweep = SweepSpec.model_validate(data["sweep"]) if "sweep" in data else None
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    return GridSpec(name=grid_name, rows=rows, sweep=sweep)


def load_grid(path: Union[str, Path]) -> GridSpec:
    """Charge une grille depuis un fichier TOML."""
    path = Path(path)
    data = _read_toml(path)
    return parse_grid(data, data.get("name", path.stem))


@lru_cache(maxsize=None)
def get_preset(name: str) -> GridSpec:
    """
    Retourne une grille predefinie (table1, table2, fig2_sphere, fig2_box).

    Raises:
        ConfigError: preset inconnu
    """
    path = Path(get_settings().presets_dir) / f"{name}.toml"
    if name not in PRESETS and not path.exists():
        raise ConfigError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}")
    return parse_grid(_read_toml(path), name)


def resolve_grid(target: str) -> GridSpec:
    """Un nom de preset, ou un chemin vers un fichier de grille."""
    if target in PRESETS:
        return get_preset(target)
    path = Path(target)
    if path.suffix == ".toml" or path.exists():
        return load_grid(path)
    raise ConfigError(f"unknown preset or grid file {target!r}")
