#!/usr/bin/env python3
"""
Calibration des bandes empiriques des residus de structure.
Entraine les lignes appariees (sphere et boite Laplace) a l'echelle de bureau
et affiche les residus observes avec la bande proposee.
Usage: uv run python scripts/calibrate_bands.py [--workers 8] [--margin 1.5] [--write]
"""

import argparse
import sys
import tomllib
from pathlib import Path

import tomli_w

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.schemas.config import GridSpec  # noqa: E402
from src.services.config_service import get_preset  # noqa: E402
from src.services.experiment_service import run_grid  # noqa: E402

BANDS_FILE = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "acceptance_bands.toml"

# (preset, ligne, colonne du CSV, section du fichier de bandes, cle de la bande)
TARGETS = [
    ("table1", "r01", "ortho_residual", "matched_sphere", "orthogonality_residual"),
    ("table2", "r01", "perm_residual", "matched_box", "permutation_residual"),
]


def calibrate(workers: int, margin: float) -> dict[tuple[str, str], list[float]]:
    observed = {}
    for preset, name, column, section, key in TARGETS:
        row = next(r for r in get_preset(preset).rows if r.row == name)
        row = row.model_copy(update={"baseline_identity": False, "baseline_supervised": False})
        print(f"{preset}/{name}: {row.replicates} graines...")
        frame = run_grid(GridSpec(name=preset, rows=[row]), workers)
        runs = frame[~frame["seed"].isin(["mean", "std"]) & (frame["status"] == "ok")]
        if runs.empty:
            print("  aucune execution reussie")
            continue
        values = [float(v) for v in runs[column]]
        print(f"  {column}: " + ", ".join(f"{v:.4f}" for v in values))
        print(f"  bande proposee: < {max(values) * margin:.3f}")
        observed[(section, key)] = values
    return observed


def write_bands(observed: dict[tuple[str, str], list[float]], margin: float) -> None:
    """Reporte la bande (max observe x marge) et les valeurs observees dans le fichier de bandes."""
    bands = tomllib.loads(BANDS_FILE.read_text())
    for (section, key), values in observed.items():
        bands[section][f"{key}_max"] = round(max(values) * margin, 3)
        bands[section][f"{key}_observed"] = [round(v, 4) for v in values]
        bands[section][f"{key}_margin"] = margin
    BANDS_FILE.write_text(tomli_w.dumps(bands))
    print(f"bandes ecrites dans {BANDS_FILE}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--margin", type=float, default=1.5, help="Facteur applique au maximum observe")
    parser.add_argument("--write", action="store_true", help="Ecrit les bandes dans tests/fixtures/acceptance_bands.toml")
    args = parser.parse_args()
    observed = calibrate(args.workers, args.margin)
    if args.write and observed:
        write_bands(observed, args.margin)


if __name__ == "__main__":
    main()
