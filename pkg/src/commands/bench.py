"""
Commandes du banc d'essai.
"""

import argparse
import logging
from pathlib import Path
from typing import Optional

import pandas as pd
from pydantic import ValidationError

from src.schemas.config import PAPER_SCALE, ModelType, RunConfig
from src.services.config_service import load_run_config, resolve_grid, save_run_config
from src.services.experiment_service import apply_overrides, run_fig2_sweep, run_grid, run_single
from src.services.network_service import save_checkpoint
from src.services.report_service import format_table, read_runs_csv, write_csv
from src.services.selftest_service import run_selftest
from src.services.training_service import write_history_csv
from src.settings import get_settings
from src.utils.errors import ConfigError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _out_dir(args: argparse.Namespace) -> Path:
    return Path(args.out or get_settings().out_dir)


def _workers(args: argparse.Namespace) -> int:
    return args.workers or get_settings().workers


def _warn_paper_scale(args: argparse.Namespace) -> None:
    if args.paper_scale:
        print(
            f"Attention: echelle complete ({PAPER_SCALE['iterations']} iterations, "
            f"batch {PAPER_SCALE['batch_size']}); comptez plusieurs heures par execution."
        )


def run_command(args: argparse.Namespace) -> int:
    """Une configuration, une graine: entraine chaque type de modele."""
    config: RunConfig = load_run_config(args.config)
    if args.paper_scale:
        config = config.with_paper_scale()
    _warn_paper_scale(args)
    seed = config.seed if args.seed is None else args.seed

    outputs = run_single(config, seed)
    target = _out_dir(args) / f"{config.preset}-{config.row}-s{seed}"
    save_run_config(config, target / "config.toml")
    records = [output.record.model_dump() for output in outputs.values()]
    write_csv(pd.DataFrame(records), target / "runs.csv")

    for model_type, output in outputs.items():
        report = output.report
        print(f"{model_type.value:>12}: R2={report.r2_mean * 100:.2f}%  MCC={report.mcc * 100:.2f}%")
        if output.result is not None:
            write_history_csv(output.result.history, target / f"history_{model_type.value}.csv")
            save_checkpoint(target / f"encoder_{model_type.value}.ckpt", output.result.encoder)
            if model_type == ModelType.UNSUPERVISED:
                save_checkpoint(target / "mixing.ckpt", output.result.ground_truth.mixing)
    print(f"Resultats ecrits dans {target}")
    return EXIT_OK


def grid_command(args: argparse.Namespace) -> int:
    """Grille complete (preset ou fichier) -> CSV + tableau."""
    grid = apply_overrides(resolve_grid(args.target), args.seed, args.replicates, args.paper_scale)
    _warn_paper_scale(args)
    frame = run_grid(grid, _workers(args))
    path = write_csv(frame, _out_dir(args) / f"{grid.name}.csv")
    print(format_table(frame))
    failures = int((frame["status"] == "error").sum())
    if failures:
        print(f"{failures} execution(s) en erreur, voir la colonne message")
    print(f"CSV ecrit: {path}")
    return EXIT_OK


def sweep_command(args: argparse.Namespace) -> int:
    """Balayage de la concentration de la marginale."""
    grid = apply_overrides(resolve_grid(args.target), args.seed, args.replicates, args.paper_scale)
    if grid.sweep is None or not grid.rows:
        raise ConfigError(f"grid {grid.name!r} has no [sweep] table or no base row")
    _warn_paper_scale(args)
    sweep, runs = run_fig2_sweep(grid.sweep.space, grid.sweep.concentrations, grid.rows[0], _workers(args))
    out = _out_dir(args)
    write_csv(runs, out / f"{grid.name}_runs.csv")
    path = write_csv(sweep, out / f"{grid.name}.csv")
    print(sweep.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    print(f"CSV ecrit: {path}")
    return EXIT_OK


def format_command(args: argparse.Namespace) -> int:
    print(format_table(read_runs_csv(args.csv), args.metric or ""))
    return EXIT_OK


def selftest_command(args: argparse.Namespace) -> int:
    checks = run_selftest(args.seed or 0)
    for check in checks:
        print(f"[{'ok' if check.passed else 'ECHEC'}] {check.name}: {check.detail}")
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} verifications reussies")
    return EXIT_RUNTIME if failed else EXIT_OK


def _add_common(parser: argparse.ArgumentParser, grid: bool = False) -> None:
    parser.add_argument("--seed", type=int, default=None, help="Graine de base")
    parser.add_argument("--paper-scale", action="store_true", help="300000 iterations, batch 6144")
    parser.add_argument("--out", default=None, help="Repertoire de sortie")
    if grid:
        parser.add_argument("--replicates", type=int, default=None, help="Nombre de graines par ligne")
        parser.add_argument("--workers", type=int, default=None, help="Nombre de processus")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="demixbench",
        description="Banc d'essai d'identifiabilite par apprentissage contrastif",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Journalisation DEBUG")
    verbs = parser.add_subparsers(dest="command", required=True)

    run = verbs.add_parser("run", help="Une configuration TOML")
    run.add_argument("config")
    _add_common(run)
    run.set_defaults(handler=run_command)

    grid = verbs.add_parser("grid", help="Preset (table1, table2) ou fichier de grille")
    grid.add_argument("target")
    _add_common(grid, grid=True)
    grid.set_defaults(handler=grid_command)

    sweep = verbs.add_parser("sweep", help="Balayage fig2_sphere / fig2_box")
    sweep.add_argument("target")
    _add_common(sweep, grid=True)
    sweep.set_defaults(handler=sweep_command)

    fmt = verbs.add_parser("format", help="CSV de grille -> tableau texte")
    fmt.add_argument("csv")
    fmt.add_argument("--metric", default=None, help="Colonne de score (r2_holdout, mcc, ...)")
    fmt.set_defaults(handler=format_command)

    selftest = verbs.add_parser("selftest", help="Verifications rapides par oracle")
    selftest.add_argument("--seed", type=int, default=0)
    selftest.set_defaults(handler=selftest_command)
    return parser


def dispatch(args: argparse.Namespace) -> int:
    """Execute la commande et traduit les erreurs en codes de sortie."""
    try:
        return args.handler(args)
    except (ConfigError, ValidationError) as exc:
        print(f"Erreur de configuration: {exc}")
        return EXIT_CONFIG
    except Exception as exc:
        logger.exception("echec de la commande %s", args.command)
        print(f"Erreur: {exc}")
        return EXIT_RUNTIME


def parse_args(argv: Optional[list[str]] = None) -> argparse.Namespace:
    return build_parser().parse_args(argv)
