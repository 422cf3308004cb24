import pandas as pd
import pytest

from src.commands.bench import EXIT_CONFIG, EXIT_OK, build_parser, parse_args
from src.main import main
from src.services.config_service import dump_run_config, save_run_config
from src.services.network_service import load_checkpoint
from src.services.selftest_service import run_selftest


def test_parser_commands():
    args = parse_args(["grid", "table1", "--replicates", "2", "--workers", "3", "--paper-scale"])
    assert (args.command, args.target, args.replicates, args.workers, args.paper_scale) == (
        "grid", "table1", 2, 3, True)
    args = parse_args(["format", "runs.csv", "--metric", "mcc"])
    assert args.metric == "mcc"
    assert parse_args(["selftest"]).seed == 0


def test_parser_rejects_unknown_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train"])


def test_missing_config_is_a_config_error(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.toml")]) == EXIT_CONFIG
    assert "Erreur de configuration" in capsys.readouterr().out


def test_invalid_config_is_a_config_error(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text('gt_space = "sphere"\n')
    assert main(["run", str(path)]) == EXIT_CONFIG


def test_sweep_needs_a_sweep_table():
    assert main(["sweep", "table1"]) == EXIT_CONFIG


def test_run_command_writes_outputs(tiny_config, tmp_path, capsys):
    config_path = save_run_config(tiny_config, tmp_path / "tiny.toml")
    out = tmp_path / "out"
    assert main(["run", str(config_path), "--out", str(out), "--seed", "1"]) == EXIT_OK
    target = out / "tiny-r01-s1"
    for name in ("config.toml", "runs.csv", "history_supervised.csv", "history_unsupervised.csv",
                 "encoder_unsupervised.ckpt", "mixing.ckpt"):
        assert (target / name).exists()
    assert not (target / "history_identity.csv").exists()
    runs = pd.read_csv(target / "runs.csv")
    assert runs["model_type"].tolist() == ["identity", "supervised", "unsupervised"]
    assert (target / "config.toml").read_text() == dump_run_config(tiny_config)
    mixing = load_checkpoint(target / "mixing.ckpt")
    assert mixing.dim == 3
    assert "unsupervised: R2=" in capsys.readouterr().out


def test_grid_then_format(tiny_config, tmp_path, capsys):
    grid_path = tmp_path / "small.toml"
    row = dump_run_config(tiny_config.model_copy(update={"replicates": 1, "baseline_supervised": False}))
    grid_path.write_text("[[rows]]\n" + row)
    out = tmp_path / "out"
    assert main(["grid", str(grid_path), "--out", str(out)]) == EXIT_OK
    csv_path = out / "small.csv"
    assert csv_path.exists()
    printed = capsys.readouterr().out
    assert "Score: R2 (%)" in printed

    assert main(["format", str(csv_path), "--metric", "mcc"]) == EXIT_OK
    assert "Score: MCC (%)" in capsys.readouterr().out


def test_selftest_passes():
    checks = run_selftest()
    failed = [c.name for c in checks if not c.passed]
    assert failed == []
    assert main(["selftest"]) == EXIT_OK
