import math

import numpy as np
import pandas as pd
import pytest
from pandas.testing import assert_frame_equal

from src.schemas.config import GridSpec, MarginalFamily, ModelType, RunConfig, SpaceKind
from src.schemas.results import RUN_COLUMNS
from src.services.experiment_service import (
    SWEEP_COLUMNS,
    RunTask,
    apply_overrides,
    comparable,
    execute_task,
    expand_tasks,
    model_types,
    run_fig2_sweep,
    run_grid,
    run_single,
    sweep_grid,
    sweep_marginal,
)
from src.utils.errors import ConfigError


def _variant(config: RunConfig, **changes) -> RunConfig:
    return RunConfig(**{**config.model_dump(), **changes})


def _per_seed(frame: pd.DataFrame) -> pd.DataFrame:
    return frame[~frame["seed"].isin(["mean", "std"])]


def test_expand_tasks_order(tiny_config):
    tasks = expand_tasks(GridSpec(name="tiny", rows=[tiny_config]))
    assert [(t.seed, t.model_type.value) for t in tasks] == [
        (0, "identity"), (0, "supervised"), (0, "unsupervised"),
        (1, "identity"), (1, "supervised"), (1, "unsupervised"),
    ]
    assert tasks[0].run_id == "tiny-r01-s0-identity"


def test_model_types_follow_baseline_flags(tiny_config):
    config = _variant(tiny_config, baseline_identity=False, baseline_supervised=False)
    assert model_types(config) == [ModelType.UNSUPERVISED]


def test_run_grid_rows_and_summaries(tiny_config):
    frame = run_grid(GridSpec(name="tiny", rows=[tiny_config]))
    assert list(frame.columns) == RUN_COLUMNS
    assert len(frame) == 6 + 6
    assert (frame["status"] == "ok").all()

    runs = _per_seed(frame)
    identity = runs[runs["model_type"] == "identity"]
    assert (identity["head"] == "-").all() and (identity["conditional_model"] == "-").all()
    supervised = runs[runs["model_type"] == "supervised"]
    assert (supervised["head"] == "unbounded").all() and (supervised["conditional_model"] == "mse").all()
    unsupervised = runs[runs["model_type"] == "unsupervised"]
    assert (unsupervised["conditional_model"] == "vmf(kappa=1)").all()
    assert unsupervised["matched_flag"].all()
    assert unsupervised["isometry_residual"].notna().all()

    summary = frame[frame["seed"] == "mean"]
    assert sorted(summary["model_type"]) == ["identity", "supervised", "unsupervised"]
    mean_r2 = summary.loc[summary["model_type"] == "unsupervised", "r2_holdout"].iloc[0]
    assert mean_r2 == pytest.approx(unsupervised["r2_holdout"].astype(float).mean())
    assert frame.loc[frame["seed"] == "std", "run_id"].str.endswith("-std-identity").any()


def test_baselines_are_shared_between_rows(tiny_config):
    other = _variant(tiny_config, row="r02", gt_conditional="vmf(kappa=2)")
    frame = _per_seed(run_grid(GridSpec(name="tiny", rows=[tiny_config, other])))
    for model in ("identity", "supervised"):
        first = frame[(frame["row"] == "r01") & (frame["model_type"] == model)]
        second = frame[(frame["row"] == "r02") & (frame["model_type"] == model)]
        assert first["r2_holdout"].tolist() == second["r2_holdout"].tolist()
        assert second["run_id"].str.startswith("tiny-r02-").all()
        assert second["conditional_gt"].eq("vmf(kappa=2)").all()
    first = frame[(frame["row"] == "r01") & (frame["model_type"] == "unsupervised")]
    second = frame[(frame["row"] == "r02") & (frame["model_type"] == "unsupervised")]
    assert first["loss_final"].tolist() != second["loss_final"].tolist()


def test_failing_row_does_not_abort_the_grid(tiny_config):
    broken = _variant(tiny_config, row="r02", eval_size=4)
    frame = run_grid(GridSpec(name="tiny", rows=[tiny_config, broken]))
    runs = _per_seed(frame)
    failed = runs[runs["row"] == "r02"]
    assert len(failed) == 6
    assert (failed["status"] == "error").all()
    assert failed["message"].str.contains("too few samples").all()
    assert (runs.loc[runs["row"] == "r01", "status"] == "ok").all()
    assert set(frame.loc[frame["seed"] == "mean", "row"]) == {"r01"}


def test_worker_count_does_not_change_results(tiny_config):
    config = _variant(tiny_config, baseline_supervised=False)
    grid = GridSpec(name="tiny", rows=[config])
    assert_frame_equal(comparable(run_grid(grid, workers=1)), comparable(run_grid(grid, workers=2)))


def test_empty_grid_yields_header_only():
    frame = run_grid(GridSpec(name="empty"))
    assert list(frame.columns) == RUN_COLUMNS
    assert frame.empty


def test_run_single(tiny_config):
    outputs = run_single(tiny_config, seed=5)
    assert list(outputs) == [ModelType.IDENTITY, ModelType.SUPERVISED, ModelType.UNSUPERVISED]
    assert outputs[ModelType.IDENTITY].result is None
    assert outputs[ModelType.UNSUPERVISED].record.seed == 5
    assert len(outputs[ModelType.UNSUPERVISED].report.r2_per_dim) == 3


def test_execute_task_reports_errors(tiny_config):
    broken = _variant(tiny_config, eval_size=4)
    record = execute_task(RunTask(broken, 0, ModelType.UNSUPERVISED))
    assert record.status == "error"
    assert record.r2_holdout is None
    assert "\n" not in record.message


def test_sweep_marginal():
    assert sweep_marginal(SpaceKind.SPHERE, 0.0).family == MarginalFamily.UNIFORM
    vmf = sweep_marginal(SpaceKind.SPHERE, 10.0)
    assert vmf.family == MarginalFamily.VMF_POLE and vmf.kappa == 10.0
    normal = sweep_marginal(SpaceKind.BOX, 4.0)
    assert normal.family == MarginalFamily.CENTERED_NORMAL and normal.sigma == pytest.approx(0.5)
    with pytest.raises(ConfigError):
        sweep_marginal(SpaceKind.SPHERE, -1.0)
    with pytest.raises(ConfigError):
        sweep_marginal(SpaceKind.UNBOUNDED, 1.0)


def test_sweep_grid_rows(tiny_config):
    grid = sweep_grid(tiny_config, SpaceKind.SPHERE, [0.0, 2.5, 10.0])
    assert [r.row for r in grid.rows] == ["c0", "c2.5", "c10"]
    assert all(not r.baseline_identity and not r.baseline_supervised for r in grid.rows)
    assert str(grid.rows[1].gt_marginal) == "vmf_pole(kappa=2.5)"


def test_sweep_grid_errors(tiny_config):
    with pytest.raises(ConfigError, match="bracket"):
        sweep_grid(tiny_config, SpaceKind.SPHERE, [2.0, 5.0])
    with pytest.raises(ConfigError):
        sweep_grid(tiny_config, SpaceKind.BOX, [0.0, 10.0])


def test_fig2_sweep_on_tiny_rows(tiny_config):
    table, runs = run_fig2_sweep(SpaceKind.SPHERE, [0.0, 0.5, 4.0], tiny_config)
    assert list(table.columns) == SWEEP_COLUMNS
    assert table["concentration"].tolist() == [0.0, 0.5, 4.0]
    assert table["moved_mass"].iloc[0] == 0.0
    assert np.all(np.diff(table["moved_mass"]) > 0)
    assert table["n_ok"].tolist() == [2, 2, 2]
    assert set(_per_seed(runs)["model_type"]) == {"unsupervised"}
    assert not math.isnan(table["r2_mean"].iloc[0])


def test_apply_overrides(tiny_config):
    grid = GridSpec(name="tiny", rows=[tiny_config])
    changed = apply_overrides(grid, seed=9, replicates=1, paper_scale=True)
    row = changed.rows[0]
    assert (row.seed, row.replicates, row.iterations, row.batch_size) == (9, 1, 300_000, 6144)
    assert grid.rows[0].seed == 0


def test_repeated_grid_is_identical(tiny_config):
    grid = GridSpec(name="tiny", rows=[_variant(tiny_config, replicates=1)])
    assert_frame_equal(comparable(run_grid(grid)), comparable(run_grid(grid)))
