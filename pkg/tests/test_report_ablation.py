import numpy as np
import pytest

from ccb.ablation import DEFAULT_GRID, grid_from_names, run_ablation
from ccb.dataset import ShiftSpec
from ccb.errors import ValidationError
from ccb.report import AblationLine, ResultRow, render_ablation, render_results
from ccb.training import TrainConfig

RESULT_FIXTURE = ResultRow("+CCB", 57.99, 86.41, 45.63, 48.76, 60.73, 2.74)
ABLATION_FIXTURE = [
    AblationLine("+None", None, None, 39.68),
    AblationLine("+LMH", None, None, 52.05),
    AblationLine("+CCB", 0.0, False, 55.06),
    AblationLine("+CCB", 1.0, False, 55.70),
    AblationLine("+CCB", 0.0, True, 56.76),
    AblationLine("+CCB", 1.0, True, 57.99),
    AblationLine("+CCB", 0.5, True, 57.39),
    AblationLine("+CCB", 2.0, True, 57.56),
]

EXPECTED_RESULTS = (
    "Model | Overall | Yes/No | Number | Other | IID Overall | Gap\n"
    "------+---------+--------+--------+-------+-------------+-----\n"
    "+CCB  | 57.99   | 86.41  | 45.63  | 48.76 | 60.73       | 2.74\n"
)

EXPECTED_ABLATION = (
    "Model | (1-bias)^r | context label | Accuracy\n"
    "------+------------+---------------+---------\n"
    "+None | -          | -             | 39.68\n"
    "+LMH  | -          | -             | 52.05\n"
    "+CCB  | r=0        | w/o           | 55.06\n"
    "+CCB  | r=1        | w/o           | 55.70\n"
    "+CCB  | r=0        | w             | 56.76\n"
    "+CCB  | r=1        | w             | 57.99\n"
    "+CCB  | r=0.5      | w             | 57.39\n"
    "+CCB  | r=2        | w             | 57.56\n"
)


def test_result_table_fixture():
    assert render_results([RESULT_FIXTURE]) == EXPECTED_RESULTS


def test_ablation_table_fixture():
    assert render_ablation(ABLATION_FIXTURE) == EXPECTED_ABLATION


def test_missing_columns_render_as_dash():
    text = render_results([ResultRow("+LMH", 52.05)])
    assert text.splitlines()[2].split(" | ")[1:] == ["52.05  ", "-     ", "-     ", "-    ", "-          ", "-"]


def test_std_column_only_with_seeds():
    text = render_ablation([AblationLine("+CCB", 1.0, True, 57.99, 0.4)])
    assert text.splitlines()[0].endswith("Std") and text.splitlines()[2].endswith("0.40")


def test_default_grid_has_ten_rows():
    assert len(DEFAULT_GRID) == 10
    ccb = {(c.r, c.context_label) for c in DEFAULT_GRID if c.loss_mode == "ccb"}
    assert ccb == {(r, w) for r in (0.0, 0.5, 1.0, 2.0) for w in (True, False)}
    assert {c.loss_mode for c in DEFAULT_GRID} == {"ccb", "ml_baseline", "lmh_baseline"}
    with pytest.raises(ValidationError):
        grid_from_names(["r3_w"])


def test_small_ablation_runs_every_cell():
    spec = ShiftSpec(n_train=120, n_test=40, seed=0)
    res = run_ablation(TrainConfig(epochs=1, d_q=6, d_m=8), DEFAULT_GRID, seeds=(0, 1), spec=spec, n_val=40)
    assert [c.cell.name for c in res.cells] == [c.name for c in DEFAULT_GRID]
    for c in res.cells:
        assert len(c.test) == 2 and all(0 <= v <= 100 for v in c.test + c.iid)
    lines = res.render().splitlines()
    assert len(lines) == 2 + len(DEFAULT_GRID) and lines[0].endswith("Std")
    again = run_ablation(TrainConfig(epochs=1, d_q=6, d_m=8), DEFAULT_GRID[:2], seeds=(1,), spec=spec, n_val=40)
    assert again.cells[0].test == [res.cells[0].test[1]]
