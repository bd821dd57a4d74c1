import pytest

from splitwing.data import SplitRatio, synthetic_dataset
from splitwing.errors import ValidationError
from splitwing.grid import DEFAULT_CELLS, REFERENCE_ACCURACY, GridSpec, run_grid
from splitwing.orchestrator import RunConfig


def test_default_cells():
    assert [(n, str(r)) for n, r in DEFAULT_CELLS] == [
        (3, "1:1:1"), (3, "7:2:1"), (3, "8:1:1"),
        (4, "1:1:1:1"), (4, "4:3:2:1"), (4, "7:1:1:1"),
        (5, "1:1:1:1:1"), (5, "4:2:2:1:1"), (5, "6:1:1:1:1"),
    ]
    assert GridSpec().repeats == 3


def test_reference_accuracies():
    assert REFERENCE_ACCURACY[(3, "7:2:1")] == 97.1
    assert REFERENCE_ACCURACY[(4, "4:3:2:1")] == 98.8
    assert REFERENCE_ACCURACY[(5, "4:2:2:1:1")] == 98.8
    assert min(REFERENCE_ACCURACY.values()) == 96.5 and max(REFERENCE_ACCURACY.values()) == 98.8


@pytest.mark.parametrize("kwargs", [dict(cells=()), dict(repeats=0),
                                    dict(cells=((3, SplitRatio((1, 1))),))])
def test_gridspec_validation(kwargs):
    with pytest.raises(ValidationError):
        GridSpec(**kwargs)


def test_run_grid_rows_and_spread():
    spec = GridSpec(((2, SplitRatio((1, 1))), (2, SplitRatio((3, 1)))), repeats=2, base_seed=5)
    seen = []
    result = run_grid(spec, synthetic_dataset(40, 1), RunConfig(epochs=1, n_clients=1, ratio=(1,)),
                      on_run=seen.append)
    assert [(r.n_clients, str(r.ratio), r.repeat, r.seed) for r in seen] == [
        (2, "1:1", 0, 5), (2, "1:1", 1, 6), (2, "3:1", 0, 5), (2, "3:1", 1, 6)]
    means = result.cell_means()
    assert set(means) == {(2, "1:1"), (2, "3:1")}
    spread = result.spreads()[2]
    assert spread == pytest.approx(abs(means[(2, "1:1")][0] - means[(2, "3:1")][0]))
    rows = result.to_csv().splitlines()
    assert len(rows) == 1 + 4 + 2 + 1
