"""The client-count x split-ratio experiment grid."""
from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

from .data import Dataset, SplitRatio
from .errors import ValidationError
from .orchestrator import RunConfig, TrainResult, train

# reference final accuracy (%) per cell on the 864-image CCTV corpus
REFERENCE_ACCURACY = {
    (3, "1:1:1"): 97.0, (3, "7:2:1"): 97.1, (3, "8:1:1"): 96.5,
    (4, "1:1:1:1"): 98.4, (4, "4:3:2:1"): 98.8, (4, "7:1:1:1"): 97.6,
    (5, "1:1:1:1:1"): 97.7, (5, "4:2:2:1:1"): 98.8, (5, "6:1:1:1:1"): 97.0,
}

DEFAULT_CELLS = tuple((n, SplitRatio.parse(r)) for n, r in REFERENCE_ACCURACY)

GRID_HEADER = ("kind", "n_clients", "ratio", "repeat", "seed", "test_acc_pct", "train_acc_pct",
               "sd_pct", "reference_acc_pct")


@dataclass(frozen=True)
class GridSpec:
    cells: tuple = DEFAULT_CELLS
    repeats: int = 3
    base_seed: int = 0

    def __post_init__(self):
        if not self.cells:
            raise ValidationError("grid needs at least one cell")
        if self.repeats < 1:
            raise ValidationError("repeats must be at least 1")
        for n, ratio in self.cells:
            if len(ratio) != n:
                raise ValidationError(f"ratio {ratio} does not have {n} parts")


class GridRun(NamedTuple):
    n_clients: int
    ratio: SplitRatio
    repeat: int
    seed: int
    result: TrainResult


class GridResult(NamedTuple):
    runs: list

    def cell_means(self) -> dict:
        """(n, ratio string) -> (mean, sd) of final test accuracy in percent."""
        by_cell: dict = {}
        for r in self.runs:
            by_cell.setdefault((r.n_clients, str(r.ratio)), []).append(100 * r.result.history.final.test_acc)
        return {k: (statistics.fmean(v), statistics.stdev(v) if len(v) > 1 else 0.0)
                for k, v in by_cell.items()}

    def spreads(self) -> dict:
        """Per client count: max - min of the cell mean accuracies (percentage points)."""
        per_n: dict = {}
        for (n, _), (mean, _) in self.cell_means().items():
            per_n.setdefault(n, []).append(mean)
        return {n: max(v) - min(v) for n, v in sorted(per_n.items())}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(GRID_HEADER)
        for r in self.runs:
            final = r.result.history.final
            w.writerow(["run", r.n_clients, r.ratio, r.repeat, r.seed, f"{100 * final.test_acc:.2f}",
                        f"{100 * final.train_acc:.2f}", "", ""])
        for (n, ratio), (mean, sd) in self.cell_means().items():
            ref = REFERENCE_ACCURACY.get((n, ratio))
            w.writerow(["cell", n, ratio, "", "", f"{mean:.2f}", "", f"{sd:.2f}",
                        "" if ref is None else f"{ref:.1f}"])
        for n, spread in self.spreads().items():
            w.writerow(["spread", n, "", "", "", f"{spread:.2f}", "", "", ""])
        return buf.getvalue()


def run_grid(spec: GridSpec, dataset: Dataset, base: RunConfig,
             on_run: Callable | None = None) -> GridResult:
    """Train every (cell, repeat) with ``base`` settings; repeat r uses seed base_seed + r."""
    runs = []
    for n, ratio in spec.cells:
        for rep in range(spec.repeats):
            seed = spec.base_seed + rep
            cfg = replace(base, n_clients=n, ratio=ratio, seed=seed)
            run = GridRun(n, ratio, rep, seed, train(cfg, dataset))
            runs.append(run)
            if on_run is not None:
                on_run(run)
    return GridResult(runs)
