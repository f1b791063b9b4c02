"""Grid runner over the reweighting exponent and the context label, plus baselines."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bias import estimate_bias
from .dataset import ShiftSpec, generate_iid_split, generate_toy_dataset
from .errors import ValidationError
from .evaluation import evaluate
from .report import AblationLine, render_ablation
from .training import TrainConfig, train


@dataclass(frozen=True)
class Cell:
    name: str
    loss_mode: str
    r: float | None = None
    context_label: bool | None = None

    def overrides(self) -> dict:
        out = {"loss_mode": self.loss_mode}
        if self.loss_mode == "ccb":
            out.update(r=float(self.r), context_label=bool(self.context_label))
        return out

    @property
    def model_label(self) -> str:
        return {"ml_baseline": "+None", "lmh_baseline": "+LMH"}.get(self.loss_mode, "+CCB")


# baselines, the six usual CCB rows, then the two remaining "without label" cells
DEFAULT_GRID = (
    Cell("ml_baseline", "ml_baseline"),
    Cell("lmh_baseline", "lmh_baseline"),
    Cell("r0_wo", "ccb", 0.0, False),
    Cell("r1_wo", "ccb", 1.0, False),
    Cell("r0_w", "ccb", 0.0, True),
    Cell("r1_w", "ccb", 1.0, True),
    Cell("r0.5_w", "ccb", 0.5, True),
    Cell("r2_w", "ccb", 2.0, True),
    Cell("r0.5_wo", "ccb", 0.5, False),
    Cell("r2_wo", "ccb", 2.0, False),
)


def grid_from_names(names) -> tuple[Cell, ...]:
    by_name = {c.name: c for c in DEFAULT_GRID}
    unknown = [n for n in names if n not in by_name]
    if unknown:
        raise ValidationError(f"unknown ablation cells {unknown}; choose from {sorted(by_name)}")
    return tuple(by_name[n] for n in names)


@dataclass
class CellResult:
    cell: Cell
    seeds: list[int]
    test: list[float]
    iid: list[float]
    reports: list[dict] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.test))

    @property
    def std(self) -> float:
        return float(np.std(self.test))

    @property
    def gap(self) -> float:
        return float(np.mean(self.iid) - np.mean(self.test))

    def as_dict(self) -> dict:
        return {
            "cell": self.cell.name, "loss_mode": self.cell.loss_mode, "r": self.cell.r,
            "context_label": self.cell.context_label, "seeds": self.seeds,
            "test": self.test, "iid": self.iid, "mean": self.mean, "std": self.std,
            "gap": self.gap, "reports": self.reports,
        }


@dataclass
class AblationResult:
    cells: list[CellResult]

    def __getitem__(self, name: str) -> CellResult:
        for c in self.cells:
            if c.cell.name == name:
                return c
        raise KeyError(name)

    def lines(self) -> list[AblationLine]:
        multi = any(len(c.seeds) > 1 for c in self.cells)
        return [AblationLine(c.cell.model_label, c.cell.r, c.cell.context_label, c.mean,
                             c.std if multi else None) for c in self.cells]

    def render(self) -> str:
        return render_ablation(self.lines())

    def as_dict(self) -> dict:
        return {"schema_version": 1, "cells": [c.as_dict() for c in self.cells]}


_DATA_CACHE: dict = {}


def _data(spec: ShiftSpec, n_val: int):
    key = (spec, n_val)
    if key not in _DATA_CACHE:
        _DATA_CACHE.clear()
        train_s, test_s = generate_toy_dataset(spec)
        val = generate_iid_split(spec, n_val)
        _DATA_CACHE[key] = (train_s, test_s, val, estimate_bias(train_s))
    return _DATA_CACHE[key]


def _run_one(args):
    cell, seed, base, spec_dict, n_val = args
    spec = ShiftSpec.from_dict({**spec_dict, "seed": seed})
    train_s, test_s, val, table = _data(spec, n_val)
    cfg = TrainConfig.from_dict({**base, **cell.overrides(), "seed": seed})
    model, _ = train(cfg, train_s, table)
    t, v = evaluate(model, test_s), evaluate(model, val)
    return t.overall, v.overall, t.as_dict()


def run_ablation(base_config: TrainConfig | None = None, grid=DEFAULT_GRID, seeds=(0, 1, 2, 3, 4),
                 spec: ShiftSpec | None = None, jobs: int = 1, n_val: int = 1000) -> AblationResult:
    """Train every cell on every seed; seed s uses dataset seed s and model seed s."""
    base = (base_config or TrainConfig()).to_dict()
    spec = spec or ShiftSpec()
    seeds = [int(s) for s in seeds]
    if not seeds or not grid:
        raise ValidationError("ablation needs at least one seed and one cell")
    # seed-major order keeps the per-process data cache warm
    tasks = [(cell, s, base, spec.to_dict(), n_val) for s in seeds for cell in grid]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, os.cpu_count() or 1)) as ex:
            outs = list(ex.map(_run_one, tasks))
    else:
        outs = [_run_one(t) for t in tasks]
    results = {cell.name: CellResult(cell, seeds, [], []) for cell in grid}
    for (cell, _s, *_), (t, v, rep) in zip(tasks, outs):
        r = results[cell.name]
        r.test.append(t)
        r.iid.append(v)
        r.reports.append(rep)
    return AblationResult([results[c.name] for c in grid])
