"""Grids of training runs that differ along one modelling axis, with result tables.

A grid file uses the training configuration syntax plus three extras::

    [grid]
    seeds = 0, 1, 2, 3, 4

    [split]
    scheme = random
    fraction = 0.2

    [model]                 # base configuration shared by every cell
    n_blocks = 2

    [config sn_on]          # one section per named variant; keys are dotted
    model.sn_bound = 1.0

    [config sn_off]
    model.spectral_norm = false

Each (configuration, seed) cell trains on the split drawn with that seed and is
evaluated on the held-out part. A cell is a function of its configuration and
seed alone, so cells can run in any order or in parallel.
"""
from __future__ import annotations

import configparser
import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import (SCHEMA, ConfigError, TrainConfig, _parser, parse_dataclass_section,
                     parse_section_items)
from .data import Dataset, SplitSpec, split
from .diffmath import FactorizationError, SingularSystemError
from .predictor import evaluate_dataset
from .trainer import DivergenceError, train

RESULT_COLUMNS = ["config_name", "seed", "mse", "nll", "sec_per_epoch", "status"]
SUMMARY_COLUMNS = ["config_name", "runs", "failed", "mse_mean", "mse_std", "nll_mean", "nll_std",
                   "sec_per_epoch_mean", "sec_per_epoch_std"]


@dataclass
class ExperimentGrid:
    base: TrainConfig
    configs: dict[str, dict]
    seeds: list[int]
    split: SplitSpec = field(default_factory=SplitSpec)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("grid needs at least one seed")
        if not self.configs:
            raise ConfigError("grid needs at least one configuration")
        for name in self.configs:
            self.config_for(name, self.seeds[0])

    def config_for(self, name: str, seed: int) -> TrainConfig:
        try:
            return self.base.with_overrides({**self.configs[name], "seed": seed})
        except (TypeError, ConfigError) as exc:
            raise ConfigError(f"configuration {name!r}: {exc}") from None

    def cells(self) -> list[tuple[str, int]]:
        return [(name, seed) for name in self.configs for seed in self.seeds]


def parse_grid_text(text: str, where: str = "<grid>") -> ExperimentGrid:
    cp = _parser()
    try:
        cp.read_string(text, source=where)
    except configparser.Error as exc:
        raise ConfigError(f"{where}: {exc}") from None
    base_sections = {s for s, _ in SCHEMA}
    base: dict = {}
    configs: dict[str, dict] = {}
    seeds: list[int] = []
    for section in cp.sections():
        if section in base_sections:
            base.update(parse_section_items(section, cp.items(section), where))
        elif section == "grid":
            for key, raw in cp.items(section):
                if key != "seeds":
                    raise ConfigError(f"{where}: unknown key grid.{key}")
                try:
                    seeds = [int(s) for s in raw.split(",") if s.strip()]
                except ValueError:
                    raise ConfigError(f"{where}: grid.seeds must be a comma-separated list of integers") from None
        elif section.startswith("config "):
            name = section[len("config "):].strip()
            overrides: dict = {}
            for key, raw in cp.items(section):
                sec, _, sub = key.partition(".")
                overrides.update(parse_section_items(sec, [(sub, raw)], f"{where} [{section}]"))
            configs[name] = overrides
        elif section != "split":
            raise ConfigError(f"{where}: unknown section [{section}]")
    spec = parse_dataclass_section(cp, "split", SplitSpec, where)
    return ExperimentGrid(TrainConfig(**base), configs, seeds, spec)


def load_grid(path: str) -> ExperimentGrid:
    with open(path, encoding="utf-8") as fh:
        return parse_grid_text(fh.read(), where=path)


@dataclass
class CellResult:
    config_name: str
    seed: int
    mse: float
    nll: float
    sec_per_epoch: float
    status: str = "ok"
    message: str = ""
    elbo_trace: list[float] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _split_for(grid: ExperimentGrid, ds: Dataset, seed: int, splits) -> tuple[Dataset, Dataset]:
    if splits is None:
        spec = SplitSpec(grid.split.scheme, grid.split.fraction, grid.split.block_length,
                         grid.split.outputs_per_block, grid.split.positions, seed)
        return split(ds, spec)
    if callable(splits):
        return splits(seed)
    return splits


def run_cell(grid: ExperimentGrid, ds: Dataset, name: str, seed: int, splits=None) -> CellResult:
    """Train and evaluate one cell; numerical failures are recorded, not raised."""
    cfg = grid.config_for(name, seed)
    tr, te = _split_for(grid, ds, seed, splits)
    try:
        ckpt, history = train(tr, cfg)
        ev = evaluate_dataset(ckpt, te)
    except (DivergenceError, FactorizationError, SingularSystemError) as exc:
        return CellResult(name, seed, math.nan, math.nan, math.nan, "diverged",
                          str(exc).splitlines()[0])
    return CellResult(name, seed, ev.mse, ev.mean_nll, float(np.mean(history.seconds)),
                      elbo_trace=list(history.elbo))


def _run_cell_args(args):
    return run_cell(*args)


def run_grid(grid: ExperimentGrid, ds: Dataset, splits=None, workers: int = 1) -> list[CellResult]:
    """Every (configuration, seed) cell, sorted by configuration order then seed.

    ``splits`` is ``None`` (split per seed with the grid's split spec), a fixed
    ``(train, test)`` pair, or a callable ``seed -> (train, test)``.
    """
    jobs = [(grid, ds, name, seed, splits) for name, seed in grid.cells()]
    if workers > 1 and not callable(splits):
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell_args, jobs))
    else:
        results = [run_cell(*job) for job in jobs]
    order = {name: i for i, name in enumerate(grid.configs)}
    return sorted(results, key=lambda r: (order[r.config_name], r.seed))


def summarise(results: list[CellResult]) -> list[dict]:
    """Mean and (population) standard deviation per configuration over successful cells."""
    names: list[str] = []
    for r in results:
        if r.config_name not in names:
            names.append(r.config_name)
    rows = []
    for name in names:
        cells = [r for r in results if r.config_name == name]
        good = [r for r in cells if r.ok]
        row = {"config_name": name, "runs": len(cells), "failed": len(cells) - len(good)}
        for metric in ("mse", "nll", "sec_per_epoch"):
            vals = np.array([getattr(r, metric) for r in good])
            row[f"{metric}_mean"] = float(vals.mean()) if len(vals) else math.nan
            row[f"{metric}_std"] = float(vals.std()) if len(vals) else math.nan
        rows.append(row)
    return rows


def _fmt(v) -> str:
    return format(v, ".17g") if isinstance(v, float) else str(v)


def write_results(results: list[CellResult], out_dir: str) -> tuple[str, str]:
    """Write ``results.csv`` (one row per cell) and ``summary.csv``; returns both paths."""
    os.makedirs(out_dir, exist_ok=True)
    cells_path = os.path.join(out_dir, "results.csv")
    summary_path = os.path.join(out_dir, "summary.csv")
    with open(cells_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for r in results:
            w.writerow([r.config_name, r.seed, _fmt(r.mse), _fmt(r.nll), _fmt(r.sec_per_epoch), r.status])
    with open(summary_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for row in summarise(results):
            w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    return cells_path, summary_path
