"""Toggle matrix over the seeded synthetic suite."""
from __future__ import annotations

import shlex
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .config import TrackerConfig, WorldConfig, parse_assignments
from .tracker import run_sequence
from .world import SyntheticWorld

TOGGLES = ("use_mask", "use_feature", "use_ce", "include_background", "l2_metric")
METRIC_COLUMNS = ("mean_iou", "auc", "norm_precision", "precision")


@dataclass
class MatrixRow:
    name: str
    tracker: dict = field(default_factory=dict)
    world: dict = field(default_factory=dict)


def parse_matrix(text: str) -> list[MatrixRow]:
    """One row per line: ``name key=value ...``; ``#`` starts a comment."""
    rows, names = [], set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        name, *items = shlex.split(line)
        if name in names:
            raise ConfigError(f"matrix line {lineno}: duplicate row {name!r}")
        names.add(name)
        pairs = []
        for item in items:
            if "=" not in item:
                raise ConfigError(f"matrix line {lineno}: expected key=value, got {item!r}")
            pairs.append(tuple(item.split("=", 1)))
        tracker, world = parse_assignments(pairs)
        rows.append(MatrixRow(name, tracker, world))
    if not rows:
        raise ConfigError("ablation matrix is empty")
    return rows


def load_matrix(path) -> list[MatrixRow]:
    try:
        return parse_matrix(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read matrix {path}: {exc}") from exc


def _cell(args):
    cfg, world = args
    return run_sequence(SyntheticWorld(world), cfg).metrics.summary()


def ablate(cfg: TrackerConfig, world: WorldConfig, matrix: list[MatrixRow],
           seeds=range(3), jobs: int = 1) -> list[dict]:
    """Mean metrics over ``seeds`` for every matrix row. Rows are validated before anything runs."""
    cells = []
    for row in matrix:
        row_cfg = cfg.replace(**row.tracker)  # raises ConfigError on invalid combinations
        for seed in seeds:
            cells.append((row.name, row_cfg, world.replace(**row.world, seed=seed)))
    work = [(c, w) for _, c, w in cells]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_cell, work))
    else:
        results = [_cell(w) for w in work]

    table = []
    for row in matrix:
        row_cfg = cfg.replace(**row.tracker)
        mine = [r for (name, _, _), r in zip(cells, results) if name == row.name]
        record = {"row": row.name}
        record.update({t: int(getattr(row_cfg, t)) for t in TOGGLES})
        extra = {k: v for k, v in row.tracker.items() if k not in TOGGLES}
        extra.update({f"world_{k}": v for k, v in row.world.items()})
        record["overrides"] = " ".join(f"{k}={v}" for k, v in sorted(extra.items()))
        for col in METRIC_COLUMNS:
            record[col] = float(np.mean([r[col] for r in mine]))
        record["seeds"] = len(mine)
        table.append(record)
    return table


ABLATION_COLUMNS = ("row", *TOGGLES, "overrides", *METRIC_COLUMNS, "seeds")
