"""Grid runner for the template-set, receptive-field, task, head and sampling ablations."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import replace
from pathlib import Path

from ..tracker.model import TrackerModel, model_config_from
from ..tracker.training import TrainConfig, train
from .metrics import run_ope

log = logging.getLogger(__name__)

# each grid is a list of (row label, TrainConfig overrides)
GRIDS: dict[str, list[tuple[str, dict]]] = {
    "template_sets": [(f"K={k}", {"K": k}) for k in (1, 2, 3, 4)],
    "ratios": [(f"Ratio: {list(r)}", {"ratios": r}) for r in ((1,), (2,), (2, 4), (2, 4, 8), (2, 4, 8, 16))],
    "tasks": [
        (f"mask={'on' if m else 'off'} center={'on' if c else 'off'}", {"mask_task": m, "center_task": c})
        for m in (False, True) for c in (False, True)
    ],
    "heads": [("fixed", {"head_mode": "fixed"}), ("variable", {"head_mode": "variable"})],
    "sampling": [("random", {"sampling": "random"}), ("range", {"sampling": "range"})],
}

COLUMNS = ["grid", "label", "config", "success", "precision", "wall_time", "status"]


def ablation_runner(grid, train_set, test_set, base: TrainConfig | None = None, name: str = "custom") -> list[dict]:
    """Train and score each cell from the same seed; failing cells are recorded, not raised."""
    base = base or TrainConfig.desk()
    cells = GRIDS[grid] if isinstance(grid, str) else list(grid)
    name = grid if isinstance(grid, str) else name
    rows = []
    for label, delta in cells:
        t0 = time.perf_counter()
        row = {"grid": name, "label": label, "config": json.dumps(delta, sort_keys=True)}
        try:
            cfg = replace(base, **delta)
            params = train(cfg, train_set).params
            rep = run_ope(TrackerModel(model_config_from(cfg), params), test_set, K=cfg.K, seed=cfg.seed)
            row.update(success=rep.success, precision=rep.precision, status="ok")
        except Exception as exc:  # a broken cell must not sink the whole table
            log.warning("cell %s failed: %s", label, exc)
            row.update(success=math.nan, precision=math.nan, status=f"failed: {type(exc).__name__}: {exc}")
        row["wall_time"] = time.perf_counter() - t0
        rows.append(row)
    return rows


def write_rows(rows: list[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({c: (f"{r[c]:.4f}" if isinstance(r[c], float) else r[c]) for c in COLUMNS})
    return path
