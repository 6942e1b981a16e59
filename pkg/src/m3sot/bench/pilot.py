"""Frame-by-frame propagation baselines, trained and scored per template-set size."""
from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path

from ..tracker.model import TrackerModel, model_config_from
from ..tracker.training import TrainConfig, train
from .metrics import run_ope

PARADIGMS = {"a": "self_attention", "b": "cross_attention", "ours": "many_to_one"}
LABELS = {"a": "(a) self-attention", "b": "(b) cross-attention", "ours": "many-to-one"}


def pilot_paradigm(mode: str, train_set, test_set, ks=(1, 2, 3, 4), base: TrainConfig | None = None,
                   params=None) -> dict:
    """Train (unless ``params`` is given) and evaluate one paradigm for every K.

    Returns ``{"paradigm": label, "precision": {K: value}, "success": {K: value}}``.
    """
    if mode not in PARADIGMS:
        raise ValueError(f"unknown paradigm {mode!r}; choose from {sorted(PARADIGMS)}")
    base = base or TrainConfig.desk()
    out = {"paradigm": LABELS[mode], "precision": {}, "success": {}}
    for K in ks:
        if K < 1:
            raise ValueError(f"K must be >= 1, got {K}")
        cfg = replace(base, K=K, propagation=PARADIGMS[mode])
        p = params if params is not None else train(cfg, train_set).params
        rep = run_ope(TrackerModel(model_config_from(cfg), p), test_set, K=K, seed=cfg.seed)
        out["precision"][K] = rep.precision
        out["success"][K] = rep.success
    return out


def pilot_table(rows: list[dict], path, metric: str = "precision") -> Path:
    """One row per paradigm, one column per K."""
    ks = sorted({k for r in rows for k in r[metric]})
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["paradigm", *[f"K={k}" for k in ks]])
        for r in rows:
            w.writerow([r["paradigm"], *[f"{r[metric][k]:.4f}" if k in r[metric] else "" for k in ks]])
    return path
