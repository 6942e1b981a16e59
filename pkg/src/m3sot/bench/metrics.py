"""One-pass evaluation: Success and Precision AUCs over tracklets."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..geom3d import Box3D, box_iou_3d, box_to_frame, center_distance
from ..locator import Proposal, ProposalSet
from ..tracker.inference import run_sequence

SUCCESS_THRESHOLDS = np.arange(21) / 20.0  # 0, 0.05, ..., 1.0
PRECISION_THRESHOLDS = np.arange(21) / 10.0  # 0, 0.1, ..., 2.0 m


def success_metric(ious) -> float:
    """Mean over 21 IoU thresholds of the fraction of frames with IoU strictly above it, x100."""
    x = np.asarray(ious, dtype=float).reshape(-1)
    if x.size == 0:
        raise ValueError("success needs at least one frame")
    return float(np.mean((x[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1)) * 100.0)


def precision_metric(dists) -> float:
    """Mean over 21 distance thresholds in [0, 2] m of the fraction of frames within it, x100."""
    x = np.asarray(dists, dtype=float).reshape(-1)
    if x.size == 0:
        raise ValueError("precision needs at least one frame")
    return float(np.mean((x[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)) * 100.0)


@dataclass
class OPEReport:
    ious: list[float]
    distances: list[float]
    success: float
    precision: float
    frames: int
    tracklet_id: str = "all"
    per_tracklet: list["OPEReport"] = field(default_factory=list)

    @classmethod
    def from_series(cls, ious, distances, tracklet_id: str = "all") -> "OPEReport":
        return cls(list(map(float, ious)), list(map(float, distances)), success_metric(ious),
                   precision_metric(distances), len(ious), tracklet_id)

    def summary(self) -> dict:
        return {"success": self.success, "precision": self.precision, "frames": self.frames,
                "tracklets": len(self.per_tracklet) or 1}


def evaluate_predictions(preds, gts, tracklet_id: str = "all") -> OPEReport:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth boxes")
    ious = [box_iou_3d(p, g) for p, g in zip(preds, gts)]
    dists = [center_distance(p, g) for p, g in zip(preds, gts)]
    return OPEReport.from_series(ious, dists, tracklet_id)


def aggregate(reports: list[OPEReport]) -> OPEReport:
    """Frame-count-weighted means of per-tracklet Success and Precision."""
    if not reports:
        raise ValueError("nothing to aggregate")
    frames = sum(r.frames for r in reports)
    success = sum(r.success * r.frames for r in reports) / frames
    precision = sum(r.precision * r.frames for r in reports) / frames
    ious = [v for r in reports for v in r.ious]
    dists = [v for r in reports for v in r.distances]
    return OPEReport(ious, dists, success, precision, frames, "all", list(reports))


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("M3SOT_THREADS", "1")))
    except ValueError:
        return 1


def run_ope(model, tracklets, K: int = 2, seed: int = 0, threads: int | None = None) -> OPEReport:
    """Track every tracklet once from its first box and score the remaining frames."""

    def one(i):
        tr = tracklets[i]
        preds = run_sequence(tr, model, K, seed=seed + i)
        return evaluate_predictions(preds, tr.boxes[1:], tr.id)

    n = threads or eval_threads()
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            reports = list(pool.map(one, range(len(tracklets))))
    else:
        reports = [one(i) for i in range(len(tracklets))]
    return aggregate(reports)


class StaticModel:
    """Baseline that never moves: every step re-predicts the previous box."""

    def propose_sets(self, search_cloud, templates, target_size, ref_box=None, gt_box=None):
        return [ProposalSet((Proposal(Box3D((0.0, 0.0, 0.0), target_size, 0.0), 1.0, 1, 0),))]


class GroundTruthModel:
    """Predictions forced equal to the ground truth (sanity reference for the metrics)."""

    needs_ground_truth = True

    def propose_sets(self, search_cloud, templates, target_size, ref_box=None, gt_box=None):
        local = box_to_frame(gt_box, ref_box)
        return [ProposalSet((Proposal(Box3D(local.center, target_size, local.yaw), 1.0, 1, 0),))]
