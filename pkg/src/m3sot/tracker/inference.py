"""Template-set bookkeeping and one-pass sequence tracking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..backbone import compute_targetness_mask
from ..geom3d import Box3D, box_from_frame, from_box_frame, to_box_frame
from ..locator import select_best
from .sampling import FrameEmpty, crop_and_sample

N_POINTS = 1024


@dataclass(frozen=True)
class TemplateEntry:
    cloud: np.ndarray  # canonical frame of box_world
    mask: np.ndarray
    box_world: Box3D
    frame_index: int

    def in_frame(self, ref_box: Box3D) -> np.ndarray:
        return to_box_frame(from_box_frame(self.cloud, self.box_world), ref_box)


@dataclass(frozen=True)
class TrackerState:
    templates: tuple[TemplateEntry, ...]  # most recent first
    target_size: tuple[float, float, float]
    current_box: Box3D
    K: int = 2
    frame_index: int = 0
    history: tuple[int, ...] = field(default=())


def canonical_box(size) -> Box3D:
    return Box3D((0.0, 0.0, 0.0), size, 0.0)


def make_template(frame, box: Box3D, frame_index: int, rng: np.random.Generator,
                  n_points: int = N_POINTS) -> TemplateEntry:
    cloud = crop_and_sample(frame, box, n_points, rng)
    mask = compute_targetness_mask(cloud, canonical_box(box.size))
    return TemplateEntry(cloud, mask, box, frame_index)


def init_state(frame, box: Box3D, K: int, rng: np.random.Generator, n_points: int = N_POINTS) -> TrackerState:
    if K < 1:
        raise ValueError("template set size K must be >= 1")
    try:
        entry = make_template(frame, box, 0, rng, n_points)
    except FrameEmpty:
        # nothing observed around the initial box: a degenerate template at its center
        entry = TemplateEntry(np.zeros((n_points, 3)), np.ones(n_points), box, 0)
    return TrackerState((entry,), box.size, box, K, 0)


def template_inputs(templates, ref_box: Box3D, K: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Exactly K (cloud, mask) pairs in the reference frame, padding with the earliest entry."""
    entries = list(templates)[:K]
    entries += [entries[-1]] * (K - len(entries))
    return [(e.in_frame(ref_box), e.mask) for e in entries]


def track_step(state: TrackerState, frame, model, rng: np.random.Generator, gt_box: Box3D | None = None,
               n_points: int = N_POINTS):
    """Predict the box in ``frame`` and return it with the updated state."""
    ref = state.current_box
    frame_index = state.frame_index + 1
    try:
        search = crop_and_sample(frame, ref, n_points, rng)
    except FrameEmpty:
        return ref, TrackerState(state.templates, state.target_size, ref, state.K, frame_index, state.history)
    templates = template_inputs(state.templates, ref, state.K)
    sets = model.propose_sets(search, templates, state.target_size, ref_box=ref, gt_box=gt_box)
    best = select_best(sets)
    box = box_from_frame(best.box, ref)
    box = Box3D(box.center, state.target_size, box.yaw)
    try:
        entry = make_template(frame, box, frame_index, rng, n_points)
        kept = ((entry,) + state.templates)[: state.K]
    except FrameEmpty:
        kept = state.templates
    history = state.history + (best.source_template,)
    return box, TrackerState(kept, state.target_size, box, state.K, frame_index, history)


def run_sequence(tracklet, model, K: int = 2, seed: int = 0, n_points: int | None = None) -> list[Box3D]:
    """One pass from the first ground-truth box, no re-initialization.

    ``n_points`` defaults to the model's input size (1024 for models without one).
    """
    if n_points is None:
        cfg = getattr(model, "cfg", None)
        n_points = cfg.field.n_points if cfg is not None else N_POINTS
    if len(tracklet.frames) < 2:
        raise ValueError("a tracklet needs at least two frames")
    rng = np.random.default_rng(seed)
    first_points, first_box = tracklet.frames[0]
    state = init_state(first_points, first_box, K, rng, n_points)
    use_gt = getattr(model, "needs_ground_truth", False)
    preds = []
    for points, gt in tracklet.frames[1:]:
        box, state = track_step(state, points, model, rng, gt_box=gt if use_gt else None, n_points=n_points)
        preds.append(box)
    return preds
