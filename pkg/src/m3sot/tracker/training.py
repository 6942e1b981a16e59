"""Deep-supervised training: sample construction, losses, Adam and the epoch loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .. import numcore as nc
from ..backbone import compute_targetness_mask
from ..geom3d import Box3D, box_to_frame, from_box_frame, normalize_angle, to_box_frame
from ..numcore import ParameterStore, Tape
from .inference import N_POINTS, canonical_box
from .model import TrackerModel, VersionOutput, model_config_from
from .sampling import FrameEmpty, crop_and_sample, perturb_box

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; ``params`` holds the last good state."""

    def __init__(self, msg: str, params: ParameterStore):
        super().__init__(msg)
        self.params = params


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    lr_decay_factor: float = 0.2
    lr_decay_every: int = 10
    K: int = 2
    ratios: tuple[int, ...] = (2, 4, 8)
    layers: int = 4
    head_mode: str = "variable"
    seed: int = 0
    channels: tuple[int, ...] = (64, 128, 128)
    knn_k: int = 8
    n_points: int = N_POINTS
    sampling: str = "range"
    propagation: str = "many_to_one"
    mask_task: bool = True
    center_task: bool = True
    box_task: bool = True
    lambda_mask: float = 1.0
    lambda_center: float = 1.0
    lambda_box: float = 1.0
    augment: bool = True
    max_steps: int | None = None

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Smaller schedule that runs on a laptop CPU."""
        base = dict(epochs=20, batch_size=16)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string-valued key=value settings (unknown keys rejected)."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(known[key].default, raw)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(default, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.strip("[]()").replace(",", " ").split())
    if isinstance(default, int) or default is None:
        return None if raw.lower() == "none" else int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


# ----------------------------------------------------------------------------
# samples


@dataclass
class Sample:
    """One (template set, search frame) training triple, all in the reference frame."""

    search: np.ndarray
    templates: list[tuple[np.ndarray, np.ndarray]]
    template_boxes: list[Box3D]  # ground truth, reference frame
    gt_box: Box3D  # ground truth of the search frame, reference frame


def build_sample(tracklet, search_index: int, K: int, rng: np.random.Generator, augment: bool = True,
                 n_points: int = N_POINTS) -> Sample:
    """Templates from the K preceding frames (earliest replicated), boxes optionally perturbed."""
    hist = [max(search_index - k, 0) for k in range(1, K + 1)]
    crop_boxes = {}
    for j in sorted(set(hist)):
        gt = tracklet.frames[j][1]
        crop_boxes[j] = perturb_box(gt, rng) if augment else gt
    ref = crop_boxes[hist[0]]
    templates, t_boxes = [], []
    for j in hist:
        pts, gt = tracklet.frames[j]
        box = crop_boxes[j]
        try:
            cloud = crop_and_sample(pts, box, n_points, rng)
        except FrameEmpty:
            cloud = np.zeros((n_points, 3))
        mask = compute_targetness_mask(cloud, canonical_box(box.size))
        world = from_box_frame(cloud, box)
        templates.append((to_box_frame(world, ref), mask))
        t_boxes.append(box_to_frame(gt, ref))
    pts, gt = tracklet.frames[search_index]
    search = crop_and_sample(pts, ref, n_points, rng)
    return Sample(search, templates, t_boxes, box_to_frame(gt, ref))


# ----------------------------------------------------------------------------
# losses


def _bce(pred, labels) -> nc.Tensor:
    p = nc.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(labels, dtype=float)
    return -nc.mean(nc.log(p) * y + nc.log(1.0 - p) * (1.0 - y))


def _huber_rows(diff) -> nc.Tensor:
    return nc.mean(nc.sum(nc.huber(diff), axis=1))


def compute_losses(versions: list[VersionOutput], sample: Sample, lambda_mask: float = 1.0,
                   lambda_center: float = 1.0, lambda_box: float = 1.0, mask_task: bool = True,
                   center_task: bool = True, box_task: bool = True):
    """Total loss and a float breakdown per term, summed over versions and layers."""
    zero = nc.Tensor(0.0)
    total = zero
    parts = {"mask": 0.0, "center": 0.0, "box": 0.0}
    gt = sample.gt_box
    gt_center = np.asarray(gt.center)
    for v in versions:
        k = v.source_template - 1
        t_box = sample.template_boxes[min(k, len(sample.template_boxes) - 1)]
        labels = np.concatenate([compute_targetness_mask(v.template_coords, t_box),
                                 compute_targetness_mask(v.search_coords, gt)])
        targets = np.concatenate([np.tile(t_box.center, (len(v.template_coords), 1)),
                                  np.tile(gt.center, (len(v.search_coords), 1))])
        pos = np.flatnonzero(labels > 0.5)
        for layer in v.layers:
            if mask_task:
                term = _bce(layer.mask_pred, labels) * lambda_mask
                total = total + term
                parts["mask"] += float(term.data)
            if center_task and len(pos):
                diff = nc.gather_rows(layer.center_pred, pos) - targets[pos]
                term = _huber_rows(diff) * lambda_center
                total = total + term
                parts["center"] += float(term.data)
        if box_task:
            term = _box_loss(v, gt_center, normalize_angle(gt.yaw)) * lambda_box
            total = total + term
            parts["box"] += float(term.data)
    parts["total"] = float(total.data)
    return total, parts


def _box_loss(v: VersionOutput, gt_center: np.ndarray, gt_yaw: float) -> nc.Tensor:
    centers = v.final.search()[2]
    win = int(np.argmax(v.confidence.data))
    center_term = nc.sum(nc.huber(centers[win] - gt_center))
    yaw_term = nc.huber(v.yaw_residual[win] - gt_yaw)
    nearest = int(np.argmin(np.linalg.norm(v.search_coords - gt_center, axis=1)))
    conf_term = -nc.log(nc.clip(v.confidence[nearest], BCE_EPS, 1.0))
    return center_term + yaw_term + conf_term


# ----------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: ParameterStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, t in self.params.items():
            if t.grad is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * t.grad
            v *= self.b2
            v += (1.0 - self.b2) * t.grad * t.grad
            t.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ----------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    params: ParameterStore
    history: list[dict] = field(default_factory=list)


class Trainer:
    def __init__(self, cfg: TrainConfig, params: ParameterStore | None = None):
        self.cfg = cfg
        self.model = TrackerModel(model_config_from(cfg), params)
        self.opt = Adam(self.model.params, cfg.learning_rate)

    @property
    def params(self) -> ParameterStore:
        return self.model.params

    def sample_loss(self, sample: Sample):
        cfg = self.cfg
        versions = self.model.forward_step(sample.search, sample.templates)
        return compute_losses(versions, sample, cfg.lambda_mask, cfg.lambda_center, cfg.lambda_box,
                              cfg.mask_task, cfg.center_task, cfg.box_task)

    def step(self, batch: list[Sample]) -> dict:
        """One optimizer update on the batch mean of per-sample losses."""
        self.params.zero_grad()
        totals = {"mask": 0.0, "center": 0.0, "box": 0.0, "total": 0.0}
        scale = 1.0 / len(batch)
        for sample in batch:
            with Tape() as tape:
                loss, parts = self.sample_loss(sample)
                scaled = loss * scale
            nc.backward(tape, scaled)
            for key in totals:
                totals[key] += parts[key] * scale
        if not math.isfinite(totals["total"]) or any(
                t.grad is not None and not np.all(np.isfinite(t.grad)) for t in self.params.values()):
            raise FloatingPointError("non-finite loss or gradient")
        self.opt.step()
        return totals


def sample_index(dataset) -> list[tuple[int, int]]:
    return [(ti, s) for ti, tr in enumerate(dataset) for s in range(1, len(tr.frames))]


def train(cfg: TrainConfig, dataset, out_dir=None, params: ParameterStore | None = None) -> TrainResult:
    """Train from scratch (or from ``params``) deterministically given ``cfg.seed``.

    Checkpoints go to ``out_dir/epoch_XXX.ckpt`` plus ``last.ckpt`` and a CSV log.
    """
    if not dataset:
        raise ValueError("training needs a nonempty dataset")
    trainer = Trainer(cfg, params)
    rng = np.random.default_rng(cfg.seed + 1)
    index = sample_index(dataset)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history: list[dict] = []
    good = trainer.params.copy()
    step = 0
    for epoch in range(cfg.epochs):
        trainer.opt.lr = cfg.learning_rate * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)
        order = rng.permutation(len(index))
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            batch = []
            for i in order[start:start + cfg.batch_size]:
                ti, s = index[i]
                try:
                    batch.append(build_sample(dataset[ti], s, cfg.K, rng, cfg.augment, cfg.n_points))
                except FrameEmpty:
                    continue
            if not batch:
                continue
            try:
                parts = trainer.step(batch)
            except FloatingPointError as exc:
                if out is not None:
                    good.save(out / "last.ckpt")
                raise DivergenceError(f"diverged at epoch {epoch} step {step}: {exc}", good) from exc
            step += 1
            row = {"epoch": epoch, "step": step, **parts, "lr": trainer.opt.lr}
            history.append(row)
            log.debug("epoch %d step %d loss %.4f", epoch, step, parts["total"])
        good = trainer.params.copy()
        if out is not None:
            good.save(out / f"epoch_{epoch:03d}.ckpt")
            good.save(out / "last.ckpt")
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    if out is not None:
        write_log(history, out / "train_log.csv")
    return TrainResult(trainer.params, history)


def write_log(history: list[dict], path) -> None:
    cols = ["epoch", "step", "mask", "center", "box", "total", "lr"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in history:
            w.writerow({c: row[c] for c in cols})
