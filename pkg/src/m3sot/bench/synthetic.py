"""Synthetic LiDAR-like tracklets: a rigid box-shell object moving through clutter."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..geom3d import Box3D, RigidMotion, apply_motion, from_box_frame
from .tracklet import Tracklet

BENCHMARK_SEED = 7
BENCHMARK_TRAIN = 64
BENCHMARK_TEST = 16
BENCHMARK_FRAMES = 20


@dataclass(frozen=True)
class SyntheticSceneConfig:
    object_size: tuple[float, float, float] = (1.8, 4.2, 1.6)
    object_points: int = 256
    clutter_points: int = 768
    clutter_margin: float = 4.0
    step_xyz: tuple[float, float, float] = (0.6, 0.6, 0.05)  # per-step drift drawn from +-range
    step_yaw: float = math.radians(5.0)
    step_jitter: float = 0.05
    occlusion_prob: float = 0.2
    occlusion_fraction: float = 0.3
    sparsity_ramp: float = 0.5
    frames: int = BENCHMARK_FRAMES
    seed: int = 0
    category: str = "Car"

    def __post_init__(self):
        if self.object_points < 0 or self.clutter_points < 0:
            raise ValueError("point counts must be >= 0")
        for name in ("occlusion_prob", "occlusion_fraction", "sparsity_ramp"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.frames < 2:
            raise ValueError("need at least two frames")


def sample_box_shell(size, n: int, rng: np.random.Generator) -> np.ndarray:
    """Points uniform over the surface of an axis-aligned box centered at the origin."""
    w, l, h = size
    areas = np.array([l * h, l * h, w * h, w * h, w * l, w * l])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([w, l, h])
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    u[np.arange(n), axis] = sign * np.array([w, l, h])[axis]
    return u


def generate_synthetic_tracklet(cfg: SyntheticSceneConfig) -> Tracklet:
    rng = np.random.default_rng(cfg.seed)
    size = tuple(cfg.object_size)
    shell = sample_box_shell(size, cfg.object_points, rng)
    start = Box3D((*rng.uniform(-5.0, 5.0, size=2), size[2] / 2.0), size, rng.uniform(-math.pi, math.pi))
    drift = rng.uniform(-1.0, 1.0, size=3) * np.asarray(cfg.step_xyz)
    spin = rng.uniform(-cfg.step_yaw, cfg.step_yaw)
    shell_angle = np.arctan2(shell[:, 1], shell[:, 0])
    region_half = np.asarray(size) / 2.0 + cfg.clutter_margin

    frames, box = [], start
    for t in range(cfg.frames):
        if t > 0:
            jitter = rng.uniform(-cfg.step_jitter, cfg.step_jitter, size=3) if cfg.step_jitter else np.zeros(3)
            step = drift + jitter
            box = apply_motion(box, RigidMotion(float(step[0]), float(step[1]), float(step[2]), float(spin)))
        keep = np.ones(len(shell), dtype=bool)
        if len(shell) and rng.uniform() < cfg.occlusion_prob:
            lo = rng.uniform(-math.pi, math.pi)
            rel = np.mod(shell_angle - lo, 2.0 * math.pi)
            keep &= rel >= 2.0 * math.pi * cfg.occlusion_fraction
        frac = 1.0 - cfg.sparsity_ramp * t / (cfg.frames - 1)
        keep &= rng.uniform(size=len(shell)) < frac
        obj = from_box_frame(shell[keep], box)
        clutter = np.asarray(box.center) + rng.uniform(-1.0, 1.0, size=(cfg.clutter_points, 3)) * region_half
        frames.append((np.concatenate([obj, clutter]).reshape(-1, 3), box))
    return Tracklet(frames, cfg.category, f"syn{cfg.seed:05d}")


def standard_benchmark(base: SyntheticSceneConfig | None = None, seed: int = BENCHMARK_SEED,
                       n_train: int = BENCHMARK_TRAIN, n_test: int = BENCHMARK_TEST):
    """The fixed desk-scale dataset: tracklet i uses seed ``seed * 1000 + i``."""
    base = base or SyntheticSceneConfig()
    tracklets = [generate_synthetic_tracklet(replace(base, seed=seed * 1000 + i, frames=BENCHMARK_FRAMES))
                 for i in range(n_train + n_test)]
    return tracklets[:n_train], tracklets[n_train:]
