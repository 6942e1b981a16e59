"""Subregion cropping, point resampling and box augmentation."""
from __future__ import annotations

import math

import numpy as np

from ..geom3d import Box3D, RigidMotion, apply_motion, points_in_box, to_box_frame

DILATION = 2.0
MAX_SHIFT = 0.3
MAX_YAW = math.radians(10.0)


class FrameEmpty(Exception):
    """No points fall inside the search subregion."""


def dilate(box: Box3D, margin: float = DILATION) -> Box3D:
    w, l, h = box.size
    return Box3D(box.center, (w + 2 * margin, l + 2 * margin, h + 2 * margin), box.yaw)


def crop_and_sample(frame, ref_box: Box3D, n: int, rng: np.random.Generator,
                    margin: float = DILATION) -> np.ndarray:
    """Points of the dilated reference box, in its canonical frame, resampled to exactly ``n``."""
    pts = np.asarray(frame, dtype=float).reshape(-1, 3)
    region = pts[points_in_box(pts, dilate(ref_box, margin))]
    m = len(region)
    if m == 0:
        raise FrameEmpty(f"no points within {margin} m of the reference box")
    idx = rng.choice(m, size=n, replace=m < n)
    return to_box_frame(region[idx], ref_box)


def sample_motion(rng: np.random.Generator, max_shift: float = MAX_SHIFT, max_yaw: float = MAX_YAW) -> RigidMotion:
    dx, dy, dz = rng.uniform(-max_shift, max_shift, size=3)
    return RigidMotion(float(dx), float(dy), float(dz), float(rng.uniform(-max_yaw, max_yaw)))


def _rigid(points: np.ndarray, box: Box3D, m: RigidMotion) -> np.ndarray:
    # rotate about the box center, then translate: the box moves exactly as apply_motion says
    c, s = math.cos(m.dtheta), math.sin(m.dtheta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    center = np.asarray(box.center)
    return (points - center) @ rot.T + center + np.array([m.dx, m.dy, m.dz])


def augment(cloud, box: Box3D, rng: np.random.Generator, max_shift: float = MAX_SHIFT,
            max_yaw: float = MAX_YAW):
    """Move the cloud and its box by one shared random rigid motion."""
    m = sample_motion(rng, max_shift, max_yaw)
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    return _rigid(pts, box, m), apply_motion(box, m)


def perturb_box(box: Box3D, rng: np.random.Generator, max_shift: float = MAX_SHIFT,
                max_yaw: float = MAX_YAW) -> Box3D:
    """Move only the box, leaving the scene fixed: simulates an imprecise previous estimate."""
    return apply_motion(box, sample_motion(rng, max_shift, max_yaw))
