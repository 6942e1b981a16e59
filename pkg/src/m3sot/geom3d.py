"""Yaw-only oriented 3D boxes: membership, rigid updates, IoU and center distance."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # (w, l, h): extents along the box x, y, z axes
    yaw: float = 0.0

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if len(center) != 3 or len(size) != 3:
            raise ValueError("center and size need three components")
        if not all(s > 0 for s in size):
            raise ValueError(f"box size must be positive, got {size}")
        if not all(math.isfinite(v) for v in center + size + (self.yaw,)):
            raise ValueError("box has non-finite values")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    @property
    def volume(self) -> float:
        w, l, h = self.size
        return w * l * h

    def corners(self) -> np.ndarray:
        """The eight corners in world coordinates, shape (8, 3)."""
        w, l, h = self.size
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        local = signs * np.array([w, l, h]) / 2.0
        return from_box_frame(local, self)

    def bev_corners(self) -> np.ndarray:
        """Counter-clockwise footprint corners, shape (4, 2)."""
        w, l, _ = self.size
        local = np.array([[w, l], [-w, l], [-w, -l], [w, -l]], dtype=float) / 2.0
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center[:2])


@dataclass(frozen=True)
class RigidMotion:
    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    dtheta: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.dx, self.dy, self.dz, self.dtheta)):
            raise ValueError("motion has non-finite values")


def _rotation_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def to_box_frame(points, box: Box3D) -> np.ndarray:
    """Translate by -center and rotate by -yaw about z."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return (pts - np.asarray(box.center)) @ _rotation_z(box.yaw)


def from_box_frame(points, box: Box3D) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return pts @ _rotation_z(box.yaw).T + np.asarray(box.center)


def points_in_box(points, box: Box3D) -> np.ndarray:
    """Vectorized membership test; the boundary counts as inside."""
    local = to_box_frame(points, box)
    half = np.asarray(box.size) / 2.0
    return np.all(np.abs(local) <= half, axis=1)


def point_in_box(p, box: Box3D) -> bool:
    return bool(points_in_box(np.asarray(p, dtype=float).reshape(1, 3), box)[0])


def apply_motion(box: Box3D, m: RigidMotion) -> Box3D:
    cx, cy, cz = box.center
    return Box3D((cx + m.dx, cy + m.dy, cz + m.dz), box.size, box.yaw + m.dtheta)


def box_to_frame(box: Box3D, ref: Box3D) -> Box3D:
    """Express ``box`` in the canonical frame of ``ref``."""
    center = to_box_frame(np.asarray(box.center), ref)[0]
    return Box3D(center, box.size, box.yaw - ref.yaw)


def box_from_frame(box: Box3D, ref: Box3D) -> Box3D:
    center = from_box_frame(np.asarray(box.center), ref)[0]
    return Box3D(center, box.size, box.yaw + ref.yaw)


def _clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clipper``."""
    out = list(subject)
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        a, b = clipper[i], clipper[(i + 1) % n]
        edge = b - a
        inp, out = out, []

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        for j in range(len(inp)):
            cur, prev = inp[j], inp[j - 1]
            s_cur, s_prev = side(cur), side(prev)
            if s_cur >= 0:
                if s_prev < 0:
                    out.append(prev + (cur - prev) * (s_prev / (s_prev - s_cur)))
                out.append(cur)
            elif s_prev >= 0:
                out.append(prev + (cur - prev) * (s_prev / (s_prev - s_cur)))
    return np.array(out).reshape(-1, 2)


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    # clip in a fixed order so iou(a, b) == iou(b, a) bit-for-bit
    first, second = (a, b) if (a.center, a.size, a.yaw) <= (b.center, b.size, b.yaw) else (b, a)
    area = _polygon_area(_clip_polygon(first.bev_corners(), second.bev_corners()))
    return area if area >= 1e-12 else 0.0


def box_iou_3d(a: Box3D, b: Box3D) -> float:
    area = bev_intersection_area(a, b)
    if area == 0.0:
        return 0.0
    za0, za1 = a.center[2] - a.size[2] / 2, a.center[2] + a.size[2] / 2
    zb0, zb1 = b.center[2] - b.size[2] / 2, b.center[2] + b.size[2] / 2
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0:
        return 0.0
    inter = area * dz
    union = a.volume + b.volume - inter
    return float(min(max(inter / union, 0.0), 1.0))


def center_distance(a: Box3D, b: Box3D) -> float:
    """3D Euclidean distance between centers."""
    return math.dist(a.center, b.center)
