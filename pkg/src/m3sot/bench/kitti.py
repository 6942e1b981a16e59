"""KITTI tracking-format import/export.

Scans are raw little-endian float32 quadruples (x, y, z, reflectance).  Label rows
follow the tracking devkit layout::

    frame track_id type truncated occluded alpha x1 y1 x2 y2 h w l x y z rotation_y [score]

with (x, y, z) the bottom-face center in camera coordinates.  The calibration
file holds 12 numbers: a row-major 3x4 [R|t] mapping camera to LiDAR
coordinates (pass ``lidar_to_camera=True`` if it holds the inverse, as KITTI's
``Tr_velo_cam`` does).

Boxes come out with the heading along the box y-axis (extent ``l``), so
``yaw = heading - pi/2``.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from ..geom3d import Box3D
from .tracklet import Tracklet


class KittiFormatError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


def read_scan(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise KittiFormatError(f"{path}: {len(raw)} bytes is not a whole number of 16-byte points")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4)[:, :3].astype(np.float64)


def write_scan(points, path, reflectance=None) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    refl = np.zeros(len(pts)) if reflectance is None else np.asarray(reflectance, dtype=float)
    quad = np.column_stack([pts, refl]).astype("<f4")
    Path(path).write_bytes(quad.tobytes())


def read_calibration(path, lidar_to_camera: bool = False) -> np.ndarray:
    """4x4 homogeneous camera-to-LiDAR transform."""
    p = Path(path) if path is not None else None
    if p is None or not p.exists():
        raise CalibrationError(f"calibration file not found: {path}")
    vals = p.read_text().replace(",", " ").split()
    if len(vals) != 12:
        raise CalibrationError(f"{path}: expected 12 numbers (3x4 matrix), got {len(vals)}")
    m = np.eye(4)
    m[:3, :4] = np.array(vals, dtype=float).reshape(3, 4)
    return np.linalg.inv(m) if lidar_to_camera else m


def write_calibration(matrix, path) -> None:
    m = np.asarray(matrix, dtype=float)[:3, :4]
    Path(path).write_text("\n".join(" ".join(repr(float(v)) for v in row) for row in m) + "\n")


def label_to_box(h: float, w: float, l: float, x: float, y: float, z: float, ry: float,
                 cam_to_lidar: np.ndarray) -> Box3D:
    center_cam = np.array([x, y - h / 2.0, z, 1.0])  # camera y points down
    center = cam_to_lidar @ center_cam
    heading_cam = np.array([math.cos(ry), 0.0, -math.sin(ry)])
    heading = cam_to_lidar[:3, :3] @ heading_cam
    yaw = math.atan2(heading[1], heading[0]) - math.pi / 2.0
    return Box3D(center[:3], (w, l, h), yaw)


def box_to_label(box: Box3D, cam_to_lidar: np.ndarray) -> tuple[float, ...]:
    """Inverse of :func:`label_to_box`: (h, w, l, x, y, z, rotation_y)."""
    w, l, h = box.size
    lidar_to_cam = np.linalg.inv(cam_to_lidar)
    c = lidar_to_cam @ np.array([*box.center, 1.0])
    heading = np.array([math.cos(box.yaw + math.pi / 2), math.sin(box.yaw + math.pi / 2), 0.0])
    hc = lidar_to_cam[:3, :3] @ heading
    ry = math.atan2(-hc[2], hc[0])
    return h, w, l, c[0], c[1] + h / 2.0, c[2], ry


def parse_label_rows(path, track_id: int) -> dict[int, tuple[str, tuple[float, ...]]]:
    rows = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 17:
            raise KittiFormatError(f"{path}: line {lineno}: expected >= 17 fields, got {len(parts)}")
        try:
            frame, tid = int(parts[0]), int(parts[1])
            vals = tuple(float(v) for v in parts[10:17])
        except ValueError as exc:
            raise KittiFormatError(f"{path}: line {lineno}: {exc}") from exc
        if tid == track_id:
            rows[frame] = (parts[2], vals)
    return rows


def import_kitti(velodyne_dir, label_file, track_id: int, calib_file, lidar_to_camera: bool = False) -> Tracklet:
    cam_to_lidar = read_calibration(calib_file, lidar_to_camera)
    rows = parse_label_rows(label_file, track_id)
    if not rows:
        raise KittiFormatError(f"track {track_id} not found in {label_file}")
    frames, category = [], None
    for frame in sorted(rows):
        category, (h, w, l, x, y, z, ry) = rows[frame][0], rows[frame][1]
        scan = Path(velodyne_dir) / f"{frame:06d}.bin"
        frames.append((read_scan(scan), label_to_box(h, w, l, x, y, z, ry, cam_to_lidar)))
    return Tracklet(frames, category or "Unknown", str(track_id))


def export_kitti(tracklet: Tracklet, out_dir, track_id: int, cam_to_lidar=None) -> dict[str, Path]:
    """Write scans, a label file and a calibration file that :func:`import_kitti` reads back."""
    out = Path(out_dir)
    velo = out / "velodyne"
    velo.mkdir(parents=True, exist_ok=True)
    m = np.eye(4) if cam_to_lidar is None else np.asarray(cam_to_lidar, dtype=float)
    lines = []
    for i, (pts, box) in enumerate(tracklet.frames):
        write_scan(pts, velo / f"{i:06d}.bin")
        h, w, l, x, y, z, ry = box_to_label(box, m)
        fields = [str(i), str(track_id), tracklet.category, "0", "0", "0", "0", "0", "0", "0"]
        fields += [repr(float(v)) for v in (h, w, l, x, y, z, ry)]
        lines.append(" ".join(fields))
    label = out / "label.txt"
    label.write_text("\n".join(lines) + "\n")
    calib = out / "calib.txt"
    write_calibration(m, calib)
    return {"velodyne": velo, "label": label, "calib": calib}
