"""Tracklets and their JSONL file format.

Line 1 is a header ``{"id": ..., "category": ...}``; each further line is one
frame ``{"points": [[x, y, z], ...], "box": {"center": [...], "size": [...], "yaw": r}}``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..geom3d import Box3D


class TrackletFormatError(ValueError):
    pass


@dataclass
class Tracklet:
    frames: list[tuple[np.ndarray, Box3D]]
    category: str = "Car"
    id: str = "0"

    def __post_init__(self):
        if len(self.frames) < 2:
            raise TrackletFormatError("a tracklet needs at least two frames")
        sizes = {box.size for _, box in self.frames}
        if len(sizes) != 1:
            raise TrackletFormatError(f"ground-truth size changes within tracklet {self.id}: {sorted(sizes)}")
        self.frames = [(np.asarray(p, dtype=float).reshape(-1, 3), b) for p, b in self.frames]

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def boxes(self) -> list[Box3D]:
        return [b for _, b in self.frames]

    @property
    def target_size(self):
        return self.frames[0][1].size


def box_to_json(box: Box3D) -> dict:
    return {"center": list(box.center), "size": list(box.size), "yaw": box.yaw}


def box_from_json(obj: dict) -> Box3D:
    return Box3D(tuple(obj["center"]), tuple(obj["size"]), float(obj["yaw"]))


def save_tracklet(tracklet: Tracklet, path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"id": tracklet.id, "category": tracklet.category}) + "\n")
        for pts, box in tracklet.frames:
            # repr-exact floats keep the round trip lossless
            fh.write(json.dumps({"points": pts.tolist(), "box": box_to_json(box)}) + "\n")


def load_tracklet(path) -> Tracklet:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].strip():
        raise TrackletFormatError(f"{path}: line 1: empty file or missing header")
    try:
        header = json.loads(lines[0])
        tid, category = str(header["id"]), str(header["category"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise TrackletFormatError(f"{path}: line 1: bad header ({exc})") from exc
    frames = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            pts = np.asarray(obj["points"], dtype=float)
            if pts.size == 0:
                pts = pts.reshape(0, 3)
            if pts.ndim != 2 or pts.shape[1] != 3:
                raise ValueError(f"points must be N x 3, got shape {pts.shape}")
            frames.append((pts, box_from_json(obj["box"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise TrackletFormatError(f"{path}: line {lineno}: {exc}") from exc
    return Tracklet(frames, category, tid)


def save_dataset(tracklets, directory) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in tracklets:
        p = d / f"{t.id}.jsonl"
        save_tracklet(t, p)
        paths.append(p)
    return paths


def load_dataset(directory) -> list[Tracklet]:
    return [load_tracklet(p) for p in sorted(Path(directory).glob("*.jsonl"))]
