"""Multi-field point backbone: strided range sampling between EdgeConv stages.

Each stage builds a fresh k-nearest-neighbor graph on the current coordinates,
aggregates edge features with a shared linear map + ReLU + max, and then keeps
every ``step``-th point.  Targetness masks ride along through the same indices.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import numcore as nc
from .geom3d import Box3D, points_in_box
from .numcore import ParameterStore, Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FieldConfig:
    ratios: tuple[int, ...] = (2, 4, 8)
    k: int = 8
    channels: tuple[int, ...] = (64, 128, 128)
    n_points: int = 1024
    sampling: str = "range"  # or "random"
    sampling_seed: int = 0

    def __post_init__(self):
        ratios = tuple(int(r) for r in self.ratios)
        object.__setattr__(self, "ratios", ratios)
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not ratios or any(r < 1 for r in ratios):
            raise ConfigError(f"ratios must be a nonempty list of divisors >= 1, got {ratios}")
        prev = 1
        for r in ratios:
            if r % prev:
                raise ConfigError(f"each ratio must be a multiple of the previous one, got {ratios}")
            prev = r
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not self.channels or any(c < 1 for c in self.channels):
            raise ConfigError("channels must be positive")
        if self.sampling not in ("range", "random"):
            raise ConfigError(f"unknown sampling mode {self.sampling!r}")

    @property
    def steps(self) -> list[int]:
        """Per-stage stride; ratios are cumulative relative to the input size."""
        out, prev = [], 1
        for r in self.ratios:
            out.append(r // prev)
            prev = r
        return out

    @property
    def widths(self) -> list[int]:
        n = len(self.ratios)
        if len(self.channels) >= n:
            return list(self.channels[-n:])
        return [self.channels[0]] * (n - len(self.channels)) + list(self.channels)

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    @property
    def out_points(self) -> int:
        return -(-self.n_points // self.ratios[-1])


# ----------------------------------------------------------------------------
# masks


def compute_targetness_mask(cloud, box: Box3D) -> np.ndarray:
    return points_in_box(cloud, box).astype(float)


def init_search_mask(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("mask length must be >= 1")
    return np.full(n, 0.5)


# ----------------------------------------------------------------------------
# sampling and neighborhoods


def _pad_to_multiple(n: int, ratio: int) -> np.ndarray:
    idx = np.arange(n)
    rem = n % ratio
    if rem:
        idx = np.concatenate([idx, np.full(ratio - rem, n - 1)])
    return idx


def range_indices(n: int, ratio: int) -> np.ndarray:
    if ratio < 1:
        raise ConfigError(f"sampling ratio must be >= 1, got {ratio}")
    return _pad_to_multiple(n, ratio)[::ratio]


def random_indices(n: int, ratio: int, rng: np.random.Generator) -> np.ndarray:
    if ratio < 1:
        raise ConfigError(f"sampling ratio must be >= 1, got {ratio}")
    m = -(-n // ratio)
    return np.sort(rng.choice(n, size=m, replace=False))


def range_sample(cloud, feats, mask, ratio: int):
    """Keep rows 0, ratio, 2*ratio, ... of coords, features and mask alike."""
    cloud = np.asarray(cloud)
    idx = range_indices(len(cloud), ratio)
    return _gather(cloud, feats, mask, idx)


def _gather(cloud, feats, mask, idx):
    if isinstance(feats, Tensor):
        out_feats = nc.gather_rows(feats, idx)
    else:
        out_feats = None if feats is None else np.asarray(feats)[idx]
    out_mask = None if mask is None else np.asarray(mask)[idx]
    return np.asarray(cloud)[idx], out_feats, out_mask


def _sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # coordinate-wise accumulation so every code path rounds identically
    d = (a[..., 0] - b[..., 0]) ** 2
    d = d + (a[..., 1] - b[..., 1]) ** 2
    return d + (a[..., 2] - b[..., 2]) ** 2


def pairwise_sq_dists(cloud: np.ndarray, rows=None) -> np.ndarray:
    cloud = np.asarray(cloud, dtype=float)
    src = cloud if rows is None else cloud[rows]
    return _sq_dist(src[:, None, :], cloud[None, :, :])


def _select_k(d: np.ndarray, k: int) -> np.ndarray:
    """k smallest entries per row of d, ordered by (distance, column index)."""
    r = len(d)
    part = np.argpartition(d, k - 1, axis=1)[:, :k]
    kth = np.take_along_axis(d, part, axis=1).max(axis=1, keepdims=True)
    below = d < kth
    tied = d == kth
    quota = k - below.sum(axis=1, keepdims=True)
    keep = below | (tied & (np.cumsum(tied, axis=1) <= quota))
    chosen = np.nonzero(keep)[1].reshape(r, k)  # row-major, so ascending index per row
    order = np.argsort(np.take_along_axis(d, chosen, axis=1), axis=1, kind="stable")
    return np.take_along_axis(chosen, order, axis=1)


def knn_indices(cloud, k: int, slack: int = 4) -> np.ndarray:
    """Indices of the k nearest points per row (self included), ties to the lower index.

    A k-d tree proposes k + slack candidates per row; their distances are
    recomputed exactly, and any row whose candidate list might cut through a
    tie falls back to a dense exact scan.
    """
    cloud = np.asarray(cloud, dtype=float)
    n = len(cloud)
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points {n}")
    m = k + slack
    if m >= n or n <= 128:
        if k == n:
            return np.argsort(pairwise_sq_dists(cloud), axis=1, kind="stable")
        return _select_k(pairwise_sq_dists(cloud), k)
    _, cand = cKDTree(cloud).query(cloud, k=m)
    exact = _sq_dist(cloud[cand], cloud[:, None, :])
    order = np.lexsort((cand, exact))
    cand = np.take_along_axis(cand, order, axis=1)
    exact = np.take_along_axis(exact, order, axis=1)
    kth = exact[:, k - 1]
    unsafe = ~(exact[:, -1] > kth * (1.0 + 1e-9) + 1e-300)
    out = cand[:, :k].copy()
    if unsafe.any():
        rows = np.flatnonzero(unsafe)
        out[rows] = _select_k(pairwise_sq_dists(cloud, rows), k)
    return out


# ----------------------------------------------------------------------------
# learned blocks


def init_edgeconv(store: ParameterStore, prefix: str, c_in: int, c_out: int, rng) -> None:
    nc.init_linear(store, prefix, 2 * c_in, c_out, rng)


def edgeconv(feats, neighbors: np.ndarray, params: ParameterStore, prefix: str) -> Tensor:
    """max_j ReLU(W [f_i || f_j - f_i] + b) over each point's neighbor list.

    The concatenated edge map splits as f_i (W_a - W_b) + f_j W_b, so the
    linear map runs once per point and only the projected rows are gathered.
    ReLU commutes with max, so it is applied after the reduction.
    """
    feats = nc.as_tensor(feats)
    c_in = feats.shape[1]
    w, b = params[f"{prefix}.w"], params[f"{prefix}.b"]
    w_self, w_nbr = w[:c_in], w[c_in:]
    center = nc.linear(feats, w_self - w_nbr, b)
    proj = nc.linear(feats, w_nbr)
    edges = nc.gather_rows(proj, neighbors)  # N x k x C_out
    best = nc.max(edges, axis=1)
    return nc.relu(center + best)


def init_pointwise_embedding(store: ParameterStore, prefix: str, d_in: int, hidden: int, c: int, rng) -> None:
    nc.init_linear(store, f"{prefix}.l1", d_in, hidden, rng)
    nc.init_linear(store, f"{prefix}.l2", hidden, c, rng)


def _pointwise_embedding(x, params: ParameterStore, prefix: str) -> Tensor:
    h = nc.relu(nc.linear(x, params[f"{prefix}.l1.w"], params[f"{prefix}.l1.b"]))
    return nc.linear(h, params[f"{prefix}.l2.w"], params[f"{prefix}.l2.b"])


def positional_encoding(cloud, params: ParameterStore, prefix: str = "pe") -> Tensor:
    return _pointwise_embedding(nc.as_tensor(np.asarray(cloud, dtype=float).reshape(-1, 3)), params, prefix)


def mask_encoding(mask, params: ParameterStore, prefix: str = "me") -> Tensor:
    m = mask if isinstance(mask, Tensor) else nc.as_tensor(np.asarray(mask, dtype=float))
    return _pointwise_embedding(nc.reshape(m, (-1, 1)), params, prefix)


def init_backbone(store: ParameterStore, cfg: FieldConfig, rng, prefix: str = "backbone") -> None:
    c_in = 3
    for s, width in enumerate(cfg.widths):
        init_edgeconv(store, f"{prefix}.stage{s}", c_in, width, rng)
        c_in = width


def extract_features(cloud, mask, cfg: FieldConfig, params: ParameterStore, prefix: str = "backbone"):
    """Run all stages; returns (coords, features Tensor, mask) at the sampled points."""
    cloud = np.asarray(cloud, dtype=float)
    if cloud.shape != (cfg.n_points, 3):
        raise ConfigError(f"expected {cfg.n_points} x 3 input, got {cloud.shape}")
    mask = np.asarray(mask, dtype=float)
    if mask.shape != (cfg.n_points,):
        raise ConfigError(f"mask length {mask.shape} does not match {cfg.n_points} points")
    rng = np.random.default_rng(cfg.sampling_seed) if cfg.sampling == "random" else None
    feats: Tensor = nc.as_tensor(cloud)
    coords = cloud
    for s, step in enumerate(cfg.steps):
        nbrs = knn_indices(coords, min(cfg.k, len(coords)))
        feats = edgeconv(feats, nbrs, params, f"{prefix}.stage{s}")
        if cfg.sampling == "random":
            idx = random_indices(len(coords), step, rng)
        else:
            idx = range_indices(len(coords), step)
        coords, feats, mask = _gather(coords, feats, mask, idx)
    return coords, feats, mask
