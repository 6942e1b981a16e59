"""Point-vote localization head and cross-template proposal selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .geom3d import Box3D
from .numcore import ParameterStore
from .spaceformer import head_mlp, init_head_mlp


@dataclass(frozen=True)
class Proposal:
    box: Box3D
    confidence: float
    source_template: int = 1
    point_index: int = 0


@dataclass(frozen=True)
class ProposalSet:
    proposals: tuple[Proposal, ...]

    def __post_init__(self):
        sizes = {p.box.size for p in self.proposals}
        if len(sizes) > 1:
            raise ValueError("proposals in one set must share the target size")

    def __len__(self) -> int:
        return len(self.proposals)

    def __iter__(self):
        return iter(self.proposals)


def init_locator(store: ParameterStore, c: int, rng, hidden: int | None = None, prefix: str = "loc") -> None:
    init_head_mlp(store, prefix, c + 4, hidden or c, 2, rng)


def locator_forward(feats, centers, mask, params: ParameterStore, prefix: str = "loc"):
    """Differentiable part of the head: (yaw residual, confidence) per point.

    confidence = logistic(score) * mask, so points the mask rules out never win.
    """
    feats, centers, mask = nc.as_tensor(feats), nc.as_tensor(centers), nc.as_tensor(mask)
    if feats.shape[0] == 0:
        raise ValueError("locator needs at least one point")
    x = nc.concat([feats, centers, nc.reshape(mask, (-1, 1))], axis=1)
    out = head_mlp(x, params, prefix)
    yaw_residual = out[:, 0]
    confidence = nc.sigmoid(out[:, 1]) * mask
    return yaw_residual, confidence


def proposals_from_votes(centers, yaw_residual, confidence, target_size, ref_yaw: float = 0.0,
                         source_template: int = 1) -> ProposalSet:
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    yaw_residual = np.asarray(yaw_residual, dtype=float).reshape(-1)
    confidence = np.asarray(confidence, dtype=float).reshape(-1)
    if len(centers) == 0:
        raise ValueError("locator needs at least one point")
    return ProposalSet(tuple(
        Proposal(Box3D(centers[i], target_size, ref_yaw + yaw_residual[i]), float(confidence[i]),
                 source_template, i)
        for i in range(len(centers))
    ))


def propose(feats, centers, mask, target_size, params: ParameterStore, ref_yaw: float = 0.0,
            source_template: int = 1, prefix: str = "loc") -> ProposalSet:
    """Scored boxes, one per search point, in the canonical frame."""
    yaw_residual, confidence = locator_forward(feats, centers, mask, params, prefix)
    return proposals_from_votes(nc.as_tensor(centers).data, yaw_residual.data, confidence.data,
                                target_size, ref_yaw, source_template)


def select_best(sets) -> Proposal:
    """Highest confidence overall; ties go to the more recent template, then the lower point index."""
    best = None
    for k, pset in enumerate(sets):
        for i, p in enumerate(pset):
            key = (-p.confidence, k, i)
            if best is None or key < best[0]:
                best = (key, p)
    if best is None:
        raise ValueError("no proposals to select from")
    return best[1]
