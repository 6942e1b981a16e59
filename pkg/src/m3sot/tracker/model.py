"""The learned tracker: backbone + transformer + locator behind one interface."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import numcore as nc
from ..backbone import FieldConfig, extract_features, init_backbone, mask_encoding, positional_encoding
from ..geom3d import Box3D, box_to_frame, points_in_box
from ..locator import ProposalSet, init_locator, locator_forward, proposals_from_votes
from ..numcore import ParameterStore, Tensor
from ..spaceformer import (HeadSchedule, LayerOutput, attend, attention_weights, forward, head_schedule,
                           init_attention_layer, init_spaceformer, make_pair, space_attention_layer)

PROPAGATION_MODES = ("many_to_one", "self_attention", "cross_attention")


@dataclass(frozen=True)
class ModelConfig:
    field: FieldConfig = field(default_factory=FieldConfig)
    layers: int = 4
    head_mode: str = "variable"
    propagation: str = "many_to_one"
    template_depths: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.propagation not in PROPAGATION_MODES:
            raise ValueError(f"unknown propagation mode {self.propagation!r}")
        self.schedule.validate(self.channels)

    @property
    def channels(self) -> int:
        return self.field.out_channels

    @property
    def schedule(self) -> HeadSchedule:
        return head_schedule(self.layers, self.channels, self.head_mode)

    def depth_for(self, k: int) -> int | None:
        if not self.template_depths:
            return None
        return self.template_depths[min(k, len(self.template_depths)) - 1]


@dataclass
class VersionOutput:
    """One version of the search area (one template, or one propagated chain)."""

    layers: list[LayerOutput]
    template_coords: np.ndarray
    search_coords: np.ndarray
    yaw_residual: Tensor
    confidence: Tensor
    source_template: int = 1

    @property
    def final(self) -> LayerOutput:
        return self.layers[-1]


def init_params(cfg: ModelConfig) -> ParameterStore:
    rng = np.random.default_rng(cfg.seed)
    store = ParameterStore()
    c = cfg.channels
    init_backbone(store, cfg.field, rng)
    init_spaceformer(store, c, cfg.layers, rng)
    init_locator(store, c, rng)
    if cfg.propagation == "self_attention":
        init_attention_layer(store, "prop.self", c, rng)
    elif cfg.propagation == "cross_attention":
        nc.init_layer_norm(store, "prop.cross.lnq", c)
        nc.init_layer_norm(store, "prop.cross.lnk", c)
        for name in ("q", "k", "v", "o"):
            nc.init_linear(store, f"prop.cross.{name}", c, c, rng, bias=name != "k")
    return store


class TrackerModel:
    def __init__(self, cfg: ModelConfig, params: ParameterStore | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)

    def with_params(self, params: ParameterStore) -> "TrackerModel":
        return TrackerModel(self.cfg, params)

    def encode(self, cloud, mask):
        return extract_features(cloud, mask, self.cfg.field, self.params)

    def forward_step(self, search_cloud, templates) -> list[VersionOutput]:
        """``templates`` is a most-recent-first list of (cloud, mask) in the search frame."""
        if not templates:
            raise ValueError("need at least one template")
        p = self.params
        s_coords, s_feats, _ = self.encode(search_cloud, np.full(len(search_cloud), 0.5))
        encoded = [self.encode(c, m) for c, m in templates]
        if self.cfg.propagation == "many_to_one":
            chains = [(k + 1, enc) for k, enc in enumerate(encoded)]
        else:
            chains = [(1, self._propagate(encoded))]
        out = []
        for k, (t_coords, t_feats, t_mask) in chains:
            pair = make_pair(t_coords, t_feats, t_mask, s_coords, s_feats, template_index=k)
            layers = forward(pair, self.cfg.schedule, p, depth=self.cfg.depth_for(k))
            feats, mask, centers = layers[-1].search()
            yaw, conf = locator_forward(feats, centers, mask, p)
            out.append(VersionOutput(layers, t_coords, s_coords, yaw, conf, k))
        return out

    def _propagate(self, encoded):
        """Pass cues frame by frame from the oldest template to the most recent one."""
        p = self.params
        chain = list(reversed(encoded))
        coords, feats, mask = chain[0]
        for nxt_coords, nxt_feats, nxt_mask in chain[1:]:
            if self.cfg.propagation == "self_attention":
                n = len(coords)
                x = nc.concat([feats, nxt_feats], axis=0)
                both = np.concatenate([coords, nxt_coords])
                pe = positional_encoding(both, p)
                me = mask_encoding(np.concatenate([mask, nxt_mask]), p)
                feats = space_attention_layer(x, pe, me, 1, p, "prop.self")[n:]
            else:
                q_in = nc.layer_norm(feats, p["prop.cross.lnq.gamma"], p["prop.cross.lnq.beta"])
                q_in = q_in + positional_encoding(coords, p)
                kv = nc.layer_norm(nxt_feats, p["prop.cross.lnk.gamma"], p["prop.cross.lnk.beta"])
                k_in = kv + positional_encoding(nxt_coords, p)
                w = attention_weights(nc.linear(q_in, p["prop.cross.q.w"], p["prop.cross.q.b"]),
                                      nc.linear(k_in, p["prop.cross.k.w"]), 1)
                msg = attend(w, nc.linear(kv, p["prop.cross.v.w"], p["prop.cross.v.b"]))
                feats = nxt_feats + nc.linear(msg, p["prop.cross.o.w"], p["prop.cross.o.b"])
            coords, mask = nxt_coords, nxt_mask
        return coords, feats, mask

    def propose_sets(self, search_cloud, templates, target_size, ref_box: Box3D | None = None,
                     gt_box: Box3D | None = None) -> list[ProposalSet]:
        versions = self.forward_step(search_cloud, templates)
        return [
            proposals_from_votes(v.final.search()[2].data, v.yaw_residual.data, v.confidence.data,
                                 target_size, 0.0, v.source_template)
            for v in versions
        ]


class OracleModel:
    """Stands in for the mask/center heads with ground truth.

    Every search point votes for the true center and yaw; the confidence is the
    true membership mask, so selection goes through the regular locator path.
    """

    needs_ground_truth = True

    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg or ModelConfig()

    def propose_sets(self, search_cloud, templates, target_size, ref_box: Box3D | None = None,
                     gt_box: Box3D | None = None) -> list[ProposalSet]:
        if gt_box is None or ref_box is None:
            raise ValueError("the oracle needs the reference and ground-truth boxes")
        local = box_to_frame(gt_box, ref_box)
        pts = np.asarray(search_cloud, dtype=float)
        n = len(pts)
        mask = points_in_box(pts, local).astype(float)
        centers = np.tile(np.asarray(local.center), (n, 1))
        yaw = np.full(n, local.yaw)
        return [proposals_from_votes(centers, yaw, mask, target_size, 0.0, k + 1)
                for k in range(max(1, len(templates)))]


def model_config_from(train_cfg) -> ModelConfig:
    """Build the network configuration carried inside a training configuration."""
    fc = FieldConfig(ratios=tuple(train_cfg.ratios), k=train_cfg.knn_k, channels=tuple(train_cfg.channels),
                     n_points=train_cfg.n_points, sampling=train_cfg.sampling, sampling_seed=train_cfg.seed)
    return ModelConfig(field=fc, layers=train_cfg.layers, head_mode=train_cfg.head_mode,
                       propagation=train_cfg.propagation, seed=train_cfg.seed)


__all__ = ["ModelConfig", "TrackerModel", "OracleModel", "VersionOutput", "init_params", "model_config_from"]
