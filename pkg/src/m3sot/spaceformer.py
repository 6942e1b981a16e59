"""Hybrid template/search transformer with per-layer mask and center taps."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .backbone import (ConfigError, init_pointwise_embedding, init_search_mask, mask_encoding,
                       positional_encoding)
from .numcore import ParameterStore, Tensor


@dataclass
class TemplateSearchPair:
    template_feats: Tensor
    search_feats: Tensor
    template_mask: np.ndarray
    search_mask: np.ndarray
    template_coords: np.ndarray
    search_coords: np.ndarray
    template_index: int = 1

    def __post_init__(self):
        tf, sf = self.template_feats, self.search_feats
        if tf.shape != sf.shape:
            raise ValueError(f"template/search feature shapes differ: {tf.shape} vs {sf.shape}")
        n = tf.shape[0]
        for name in ("template_mask", "search_mask"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length does not match {n} rows")
        for name in ("template_coords", "search_coords"):
            if np.shape(getattr(self, name)) != (n, 3):
                raise ValueError(f"{name} must be {n} x 3")

    @property
    def n(self) -> int:
        return self.template_feats.shape[0]


@dataclass(frozen=True)
class HeadSchedule:
    layer_heads: tuple[int, ...]

    @property
    def layers(self) -> int:
        return len(self.layer_heads)

    def validate(self, channels: int) -> None:
        for h in self.layer_heads:
            if h < 1 or channels % h:
                raise ConfigError(f"{h} heads do not divide {channels} channels")


def head_schedule(layers: int, channels: int, mode: str = "variable") -> HeadSchedule:
    """Fixed: one head everywhere.  Variable: 1, 2, 4, ... heads, capped by what divides C."""
    if layers < 1:
        raise ConfigError("need at least one layer")
    if mode == "fixed":
        return HeadSchedule((1,) * layers)
    if mode != "variable":
        raise ConfigError(f"unknown head mode {mode!r}")
    cap = channels & -channels  # largest power of two dividing C
    return HeadSchedule(tuple(min(2 ** l, cap) for l in range(layers)))


@dataclass
class LayerOutput:
    feats: Tensor
    mask_pred: Tensor
    center_pred: Tensor
    n: int = field(default=0)

    def template(self):
        return self.feats[: self.n], self.mask_pred[: self.n], self.center_pred[: self.n]

    def search(self):
        return self.feats[self.n:], self.mask_pred[self.n:], self.center_pred[self.n:]


# ----------------------------------------------------------------------------
# parameters


def init_attention_layer(store: ParameterStore, prefix: str, c: int, rng, ffn_hidden: int | None = None) -> None:
    hidden = ffn_hidden or 2 * c
    nc.init_layer_norm(store, f"{prefix}.ln1", c)
    for name in ("q", "k", "v", "vm", "o", "om"):
        # a key bias only shifts each score row by a constant, which softmax ignores
        nc.init_linear(store, f"{prefix}.{name}", c, c, rng, bias=name != "k")
    nc.init_layer_norm(store, f"{prefix}.ln2", c)
    nc.init_linear(store, f"{prefix}.ffn1", c, hidden, rng)
    nc.init_linear(store, f"{prefix}.ffn2", hidden, c, rng)


def init_head_mlp(store: ParameterStore, prefix: str, c_in: int, hidden: int, c_out: int, rng) -> None:
    nc.init_linear(store, f"{prefix}.l1", c_in, hidden, rng)
    nc.init_layer_norm(store, f"{prefix}.n1", hidden)
    nc.init_linear(store, f"{prefix}.l2", hidden, hidden, rng)
    nc.init_layer_norm(store, f"{prefix}.n2", hidden)
    nc.init_linear(store, f"{prefix}.l3", hidden, c_out, rng)


def head_mlp(x, params: ParameterStore, prefix: str) -> Tensor:
    """Three linear layers; per-row normalization and ReLU between them."""
    h = nc.linear(x, params[f"{prefix}.l1.w"], params[f"{prefix}.l1.b"])
    h = nc.relu(nc.layer_norm(h, params[f"{prefix}.n1.gamma"], params[f"{prefix}.n1.beta"]))
    h = nc.linear(h, params[f"{prefix}.l2.w"], params[f"{prefix}.l2.b"])
    h = nc.relu(nc.layer_norm(h, params[f"{prefix}.n2.gamma"], params[f"{prefix}.n2.beta"]))
    return nc.linear(h, params[f"{prefix}.l3.w"], params[f"{prefix}.l3.b"])


def init_spaceformer(store: ParameterStore, c: int, layers: int, rng, prefix: str = "sf",
                     embed_hidden: int | None = None, head_hidden: int | None = None) -> None:
    eh = embed_hidden or c
    init_pointwise_embedding(store, "pe", 3, eh, c, rng)
    init_pointwise_embedding(store, "me", 1, eh, c, rng)
    for l in range(layers):
        init_attention_layer(store, f"{prefix}.layer{l}", c, rng)
    hh = head_hidden or c
    init_head_mlp(store, "head.mask", c, hh, 1, rng)
    init_head_mlp(store, "head.center", c, hh, 3, rng)


# ----------------------------------------------------------------------------
# blocks


def geoformer_concat(pair: TemplateSearchPair, params: ParameterStore):
    """Stack template rows above search rows for features, masks and encodings."""
    n = pair.n
    feats = nc.concat([pair.template_feats, pair.search_feats], axis=0)
    mask = np.concatenate([np.asarray(pair.template_mask, dtype=float),
                           np.asarray(pair.search_mask, dtype=float)])
    coords = np.concatenate([pair.template_coords, pair.search_coords], axis=0)
    pe = positional_encoding(coords, params)
    me = mask_encoding(mask, params)
    assert feats.shape[0] == 2 * n
    return feats, mask, pe, me


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, c = x.shape
    return nc.transpose(nc.reshape(x, (n, heads, c // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, n, d = x.shape
    return nc.reshape(nc.transpose(x, (1, 0, 2)), (n, h * d))


def attention_weights(q: Tensor, k: Tensor, heads: int) -> Tensor:
    """softmax(Q_i K_i^T / sqrt(d_h)) per head, shape (H, rows_q, rows_k)."""
    d_h = q.shape[1] // heads
    qh, kh = _split_heads(q, heads), _split_heads(k, heads)
    return nc.dot_softmax(qh, kh, 1.0 / math.sqrt(d_h))


def attend(weights: Tensor, v: Tensor) -> Tensor:
    return _merge_heads(nc.matmul(weights, _split_heads(v, weights.shape[0])))


def _lin(x, params, name):
    b = f"{name}.b"
    return nc.linear(x, params[f"{name}.w"], params[b] if b in params else None)


def space_attention_layer(feats, pe, me, heads: int, params: ParameterStore, prefix: str) -> Tensor:
    """One pre-norm layer: two attention streams (features and mask embedding) plus FFN.

    Both streams share the query/key projections, hence one set of attention
    weights; each has its own value and output projection.
    """
    feats, pe, me = nc.as_tensor(feats), nc.as_tensor(pe), nc.as_tensor(me)
    c = feats.shape[1]
    if heads < 1 or c % heads:
        raise ConfigError(f"{heads} heads do not divide {c} channels")
    x = nc.layer_norm(feats, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"])
    qk = x + pe
    weights = attention_weights(_lin(qk, params, f"{prefix}.q"), _lin(qk, params, f"{prefix}.k"), heads)
    feat_stream = _lin(attend(weights, _lin(x, params, f"{prefix}.v")), params, f"{prefix}.o")
    mask_stream = _lin(attend(weights, _lin(me, params, f"{prefix}.vm")), params, f"{prefix}.om")
    y = feats + feat_stream + mask_stream
    h = nc.layer_norm(y, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])
    h = _lin(nc.relu(_lin(h, params, f"{prefix}.ffn1")), params, f"{prefix}.ffn2")
    return y + h


def predict_layer_heads(feats, params: ParameterStore, coords=None):
    """Per-row mask probability and center vote.

    With ``coords`` the center MLP output is an offset from each row's own
    point, which is what the stacked model uses.
    """
    logits = head_mlp(feats, params, "head.mask")
    mask = nc.sigmoid(nc.reshape(logits, (-1,)))
    center = head_mlp(feats, params, "head.center")
    if coords is not None:
        center = center + np.asarray(coords, dtype=float)
    return mask, center


def forward(pair: TemplateSearchPair, schedule: HeadSchedule, params: ParameterStore,
            prefix: str = "sf", depth: int | None = None) -> list[LayerOutput]:
    """All layer outputs for one template/search pair.

    ``depth`` optionally truncates the schedule for this template.
    """
    c = pair.template_feats.shape[1]
    schedule.validate(c)
    layers = schedule.layers if depth is None else depth
    if not 1 <= layers <= schedule.layers:
        raise ConfigError(f"depth {layers} outside 1..{schedule.layers}")
    feats, _, pe, me = geoformer_concat(pair, params)
    coords = np.concatenate([pair.template_coords, pair.search_coords])
    outputs = []
    for l in range(layers):
        feats = space_attention_layer(feats, pe, me, schedule.layer_heads[l], params, f"{prefix}.layer{l}")
        mask_pred, center_pred = predict_layer_heads(feats, params, coords)
        outputs.append(LayerOutput(feats, mask_pred, center_pred, pair.n))
    return outputs


def make_pair(template_coords, template_feats, template_mask, search_coords, search_feats,
              template_index: int = 1) -> TemplateSearchPair:
    """Pair a template with a search frame whose mask is the unknown 0.5 state."""
    return TemplateSearchPair(
        template_feats=nc.as_tensor(template_feats),
        search_feats=nc.as_tensor(search_feats),
        template_mask=np.asarray(template_mask, dtype=float),
        search_mask=init_search_mask(len(search_coords)),
        template_coords=np.asarray(template_coords, dtype=float),
        search_coords=np.asarray(search_coords, dtype=float),
        template_index=template_index,
    )
