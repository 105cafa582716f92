"""Query refinement decoder and mask module."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .backbone import FeaturePyramid
from .errors import ConfigError, UsageError
from .geometry import farthest_point_sampling, pool_mask_to_resolution, positional_encoding, scale_to_unit_box


class QueryInit(str, Enum):
    PARAMETRIC = "parametric"
    FPS_ZEROS = "fps-zeros"
    FPS_FEATURES = "fps-features"

    @classmethod
    def parse(cls, value) -> "QueryInit":
        aliases = {"1": cls.PARAMETRIC, "2": cls.FPS_ZEROS, "3": cls.FPS_FEATURES}
        if isinstance(value, cls):
            return value
        key = str(value).strip()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown query init mode {value!r}") from None


@dataclass
class DecoderConfig:
    num_queries: int = 20
    heads: int = 8
    ffn_dim: int = 128
    levels_attended: int = 4
    iterations: int = 3
    voxel_sample_limit: int = 1024
    num_classes: int = 4
    dim: int = 32
    self_attention: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.num_queries < 1 or self.num_classes < 1:
            raise ConfigError("need at least one query and one class")
        if self.levels_attended < 0 or self.iterations < 0:
            raise ConfigError("levels_attended and iterations must be non-negative")
        if self.voxel_sample_limit < 1:
            raise ConfigError("voxel_sample_limit must be >= 1")

    @property
    def num_layers(self) -> int:
        return self.levels_attended * self.iterations

    def level_schedule(self, depth: int) -> list:
        """Pyramid level visited by each decoder layer: coarsest first, repeated per iteration."""
        if self.levels_attended > depth:
            raise ConfigError(f"cannot attend to {self.levels_attended} levels of a depth-{depth} pyramid")
        one_pass = list(range(depth, depth - self.levels_attended, -1))
        return one_pass * self.iterations


@dataclass
class InstanceQuerySet:
    X: ad.Tensor
    pos_emb: ad.Tensor
    init_mode: QueryInit
    voxel_index: np.ndarray | None = None


@dataclass
class PredictionSet:
    class_logits: ad.Tensor  # (K, C+1)
    heatmap: ad.Tensor  # (K, M0)

    @property
    def binary_mask(self) -> np.ndarray:
        return self.heatmap.data > 0.5

    def class_probs(self) -> np.ndarray:
        return ad._softmax_rows(self.class_logits.data)


# ------------------------------------------------------------------ parameters


def _dense(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, fan_out)), np.zeros(fan_out)


def _attn_params(p, prefix, rng, d):
    p[f"{prefix}.ln_g"], p[f"{prefix}.ln_b"] = np.ones(d), np.zeros(d)
    for name in ("q", "k", "v", "o"):
        p[f"{prefix}.w{name}"], p[f"{prefix}.b{name}"] = _dense(rng, d, d)


def init_decoder_params(cfg: DecoderConfig, rng: np.random.Generator, mode: QueryInit) -> dict:
    d = cfg.dim
    p = {}
    for layer in range(cfg.levels_attended):
        _attn_params(p, f"decoder.layer{layer}.cross", rng, d)
        _attn_params(p, f"decoder.layer{layer}.self", rng, d)
        pre = f"decoder.layer{layer}.ffn"
        p[f"{pre}.ln_g"], p[f"{pre}.ln_b"] = np.ones(d), np.zeros(d)
        p[f"{pre}.w1"], p[f"{pre}.b1"] = _dense(rng, d, cfg.ffn_dim)
        p[f"{pre}.w2"], p[f"{pre}.b2"] = _dense(rng, cfg.ffn_dim, d)
    p["decoder.norm.ln_g"], p["decoder.norm.ln_b"] = np.ones(d), np.zeros(d)
    for i in (1, 2, 3):
        p[f"decoder.mask_mlp.w{i}"], p[f"decoder.mask_mlp.b{i}"] = _dense(rng, d, d)
    p["decoder.class.w"], p["decoder.class.b"] = _dense(rng, d, cfg.num_classes + 1)
    if QueryInit.parse(mode) is QueryInit.PARAMETRIC:
        p["decoder.query.feat"] = rng.normal(0.0, 1.0, size=(cfg.num_queries, d))
        p["decoder.query.pos"] = rng.normal(0.0, 1.0, size=(cfg.num_queries, d))
    return p


# ------------------------------------------------------------------ queries


def encoding_box(pyramid: FeaturePyramid) -> tuple:
    """Half-open box, in level-0 voxel units, covering every level's cells.

    The coarsest cells contain all finer ones, so every voxel centre at any
    level lies strictly inside and the period-2 encoding never aliases.
    """
    r = len(pyramid.coords) - 1
    c = np.asarray(pyramid.coords[r], dtype=np.float64)
    return c.min(axis=0) * 2 ** r, (c.max(axis=0) + 1.0) * 2 ** r


def voxel_positional_encodings(pyramid: FeaturePyramid, dim: int) -> list:
    """Fourier encodings of every level's voxel centres, scaled by :func:`encoding_box`."""
    lo, hi = encoding_box(pyramid)
    out = []
    for r, c in enumerate(pyramid.coords):
        centres = (c.astype(np.float64) + 0.5) * 2 ** r
        out.append(positional_encoding(scale_to_unit_box(centres, lo, hi), dim))
    return out


def init_queries(mode, pyramid: FeaturePyramid, num_queries: int, params: dict, dim: int) -> InstanceQuerySet:
    """Build the initial query features and their fixed positional embeddings."""
    mode = QueryInit.parse(mode)
    if mode is QueryInit.PARAMETRIC:
        feat = params["decoder.query.feat"]
        if feat.shape[0] != num_queries:
            raise UsageError("parametric queries have a fixed count; retrain to change it")
        return InstanceQuerySet(feat, params["decoder.query.pos"], mode)
    coords0 = pyramid.coords[0]
    if num_queries > len(coords0):
        raise UsageError(f"{num_queries} queries requested but the scene has {len(coords0)} voxels")
    centres = coords0.astype(np.float64) + 0.5
    idx = farthest_point_sampling(centres, num_queries)
    lo, hi = encoding_box(pyramid)
    pos = ad.constant(positional_encoding(scale_to_unit_box(centres[idx], lo, hi), dim))
    if mode is QueryInit.FPS_ZEROS:
        X = ad.constant(np.zeros((num_queries, dim)))
    else:
        X = ad.take_rows(pyramid.feats_proj[0], idx)
    return InstanceQuerySet(X, pos, mode, idx)


# ------------------------------------------------------------------ blocks


def _ln(x, params, prefix):
    return ad.layer_norm(x, params[f"{prefix}.ln_g"], params[f"{prefix}.ln_b"])


def multi_head_attention(q_in, k_in, v_in, params, prefix, heads, additive_mask=None, return_weights=False):
    """softmax(Q K^T / sqrt(d_head) + mask) V per head, then the output projection."""
    Q = ad.linear(q_in, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    K = ad.linear(k_in, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    V = ad.linear(v_in, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    dh = Q.shape[1] // heads
    if additive_mask is None:
        additive_mask = np.zeros((Q.shape[0], K.shape[0]))
    outs, weights = [], []
    for q, k, v in zip(ad.split_columns(Q, heads), ad.split_columns(K, heads), ad.split_columns(V, heads)):
        logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dh))
        a = ad.masked_softmax(logits, additive_mask)
        weights.append(a)
        outs.append(ad.matmul(a, v))
    merged = outs[0] if heads == 1 else ad.concat(outs, axis=1)
    out = ad.linear(merged, params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    return (out, weights) if return_weights else out


def attention_mask(active: np.ndarray) -> np.ndarray:
    """Additive mask from a boolean (K, M) activity matrix; empty rows attend everywhere."""
    active = np.asarray(active, dtype=bool)
    empty = ~active.any(axis=1)
    keep = active | empty[:, None]
    return np.where(keep, 0.0, ad.NEG_INF)


def masked_cross_attention(X, feats, voxel_pe, query_pe, active, params, prefix, heads, return_weights=False):
    """Pre-norm residual cross-attention restricted to each query's active voxels."""
    q_in = ad.add(_ln(X, params, prefix), query_pe)
    k_in = ad.add(feats, voxel_pe)
    res = multi_head_attention(q_in, k_in, feats, params, prefix, heads, attention_mask(active), return_weights)
    if return_weights:
        out, w = res
        return ad.add(X, out), w
    return ad.add(X, res)


def self_attention(X, query_pe, params, prefix, heads):
    h = _ln(X, params, prefix)
    qk = ad.add(h, query_pe)
    return ad.add(X, multi_head_attention(qk, qk, h, params, prefix, heads))


def feed_forward(X, params, prefix):
    h = ad.relu(ad.linear(_ln(X, params, prefix), params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return ad.add(X, ad.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"]))


def mask_embedding(X, params):
    """f_mask: three linear layers with ReLU between, applied after the output norm."""
    h = _ln(X, params, "decoder.norm")
    h = ad.relu(ad.linear(h, params["decoder.mask_mlp.w1"], params["decoder.mask_mlp.b1"]))
    h = ad.relu(ad.linear(h, params["decoder.mask_mlp.w2"], params["decoder.mask_mlp.b2"]))
    return ad.linear(h, params["decoder.mask_mlp.w3"], params["decoder.mask_mlp.b3"])


def mask_module(X, F0, params) -> PredictionSet:
    """Class logits plus a sigmoid heatmap over full-resolution voxels, one row per query."""
    logits = ad.linear(_ln(X, params, "decoder.norm"), params["decoder.class.w"], params["decoder.class.b"])
    emb = mask_embedding(X, params)
    heat = ad.sigmoid(ad.matmul(emb, ad.transpose(F0)))
    return PredictionSet(logits, heat)


def sample_voxels(num_voxels: int, limit: int, rng: np.random.Generator | None, training: bool = True) -> np.ndarray:
    """All indices at inference or when within the limit, else a fresh uniform subset."""
    if limit < 1:
        raise UsageError("sample limit must be >= 1")
    if not training or num_voxels <= limit:
        return np.arange(num_voxels)
    if rng is None:
        raise UsageError("sampling requires an rng")
    return np.sort(rng.choice(num_voxels, size=limit, replace=False))


def decoder_layer(X, queries, pyramid, level, voxel_pe, prev_mask, params, layer, cfg, rng, training):
    fine_map = pyramid.hierarchy.fine_to_level[level]
    m_r = len(pyramid.coords[level])
    active = prev_mask if level == 0 else pool_mask_to_resolution(prev_mask, fine_map, m_r)
    idx = sample_voxels(m_r, cfg.voxel_sample_limit, rng, training)
    feats, pe = pyramid.feats_proj[level], voxel_pe[level]
    if len(idx) < m_r:
        feats = ad.take_rows(feats, idx)
        pe = pe[idx]
        active = active[:, idx]
    pre = f"decoder.layer{layer}"
    X = masked_cross_attention(X, feats, ad.constant(pe), queries.pos_emb, active, params, f"{pre}.cross", cfg.heads)
    if cfg.self_attention:
        X = self_attention(X, queries.pos_emb, params, f"{pre}.self", cfg.heads)
    return feed_forward(X, params, f"{pre}.ffn")


def refine(queries: InstanceQuerySet, pyramid: FeaturePyramid, cfg: DecoderConfig, params: dict,
           rng: np.random.Generator | None = None, training: bool = False) -> list:
    """Run all decoder layers; returns the initial prediction followed by one per layer."""
    depth = pyramid.hierarchy.num_levels - 1
    schedule = cfg.level_schedule(depth)
    voxel_pe = voxel_positional_encodings(pyramid, cfg.dim)
    F0 = pyramid.feats_proj[0]
    X = queries.X
    preds = [mask_module(X, F0, params)]
    for step, level in enumerate(schedule):
        layer = step % cfg.levels_attended
        X = decoder_layer(X, queries, pyramid, level, voxel_pe, preds[-1].binary_mask, params, layer, cfg, rng, training)
        preds.append(mask_module(X, F0, params))
    return preds
