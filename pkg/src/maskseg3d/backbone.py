"""Voxel U-Net stand-in producing the multi-resolution feature pyramid.

Each convolution gathers the 27 neighbours of an occupied voxel (missing
neighbours contribute zeros) and applies one weight block per offset, which
is what a submanifold sparse convolution computes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .geometry import NEIGHBOR_OFFSETS, VoxelGrid, scale_to_unit_box

PAPER_WIDTHS = (96, 96, 128, 256, 256)
DESK_WIDTHS = (16, 16, 24, 32, 32)


@dataclass
class BackboneConfig:
    widths: tuple = DESK_WIDTHS
    dim: int = 32
    add_coords: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2:
            raise ConfigError("backbone needs at least two levels")
        if any(w <= 0 for w in self.widths):
            raise ConfigError("channel widths must be positive")
        if self.dim <= 0:
            raise ConfigError("projection dim must be positive")

    @property
    def depth(self) -> int:
        """Index R of the coarsest level."""
        return len(self.widths) - 1

    @property
    def in_channels(self) -> int:
        return 6 if self.add_coords else 3


@dataclass
class Hierarchy:
    """Voxel coordinates per level and the maps tying levels together.

    ``child_map[r]`` (r >= 1) sends each level r-1 voxel to its parent at
    level r; ``fine_to_level[r]`` sends each level-0 voxel to its ancestor.
    """

    coords: list
    child_map: list
    fine_to_level: list
    neighbors: list = field(default_factory=list)

    @property
    def num_levels(self) -> int:
        return len(self.coords)

    def sizes(self) -> list:
        return [len(c) for c in self.coords]


def _pack(coords: np.ndarray, lo: np.ndarray, ext: np.ndarray) -> np.ndarray:
    c = coords - lo
    return (c[:, 0] * ext[1] + c[:, 1]) * ext[2] + c[:, 2]


def neighbor_table(coords: np.ndarray) -> np.ndarray:
    """(M, 27) index of the voxel at each offset, -1 where unoccupied."""
    lo = coords.min(axis=0) - 1
    ext = coords.max(axis=0) - lo + 2
    keys = _pack(coords, lo, ext)
    order = np.argsort(keys)
    sorted_keys = keys[order]
    table = np.full((len(coords), len(NEIGHBOR_OFFSETS)), -1, dtype=np.int64)
    for j, off in enumerate(NEIGHBOR_OFFSETS):
        q = _pack(coords + off, lo, ext)
        pos = np.searchsorted(sorted_keys, q)
        pos_c = np.minimum(pos, len(keys) - 1)
        hit = sorted_keys[pos_c] == q
        table[hit, j] = order[pos_c[hit]]
    return table


def build_hierarchy(coords: np.ndarray, levels: int) -> Hierarchy:
    """Integer-halve coordinates ``levels`` times; level 0 keeps the input order."""
    if levels < 1:
        raise ConfigError("hierarchy needs at least one coarser level")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    all_coords = [coords]
    child_map = [None]
    fine = [np.arange(len(coords))]
    for _ in range(levels):
        parent = np.floor_divide(all_coords[-1], 2)
        uniq, inv = np.unique(parent, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        all_coords.append(uniq)
        child_map.append(inv)
        fine.append(inv[fine[-1]])
    h = Hierarchy(all_coords, child_map, fine)
    h.neighbors = [neighbor_table(c) for c in all_coords]
    return h


def _init_conv(rng, cin, cout, offsets=27):
    std = np.sqrt(2.0 / (offsets * cin / 3.0))
    return rng.normal(0.0, std, size=(offsets * cin, cout)), np.zeros(cout)


def init_backbone_params(cfg: BackboneConfig, rng: np.random.Generator) -> dict:
    p = {}
    w = cfg.widths
    R = cfg.depth
    for r in range(R + 1):
        cin = cfg.in_channels if r == 0 else w[r - 1]
        p[f"backbone.enc{r}.w"], p[f"backbone.enc{r}.b"] = _init_conv(rng, cin, w[r])
        if r > 0:
            p[f"backbone.enc{r}.ln_g"], p[f"backbone.enc{r}.ln_b"] = np.ones(cin), np.zeros(cin)
    for r in range(R):
        cin = w[r + 1] + w[r]
        p[f"backbone.dec{r}.ln_g"], p[f"backbone.dec{r}.ln_b"] = np.ones(cin), np.zeros(cin)
        p[f"backbone.dec{r}.w"], p[f"backbone.dec{r}.b"] = _init_conv(rng, cin, w[r])
    for r in range(R + 1):
        p[f"backbone.proj{r}.w"] = rng.normal(0.0, np.sqrt(1.0 / w[r]), size=(w[r], cfg.dim))
        p[f"backbone.proj{r}.b"] = np.zeros(cfg.dim)
    return p


def _check_shapes(params: dict, cfg: BackboneConfig) -> None:
    R, w = cfg.depth, cfg.widths
    missing = [k for k in init_backbone_params(cfg, np.random.default_rng(0)) if k not in params]
    if missing:
        raise ConfigError(f"missing backbone parameters: {', '.join(missing[:3])}")
    for r in range(R + 1):
        cin = cfg.in_channels if r == 0 else w[r - 1]
        got = params[f"backbone.enc{r}.w"].shape
        if got != (27 * cin, w[r]):
            raise ConfigError(f"backbone.enc{r}.w has shape {got}, expected {(27 * cin, w[r])}")
        got = params[f"backbone.proj{r}.w"].shape
        if got != (w[r], cfg.dim):
            raise ConfigError(f"backbone.proj{r}.w has shape {got}, expected {(w[r], cfg.dim)}")


def sparse_conv(x: ad.Tensor, neighbors: np.ndarray, w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    gathered = ad.take_rows(x, neighbors)  # (M, 27, C)
    m, k, c = gathered.shape
    return ad.linear(ad.reshape(gathered, (m, k * c)), w, b)


def _preact(x, params, name):
    return ad.relu(ad.layer_norm(x, params[f"{name}.ln_g"], params[f"{name}.ln_b"]))


def input_features(grid: VoxelGrid, cfg: BackboneConfig) -> np.ndarray:
    if not cfg.add_coords:
        return grid.feats
    c = grid.coords.astype(np.float64)
    return np.concatenate([grid.feats, scale_to_unit_box(c, c.min(axis=0), c.max(axis=0))], axis=1)


def backbone_forward(feats: np.ndarray, hier: Hierarchy, cfg: BackboneConfig, params: dict) -> list:
    """Encoder-decoder pass; returns the raw decoder features of every level, fine to coarse."""
    _check_shapes(params, cfg)
    if hier.num_levels != cfg.depth + 1:
        raise ConfigError(f"hierarchy has {hier.num_levels} levels, config expects {cfg.depth + 1}")
    R = cfg.depth
    enc = [sparse_conv(ad.constant(feats), hier.neighbors[0], params["backbone.enc0.w"], params["backbone.enc0.b"])]
    for r in range(1, R + 1):
        pooled = ad.segment_mean(enc[-1], hier.child_map[r], len(hier.coords[r]))
        h = _preact(pooled, params, f"backbone.enc{r}")
        enc.append(sparse_conv(h, hier.neighbors[r], params[f"backbone.enc{r}.w"], params[f"backbone.enc{r}.b"]))
    dec = [None] * (R + 1)
    dec[R] = enc[R]
    for r in range(R - 1, -1, -1):
        up = ad.take_rows(dec[r + 1], hier.child_map[r + 1])
        h = _preact(ad.concat([up, enc[r]], axis=1), params, f"backbone.dec{r}")
        dec[r] = sparse_conv(h, hier.neighbors[r], params[f"backbone.dec{r}.w"], params[f"backbone.dec{r}.b"])
    return dec


def project_to_common_dim(feats_raw: list, params: dict) -> list:
    """Independent linear map per level onto the shared width."""
    out = []
    for r, f in enumerate(feats_raw):
        w = params[f"backbone.proj{r}.w"]
        if w.shape[0] != f.shape[1]:
            raise ConfigError(f"level {r}: features have width {f.shape[1]}, projection expects {w.shape[0]}")
        out.append(ad.linear(f, w, params[f"backbone.proj{r}.b"]))
    return out


@dataclass
class FeaturePyramid:
    hierarchy: Hierarchy
    feats_raw: list
    feats_proj: list

    @property
    def coords(self):
        return self.hierarchy.coords


def forward(grid: VoxelGrid, cfg: BackboneConfig, params: dict, hierarchy: Hierarchy | None = None) -> FeaturePyramid:
    hier = hierarchy or build_hierarchy(grid.coords, cfg.depth)
    raw = backbone_forward(input_features(grid, cfg), hier, cfg, params)
    return FeaturePyramid(hier, raw, project_to_common_dim(raw, params))
