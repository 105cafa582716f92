"""The full segmentation network: backbone, query decoder and mask module."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .backbone import BackboneConfig, FeaturePyramid, Hierarchy, build_hierarchy, forward as backbone_pass, init_backbone_params
from .decoder import DecoderConfig, QueryInit, init_decoder_params, init_queries, refine
from .errors import ConfigError
from .geometry import NO_INSTANCE, PointCloud, VoxelGrid, voxelize
from .supervision import GroundTruthInstance


@dataclass
class PreparedScene:
    """A voxelised scene with its hierarchy and (optional) voxel-level targets."""

    cloud: PointCloud
    grid: VoxelGrid
    hierarchy: Hierarchy
    targets: list


def voxel_targets(cloud: PointCloud, grid: VoxelGrid) -> list:
    """Instance masks over voxels; each voxel takes the majority instance label of its points."""
    if not cloud.has_labels:
        return []
    ids = cloud.instance_id
    uniq = np.unique(ids)
    lookup = {int(u): i for i, u in enumerate(uniq)}
    col = np.array([lookup[int(i)] for i in ids])
    votes = np.zeros((grid.num_voxels, len(uniq)), dtype=np.int64)
    np.add.at(votes, (grid.point_to_voxel, col), 1)
    winner = uniq[np.argmax(votes, axis=1)]
    targets = []
    for inst in uniq:
        if inst == NO_INSTANCE:
            continue
        mask = winner == inst
        if mask.any():
            targets.append(GroundTruthInstance(mask, int(cloud.semantic_id[ids == inst][0])))
    return targets


def prepare_scene(cloud: PointCloud, voxel_size: float, depth: int) -> PreparedScene:
    grid = voxelize(cloud, voxel_size)
    return PreparedScene(cloud, grid, build_hierarchy(grid.coords, depth), voxel_targets(cloud, grid))


class Mask3DNet:
    """Parameters plus the forward pass; training logic lives in the estimator."""

    def __init__(self, backbone: BackboneConfig, decoder: DecoderConfig, init_mode=QueryInit.FPS_ZEROS, seed: int = 0):
        if backbone.dim != decoder.dim:
            raise ConfigError(f"backbone dim {backbone.dim} != decoder dim {decoder.dim}")
        decoder.level_schedule(backbone.depth)
        self.backbone_cfg = backbone
        self.decoder_cfg = decoder
        self.init_mode = QueryInit.parse(init_mode)
        rng = np.random.default_rng(seed)
        raw = init_backbone_params(backbone, rng)
        raw.update(init_decoder_params(decoder, rng, self.init_mode))
        self.params = {name: ad.parameter(v, name) for name, v in raw.items()}

    def load_arrays(self, arrays: dict) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for name, arr in arrays.items():
            if arr.shape != self.params[name].shape:
                raise ConfigError(f"{name}: checkpoint shape {arr.shape} != model shape {self.params[name].shape}")
            self.params[name] = ad.parameter(np.array(arr), name)

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def pyramid(self, scene: PreparedScene) -> FeaturePyramid:
        return backbone_pass(scene.grid, self.backbone_cfg, self.params, scene.hierarchy)

    def forward(self, scene: PreparedScene, num_queries: int | None = None, training: bool = False,
                rng: np.random.Generator | None = None) -> list:
        """All L+1 prediction sets for one scene."""
        pyr = self.pyramid(scene)
        k = self.decoder_cfg.num_queries if num_queries is None else num_queries
        queries = init_queries(self.init_mode, pyr, k, self.params, self.decoder_cfg.dim)
        return refine(queries, pyr, self.decoder_cfg, self.params, rng=rng, training=training)
