"""Point-cloud and voxel-space algorithms."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError, UsageError

NO_INSTANCE = -1

# 3x3x3 neighbourhood offsets in lexicographic order; the centre is index 13
NEIGHBOR_OFFSETS = np.array(
    [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64
)


@dataclass
class PointCloud:
    """N colored points with optional semantic / instance annotation.

    ``instance_id`` uses ``NO_INSTANCE`` (-1) for unannotated points such as floor.
    """

    positions: np.ndarray
    colors: np.ndarray
    semantic_id: Optional[np.ndarray] = None
    instance_id: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        if n == 0:
            raise UsageError("point cloud is empty")
        if len(self.colors) != n:
            raise DataError("positions and colors differ in length")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise DataError("colors must lie in [0, 1]")
        for name in ("semantic_id", "instance_id"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.int64).reshape(-1)
                if len(arr) != n:
                    raise DataError(f"{name} length {len(arr)} != {n}")
                setattr(self, name, arr)
        if self.instance_id is not None and self.semantic_id is not None:
            inst = self.instance_id
            for i in np.unique(inst[inst != NO_INSTANCE]):
                if len(np.unique(self.semantic_id[inst == i])) != 1:
                    raise DataError(f"instance {i} spans several semantic classes")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def has_labels(self) -> bool:
        return self.semantic_id is not None and self.instance_id is not None

    def instance_ids(self) -> np.ndarray:
        if self.instance_id is None:
            return np.zeros(0, dtype=np.int64)
        ids = np.unique(self.instance_id)
        return ids[ids != NO_INSTANCE]


@dataclass
class VoxelGrid:
    voxel_size: float
    coords: np.ndarray  # (M, 3) int64, lexicographically sorted, unique
    feats: np.ndarray  # (M, 3) mean color
    point_to_voxel: np.ndarray  # (N,)

    @property
    def num_voxels(self) -> int:
        return len(self.coords)

    def centers(self) -> np.ndarray:
        """World coordinates of voxel centres."""
        return (self.coords.astype(np.float64) + 0.5) * self.voxel_size


def voxelize(cloud: PointCloud, voxel_size: float) -> VoxelGrid:
    """Floor-quantise points; each voxel gets the mean color of its points."""
    if voxel_size <= 0:
        raise UsageError("voxel_size must be positive")
    if len(cloud) == 0:
        raise UsageError("cannot voxelize an empty cloud")
    grid = np.floor(cloud.positions / voxel_size).astype(np.int64)
    # np.unique on rows sorts lexicographically
    coords, inverse = np.unique(grid, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=len(coords)).astype(np.float64)
    feats = np.zeros((len(coords), 3))
    np.add.at(feats, inverse, cloud.colors)
    feats /= counts[:, None]
    return VoxelGrid(float(voxel_size), coords, feats, inverse)


def farthest_point_sampling(positions: np.ndarray, k: int, start: int | None = 0,
                            rng: np.random.Generator | None = None) -> np.ndarray:
    """Greedy max-min subset selection.

    Ties go to the lowest index.  ``start`` picks the first sample; pass
    ``start=None`` together with ``rng`` for a seeded random start.
    """
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if not 1 <= k <= n:
        raise UsageError(f"farthest point sampling needs 1 <= k <= n (k={k}, n={n})")
    if start is None:
        if rng is None:
            raise UsageError("random start requires an rng")
        start = int(rng.integers(n))
    selected = np.empty(k, dtype=np.int64)
    selected[0] = start
    dist = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))  # argmax returns the first maximum
        selected[i] = nxt
        dist = np.minimum(dist, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return selected


def fourier_frequencies(dim: int) -> np.ndarray:
    """dim/6 frequencies per axis: pi, 2pi, ..., 2**(dim/6 - 1) * pi."""
    return np.pi * 2.0 ** np.arange(dim // 6)


def fourier_positional_encoding(positions_scaled: np.ndarray, dim: int) -> np.ndarray:
    """Sin/cos features of coordinates in [-1, 1].

    Output layout per axis: [sin(f_0 x) .. sin(f_{m-1} x), cos(f_0 x) .. cos(f_{m-1} x)],
    axes concatenated x, y, z.
    """
    if dim <= 0 or dim % 6:
        raise UsageError(f"encoding dim must be a positive multiple of 6, got {dim}")
    p = np.asarray(positions_scaled, dtype=np.float64).reshape(-1, 3)
    if np.any(np.abs(p) > 1.0 + 1e-12):
        raise UsageError("positions must be scaled to [-1, 1]")
    freqs = fourier_frequencies(dim)
    blocks = []
    for axis in range(3):
        arg = p[:, axis : axis + 1] * freqs[None, :]
        blocks.append(np.sin(arg))
        blocks.append(np.cos(arg))
    return np.concatenate(blocks, axis=1)


def positional_encoding(positions_scaled: np.ndarray, dim: int) -> np.ndarray:
    """Fourier encoding at the largest multiple of 6 <= dim, zero-padded to dim."""
    usable = (dim // 6) * 6
    n = len(np.asarray(positions_scaled).reshape(-1, 3))
    out = np.zeros((n, dim))
    if usable:
        out[:, :usable] = fourier_positional_encoding(positions_scaled, usable)
    return out


def scale_to_unit_box(points: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Map the box [lo, hi] affinely onto [-1, 1]^3 (degenerate axes map to 0)."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    out = 2.0 * (np.asarray(points, dtype=np.float64) - lo) / span - 1.0
    out[:, hi - lo <= 0] = 0.0
    return np.clip(out, -1.0, 1.0)


def dbscan(points: np.ndarray, eps: float, min_size: int = 1) -> np.ndarray:
    """Density clustering with neighbourhood radius ``eps`` (inclusive).

    Neighbour queries use a uniform hash grid with cell size ``eps``.  Points
    that end up in no cluster get label -1 (impossible when ``min_size`` is 1,
    which reduces to connected components of the eps-graph).  Cluster ids are
    ordered by their lowest member index.
    """
    if eps <= 0:
        raise UsageError("eps must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    cells = np.floor(pts / eps)
    if np.max(np.abs(cells)) >= 2**62:
        raise UsageError(f"eps={eps} is too small for coordinates of this magnitude")
    cells = cells.astype(np.int64)
    uniq, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(uniq) + 1))
    bucket = {tuple(u): order[bounds[i]:bounds[i + 1]] for i, u in enumerate(uniq.tolist())}
    eps2 = eps * eps

    def neighbours(i: int) -> np.ndarray:
        ci = cells[i]
        cand = []
        for off in NEIGHBOR_OFFSETS:
            b = bucket.get(tuple((ci + off).tolist()))
            if b is not None:
                cand.append(b)
        cand = np.concatenate(cand)
        d2 = np.sum((pts[cand] - pts[i]) ** 2, axis=1)
        return cand[d2 <= eps2]

    nbrs = [neighbours(i) for i in range(n)]
    core = np.array([len(nb) >= min_size for nb in nbrs])
    labels = np.full(n, -1, dtype=np.int64)
    next_label = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = next_label
        stack = [i]
        while stack:
            j = stack.pop()
            if not core[j]:
                continue
            for q in nbrs[j]:
                if labels[q] == -1:
                    labels[q] = next_label
                    stack.append(q)
        next_label += 1
    # border points may be reached from a later core; keep ids ordered by first member
    if next_label:
        first = np.full(next_label, n, dtype=np.int64)
        valid = labels >= 0
        np.minimum.at(first, labels[valid], np.nonzero(valid)[0])
        remap = np.empty(next_label, dtype=np.int64)
        remap[np.argsort(first, kind="stable")] = np.arange(next_label)
        labels[valid] = remap[labels[valid]]
    return labels


def pool_mask_to_resolution(mask: np.ndarray, fine_to_coarse: np.ndarray, num_coarse: int) -> np.ndarray:
    """Average-pool binary masks onto a coarser level and re-threshold (> 0.5).

    ``mask`` is (M0,) or (K, M0); ``fine_to_coarse`` maps every fine voxel to
    its coarse ancestor.
    """
    m = np.asarray(mask, dtype=np.float64)
    mapping = np.asarray(fine_to_coarse, dtype=np.int64)
    if m.shape[-1] != len(mapping):
        raise DataError("mask length does not match the voxel mapping")
    if np.any(mapping < 0) or np.any(mapping >= num_coarse):
        raise DataError("unmapped fine voxel")
    counts = np.bincount(mapping, minlength=num_coarse).astype(np.float64)
    squeeze = m.ndim == 1
    m2 = m.reshape(-1, m.shape[-1])
    sums = np.zeros((m2.shape[0], num_coarse))
    np.add.at(sums.T, mapping, m2.T)
    with np.errstate(invalid="ignore", divide="ignore"):
        avg = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    out = avg > 0.5
    return out[0] if squeeze else out
