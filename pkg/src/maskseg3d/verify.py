"""Self-check suites behind ``maskseg3d verify``.

Each suite compares a production routine with an oracle from
:mod:`maskseg3d.oracles` (or with finite differences) and returns a
:class:`SuiteResult`.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .backbone import BackboneConfig
from .decoder import DecoderConfig, QueryInit
from .evaluation import GroundTruth, InstancePrediction, map_suite
from .geometry import PointCloud, dbscan, farthest_point_sampling, voxelize
from .model import Mask3DNet, prepare_scene
from .oracles import brute_force_assignment, check_fps_picks, group_by_voxel, pr_curve_map, union_find_clusters
from .scenegen import SceneSpec, generate_scene
from .supervision import LossWeights, hungarian, layer_loss

SUITES = ("grad", "hungarian", "metrics", "geometry")

GRAD_TOLERANCE = 1e-4
GRAD_H = 1e-5
# denominator floor: central differences on a loss of ~30 carry up to ~1.5e-9 roundoff at h=1e-5,
# so gradients that are exactly zero (attention key biases) need an absolute allowance of ~1e-8
GRAD_FLOOR = 1e-4


@dataclass
class SuiteResult:
    name: str
    checks: int = 0
    failures: int = 0
    skipped: int = 0
    worst: float = 0.0
    seconds: float = 0.0
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.failures == 0 and self.checks > 0

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = f"{self.name}: {status} checks={self.checks} failures={self.failures}"
        if self.skipped:
            line += f" skipped={self.skipped}"
        if self.name == "grad":
            line += f" max_rel_err={self.worst:.3e}"
        return line + f" time={self.seconds:.1f}s"


# ------------------------------------------------------------------ gradients


def rel_error(analytic: float, numeric: float, floor: float = GRAD_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def tiny_setup(seed: int = 0):
    """D=16, K=4, two pyramid levels, C=3, about 200 voxels."""
    bb = BackboneConfig(widths=(8, 12), dim=16)
    dec = DecoderConfig(num_queries=4, heads=4, ffn_dim=32, levels_attended=1, iterations=2,
                        voxel_sample_limit=10_000, num_classes=3, dim=16)
    net = Mask3DNet(bb, dec, QueryInit.FPS_ZEROS, seed=seed)
    spec = SceneSpec(extent=3.2, palette=("box", "cylinder", "sphere"), instance_count=(2, 2),
                     points_per_instance=(80, 120), floor_density=12.0, min_gap=0.4)
    scene = prepare_scene(generate_scene(spec, seed), 0.2, bb.depth)
    return net, scene


def _loss_and_signature(net, scene, weights, num_classes):
    preds = net.forward(scene, training=False)
    total, sig = None, []
    for p in preds:
        loss, assign = layer_loss(p, scene.targets, weights, num_classes)
        total = loss if total is None else ad.add(total, loss)
        sig.append(p.binary_mask.tobytes())
        sig.append(tuple(assign.pairs))
    return total, tuple(sig)


def grad_suite(samples: int = 100, seed: int = 0, tolerance: float = GRAD_TOLERANCE, h: float = GRAD_H) -> SuiteResult:
    """Analytic gradient of the full training loss against central differences.

    Samples whose binarised masks or matchings change within +-h sit on a
    discontinuity of the loss and are skipped and replaced.
    """
    t0 = time.perf_counter()
    res = SuiteResult("grad")
    net, scene = tiny_setup(seed)
    weights = LossWeights()
    C = net.decoder_cfg.num_classes
    loss, base_sig = _loss_and_signature(net, scene, weights, C)
    ad.backward(loss)
    grads = {k: p.grad.copy() for k, p in net.params.items()}
    names = sorted(net.params)
    rng = np.random.default_rng(seed)
    attempts = 0
    while res.checks < samples and attempts < 4 * samples:
        attempts += 1
        name = names[rng.integers(len(names))]
        param = net.params[name]
        index = tuple(int(rng.integers(s)) for s in param.shape)
        sigs = []

        def f():
            value, sig = _loss_and_signature(net, scene, weights, C)
            sigs.append(sig)
            return value.item()

        numeric = ad.numerical_gradient(f, param, index, h)
        if any(s != base_sig for s in sigs):
            res.skipped += 1
            continue
        err = rel_error(float(grads[name][index]), numeric)
        res.checks += 1
        res.worst = max(res.worst, err)
        if err >= tolerance:
            res.failures += 1
            res.notes.append(f"{name}{list(index)}: analytic {grads[name][index]:.6e} numeric {numeric:.6e}")
    res.seconds = time.perf_counter() - t0
    return res


# ------------------------------------------------------------------ matching


def random_cost(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    kind = rng.integers(3)
    if kind == 0:
        return rng.uniform(-5, 5, size=(rows, cols))
    if kind == 1:  # many ties
        return rng.integers(0, 4, size=(rows, cols)).astype(np.float64)
    return rng.exponential(1.0, size=(rows, cols)) * 10 ** rng.uniform(-3, 3)


def hungarian_suite(trials: int = 1000, seed: int = 0, max_size: int = 7) -> SuiteResult:
    """Optimal total cost equals the exhaustive permutation minimum, exactly."""
    t0 = time.perf_counter()
    res = SuiteResult("hungarian")
    rng = np.random.default_rng(seed)
    for t in range(trials):
        rows = int(rng.integers(1, max_size + 1))
        shape = t % 3
        cols = rows if shape == 0 else int(rng.integers(1, rows + 1))
        if shape == 2:
            rows, cols = cols, rows
        cost = random_cost(rng, rows, cols)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            got = hungarian(cost).total_cost
        res.checks += 1
        want = brute_force_assignment(cost)
        if got != want:
            res.failures += 1
            res.notes.append(f"trial {t} {rows}x{cols}: got {got!r}, optimum {want!r}")
    res.seconds = time.perf_counter() - t0
    return res


# ------------------------------------------------------------------ metrics


def random_eval_batch(rng: np.random.Generator, num_classes: int = 3):
    """1-3 small scenes with random ground truth and noisy or random predictions."""
    preds_all, gts_all = [], []
    for _ in range(int(rng.integers(1, 4))):
        n = int(rng.integers(20, 60))
        labels = rng.integers(-1, int(rng.integers(1, 5)), size=n)
        gts = [GroundTruth(labels == i, int(rng.integers(num_classes))) for i in np.unique(labels) if i >= 0]
        preds = []
        for _ in range(int(rng.integers(0, 7))):
            if gts and rng.uniform() < 0.7:
                g = gts[rng.integers(len(gts))]
                mask = g.point_mask ^ (rng.uniform(size=n) < rng.uniform(0, 0.4))
                cls = g.class_id if rng.uniform() < 0.8 else int(rng.integers(num_classes))
            else:
                mask = rng.uniform(size=n) < rng.uniform(0.05, 0.5)
                cls = int(rng.integers(num_classes))
            if rng.uniform() < 0.1:
                conf = 0.5  # deliberate ties
            else:
                conf = float(rng.uniform())
            preds.append(InstancePrediction(mask, cls, conf))
        preds_all.append(preds)
        gts_all.append(gts)
    return preds_all, gts_all


def metrics_suite(trials: int = 200, seed: int = 0, tolerance: float = 1e-9) -> SuiteResult:
    """mAP, mAP50 and mAP25 agree with an explicit PR-curve oracle."""
    t0 = time.perf_counter()
    res = SuiteResult("metrics")
    rng = np.random.default_rng(seed)
    while res.checks < trials:
        preds, gts = random_eval_batch(rng)
        if not any(gts):
            continue
        rep = map_suite(preds, gts)
        want = pr_curve_map(preds, gts)
        got = (rep.mAP, rep.mAP50, rep.mAP25)
        res.checks += 1
        diff = max(abs(a - b) for a, b in zip(got, want))
        res.worst = max(res.worst, diff)
        if diff > tolerance:
            res.failures += 1
            res.notes.append(f"trial {res.checks - 1}: got {got}, oracle {want}")
    res.seconds = time.perf_counter() - t0
    return res


# ------------------------------------------------------------------ geometry


def _random_points(rng: np.random.Generator, n: int) -> np.ndarray:
    if rng.uniform() < 0.3:  # lattice points put many pairs exactly at eps
        return rng.integers(0, 5, size=(n, 3)).astype(np.float64)
    return rng.uniform(0, rng.uniform(0.5, 6), size=(n, 3))


def geometry_suite(trials: int = 500, seed: int = 0) -> SuiteResult:
    """DBSCAN vs union-find, FPS vs exhaustive max-min, voxel means vs group-by; ``trials`` of each."""
    t0 = time.perf_counter()
    res = SuiteResult("geometry")
    rng = np.random.default_rng(seed)
    for t in range(trials):
        pts = _random_points(rng, int(rng.integers(1, 80)))
        eps = 1.0 if rng.uniform() < 0.3 else float(rng.uniform(0.1, 1.5))
        res.checks += 1
        if not np.array_equal(dbscan(pts, eps, min_size=1), union_find_clusters(pts, eps)):
            res.failures += 1
            res.notes.append(f"dbscan trial {t}")
    for t in range(trials):
        n = int(rng.integers(1, 101))
        pts = _random_points(rng, n)
        k = int(rng.integers(1, min(n, 12) + 1))
        picks = farthest_point_sampling(pts, k, start=int(rng.integers(n)))
        res.checks += 1
        if check_fps_picks(pts, picks):
            res.failures += 1
            res.notes.append(f"fps trial {t}")
    for t in range(trials):
        n = int(rng.integers(1, 200))
        pos = rng.normal(0, 2, size=(n, 3))
        cloud = PointCloud(pos, rng.uniform(size=(n, 3)))
        size = float(rng.uniform(0.1, 1.0))
        grid = voxelize(cloud, size)
        ref = group_by_voxel(pos, cloud.colors, size)
        res.checks += 1
        ok = len(ref) == grid.num_voxels and all(
            np.max(np.abs(grid.feats[v] - ref[tuple(int(x) for x in grid.coords[v])])) <= 1e-12
            for v in range(grid.num_voxels))
        ok = ok and np.array_equal(grid.coords[grid.point_to_voxel], np.floor(pos / size).astype(np.int64))
        if not ok:
            res.failures += 1
            res.notes.append(f"voxelize trial {t}")
    res.seconds = time.perf_counter() - t0
    return res


def run_suite(name: str, seed: int = 0) -> SuiteResult:
    runners = {"grad": grad_suite, "hungarian": hungarian_suite, "metrics": metrics_suite, "geometry": geometry_suite}
    return runners[name](seed=seed)
