"""scikit-learn style wrapper: fit on labelled clouds, predict instances, score with mAP."""
from __future__ import annotations

import hashlib
import json
import logging
import math

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from ._validation import check_clouds, check_is_fitted, check_positive
from .backbone import DESK_WIDTHS, BackboneConfig
from .decoder import DecoderConfig, QueryInit
from .errors import ConfigError, NumericError, UsageError
from .evaluation import ground_truth_instances, map_suite, postprocess
from .geometry import PointCloud
from .model import Mask3DNet, prepare_scene
from .supervision import LossWeights, layer_loss

logger = logging.getLogger(__name__)


# query counts cycled during training so the decoder sees several K
DEFAULT_QUERY_LADDER = (10, 15, 20, 30, 40)


def one_cycle_lr(step: int, total: int, peak: float, warmup_frac: float = 0.1, final_div: float = 100.0) -> float:
    """Linear warm-up to ``peak`` over the first ``warmup_frac`` of steps, then cosine decay to peak/final_div."""
    warm = max(1, int(round(warmup_frac * total)))
    if step < warm:
        return peak * (step + 1) / warm
    span = max(1, total - warm - 1)
    t = min(1.0, (step - warm) / span)
    floor = peak / final_div
    return floor + 0.5 * (peak - floor) * (1 + math.cos(math.pi * t))


def augment(cloud: PointCloud, rng: np.random.Generator, flip: bool, rotate: bool, scale: bool) -> PointCloud:
    """Horizontal flip, rotation about z and uniform scaling, all about the cloud centre."""
    pos = cloud.positions.copy()
    centre = pos.mean(axis=0)
    pos -= centre
    if flip and rng.uniform() < 0.5:
        pos[:, 0] = -pos[:, 0]
    if rotate:
        a = rng.uniform(0, 2 * np.pi)
        c, s = np.cos(a), np.sin(a)
        pos[:, :2] = pos[:, :2] @ np.array([[c, s], [-s, c]])
    if scale:
        pos *= rng.uniform(0.9, 1.1)
    return PointCloud(pos + centre, cloud.colors, cloud.semantic_id, cloud.instance_id)


class Mask3DSegmenter(BaseEstimator):
    """Query-based 3D instance segmentation trained by set matching.

    ``fit`` takes a list of labelled :class:`PointCloud` scenes; ``predict``
    returns, per scene, a list of :class:`InstancePrediction`.
    """

    def __init__(self, voxel_size=0.2, widths=DESK_WIDTHS, dim=32, add_coords=True, num_queries=20, heads=8,
                 ffn_dim=128, levels_attended=3, iterations=3, voxel_sample_limit=1024, num_classes=4,
                 query_init="fps-zeros", self_attention=True, steps=500, lr=1.5e-3, weight_decay=0.0,
                 batch_size=8, grad_clip=50.0, warmup_frac=0.1, final_div=100.0, augment_flip=False, augment_rotate=False,
                 augment_scale=False, train_query_counts="auto", dice_weight=2.0, bce_weight=5.0, cls_weight=2.0, no_object_weight=0.1,
                 dbscan_eps=0.9, enable_dbscan=True, min_class_prob=0.0, confidence_filter=0.8, seed=0):
        self.voxel_size = voxel_size
        self.widths = widths
        self.dim = dim
        self.add_coords = add_coords
        self.num_queries = num_queries
        self.heads = heads
        self.ffn_dim = ffn_dim
        self.levels_attended = levels_attended
        self.iterations = iterations
        self.voxel_sample_limit = voxel_sample_limit
        self.num_classes = num_classes
        self.query_init = query_init
        self.self_attention = self_attention
        self.steps = steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.grad_clip = grad_clip
        self.warmup_frac = warmup_frac
        self.final_div = final_div
        self.augment_flip = augment_flip
        self.augment_rotate = augment_rotate
        self.augment_scale = augment_scale
        self.train_query_counts = train_query_counts
        self.dice_weight = dice_weight
        self.bce_weight = bce_weight
        self.cls_weight = cls_weight
        self.no_object_weight = no_object_weight
        self.dbscan_eps = dbscan_eps
        self.enable_dbscan = enable_dbscan
        self.min_class_prob = min_class_prob
        self.confidence_filter = confidence_filter
        self.seed = seed

    # -------------------------------------------------------------- construction

    def _configs(self):
        bb = BackboneConfig(tuple(self.widths), self.dim, self.add_coords)
        dec = DecoderConfig(self.num_queries, self.heads, self.ffn_dim, self.levels_attended, self.iterations,
                            self.voxel_sample_limit, self.num_classes, self.dim, self.self_attention)
        return bb, dec

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.dice_weight, self.bce_weight, self.cls_weight, self.no_object_weight)

    def build(self) -> "Mask3DSegmenter":
        """Instantiate freshly initialised weights without training."""
        check_positive("voxel_size", self.voxel_size)
        bb, dec = self._configs()
        self.net_ = Mask3DNet(bb, dec, QueryInit.parse(self.query_init), seed=self.seed)
        self.history_ = []
        return self

    def config_hash(self) -> str:
        blob = json.dumps(_jsonable(self.get_params()), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def _prepare(self, cloud):
        return prepare_scene(cloud, self.voxel_size, len(self.widths) - 1)

    # -------------------------------------------------------------- training

    def scene_loss(self, scene, rng=None, training=True, num_queries=None):
        preds = self.net_.forward(scene, num_queries=num_queries, training=training, rng=rng)
        w = self.loss_weights()
        terms = []
        for layer, p in enumerate(preds):
            try:
                terms.append(layer_loss(p, scene.targets, w, self.num_classes)[0])
            except NumericError as exc:
                raise NumericError(f"layer {layer} loss term: {exc}") from exc
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return total, [t.item() for t in terms]

    def fit(self, X, y=None, callback=None):
        """Train with AdamW under a one-cycle schedule, cycling through scenes in order.

        Each step averages ``batch_size`` scene visits; the default of 8
        covers the whole 8-scene desk training set every step.

        With ``train_query_counts`` the i-th scene visit uses the query count
        ``train_query_counts[i % len(train_query_counts)]`` (non-parametric
        query modes only).  ``"auto"`` picks ``DEFAULT_QUERY_LADDER`` for the
        FPS modes and a fixed count for parametric queries.

        ``callback(step, estimator)`` is invoked after every optimiser step.
        """
        clouds = check_clouds(X, require_labels=True)
        check_positive("lr", self.lr)
        self.build()
        ladder = self._query_ladder()
        rng = np.random.default_rng(self.seed)
        aug = self.augment_flip or self.augment_rotate or self.augment_scale
        cached = None if aug else [self._prepare(c) for c in clouds]
        opt = ad.AdamW(self.net_.params, lr=self.lr, weight_decay=self.weight_decay)
        n_scenes = len(clouds)
        cursor = 0
        for step in range(self.steps):
            lr = one_cycle_lr(step, self.steps, self.lr, self.warmup_frac, self.final_div)
            opt.zero_grad()
            total, per_layer = 0.0, None
            for _ in range(self.batch_size):
                i = cursor % n_scenes
                cursor += 1
                if cached is None:
                    scene = self._prepare(augment(clouds[i], rng, self.augment_flip, self.augment_rotate,
                                                  self.augment_scale))
                else:
                    scene = cached[i]
                k = None
                if ladder:
                    k = min(int(ladder[(cursor - 1) % len(ladder)]),
                            scene.grid.num_voxels)
                try:
                    loss, terms = self.scene_loss(scene, rng, num_queries=k)
                except NumericError as exc:
                    raise NumericError(f"step {step}, scene {i}: {exc}") from exc
                loss = ad.scale(loss, 1.0 / self.batch_size)
                ad.backward(loss)
                total += loss.item()
                per_layer = terms if per_layer is None else [a + b for a, b in zip(per_layer, terms)]
            if not np.isfinite(total):
                raise NumericError(f"step {step}: non-finite total loss")
            grad_norm = ad.clip_grad_norm(self.net_.params.values(), self.grad_clip)
            opt.step(lr)
            self.history_.append({"step": step, "lr": lr, "loss": total, "grad_norm": grad_norm,
                                  "layers": [t / self.batch_size for t in per_layer]})
            if step % 50 == 0 or step == self.steps - 1:
                logger.info("step %d lr %.2e loss %.4f", step, lr, total)
            if callback is not None:
                callback(step, self)
        return self

    def _query_ladder(self):
        parametric = QueryInit.parse(self.query_init) is QueryInit.PARAMETRIC
        if isinstance(self.train_query_counts, str):
            if self.train_query_counts != "auto":
                raise UsageError(f"train_query_counts must be 'auto', None or a list, got {self.train_query_counts!r}")
            return None if parametric else DEFAULT_QUERY_LADDER
        if self.train_query_counts and parametric:
            raise UsageError("train_query_counts requires non-parametric queries")
        if self.train_query_counts:
            for k in self.train_query_counts:
                check_positive("train_query_counts entry", k)
        return tuple(self.train_query_counts) if self.train_query_counts else None

    # -------------------------------------------------------------- inference

    def _num_queries(self, num_queries):
        if num_queries is None or num_queries == self.num_queries:
            return self.num_queries
        if QueryInit.parse(self.query_init) is QueryInit.PARAMETRIC:
            raise UsageError("parametric queries cannot change their count at inference (use fps-zeros or fps-features)")
        return int(num_queries)

    def predict_raw(self, cloud: PointCloud, num_queries=None):
        """Prepared scene and every layer's (class_probs, heatmap) for one cloud."""
        check_is_fitted(self)
        k = self._num_queries(num_queries)
        scene = self._prepare(cloud)
        preds = self.net_.forward(scene, num_queries=k, training=False)
        return scene, [(p.class_probs(), p.heatmap.data) for p in preds]

    def predict(self, X, num_queries=None, enable_dbscan=None, layer=-1):
        """Instance predictions per scene from the chosen decoder layer (default: last)."""
        clouds = check_clouds(X)
        dbs = self.enable_dbscan if enable_dbscan is None else enable_dbscan
        out = []
        for cloud in clouds:
            scene, layers = self.predict_raw(cloud, num_queries)
            probs, heat = layers[layer]
            out.append(postprocess(probs, heat, scene.grid, self.dbscan_eps, dbs, self.min_class_prob))
        return out

    def predict_layers(self, X, num_queries=None, enable_dbscan=None):
        """Predictions of every auxiliary layer: result[layer][scene] -> list of instances."""
        clouds = check_clouds(X)
        dbs = self.enable_dbscan if enable_dbscan is None else enable_dbscan
        per_scene = []
        for cloud in clouds:
            scene, layers = self.predict_raw(cloud, num_queries)
            per_scene.append([postprocess(p, h, scene.grid, self.dbscan_eps, dbs, self.min_class_prob)
                              for p, h in layers])
        return [[s[l] for s in per_scene] for l in range(len(per_scene[0]))]

    def evaluate(self, X, predictions=None, **predict_kw):
        clouds = check_clouds(X, require_labels=True)
        preds = self.predict(clouds, **predict_kw) if predictions is None else predictions
        gts = [ground_truth_instances(c.instance_id, c.semantic_id) for c in clouds]
        return map_suite(preds, gts, self.confidence_filter)

    def score(self, X, y=None):
        """Mean AP over IoU 0.50:0.95."""
        return self.evaluate(X).mAP

    # -------------------------------------------------------------- persistence

    def save(self, path, extra_meta: dict | None = None) -> None:
        """Checkpoint weights with estimator parameters, query mode and count in the header."""
        check_is_fitted(self)
        meta = dict(extra_meta or {})
        meta |= {"params": _jsonable(self.get_params()), "init_mode": QueryInit.parse(self.query_init).value,
                "num_queries": self.num_queries, "config_hash": self.config_hash(),
                "steps_trained": len(self.history_)}
        ad.save_checkpoint(path, self.net_.arrays(), meta)

    @classmethod
    def load(cls, path) -> "Mask3DSegmenter":
        arrays, meta = ad.load_checkpoint(path)
        params = meta.get("params")
        if params is None:
            raise ConfigError(f"{path}: checkpoint carries no estimator parameters")
        params["widths"] = tuple(params["widths"])
        if isinstance(params.get("train_query_counts"), list):
            params["train_query_counts"] = tuple(params["train_query_counts"])
        est = cls(**params).build()
        est.net_.load_arrays(arrays)
        est.checkpoint_meta_ = meta
        return est


def _jsonable(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, np.generic):
            v = v.item()
        out[k] = v
    return out
