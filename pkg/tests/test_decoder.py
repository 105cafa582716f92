import numpy as np
import pytest

from maskseg3d import autodiff as ad
from maskseg3d.backbone import BackboneConfig
from maskseg3d.decoder import (
    DecoderConfig,
    InstanceQuerySet,
    QueryInit,
    attention_mask,
    encoding_box,
    init_decoder_params,
    init_queries,
    mask_module,
    masked_cross_attention,
    multi_head_attention,
    refine,
    sample_voxels,
    voxel_positional_encodings,
)
from maskseg3d.errors import ConfigError, UsageError
from maskseg3d.geometry import scale_to_unit_box
from maskseg3d.model import Mask3DNet, prepare_scene
from maskseg3d.scenegen import SceneSpec, generate_scene


def tensors(raw):
    return {k: ad.parameter(v, k) for k, v in raw.items()}


@pytest.fixture(scope="module")
def small():
    bb = BackboneConfig(widths=(8, 8, 8), dim=16)
    dec = DecoderConfig(num_queries=5, heads=4, ffn_dim=32, levels_attended=2, iterations=2, num_classes=3, dim=16)
    spec = SceneSpec(extent=3.2, palette=("box", "cylinder", "sphere"), instance_count=(2, 2),
                     points_per_instance=(60, 90), floor_density=10.0, min_gap=0.4)
    scene = prepare_scene(generate_scene(spec, 3), 0.2, bb.depth)
    return bb, dec, scene


# ------------------------------------------------------------------ configuration


def test_query_init_parse():
    assert QueryInit.parse("1") is QueryInit.PARAMETRIC
    assert QueryInit.parse("fps-features") is QueryInit.FPS_FEATURES
    with pytest.raises(ConfigError):
        QueryInit.parse("random")


def test_level_schedule_coarse_to_fine():
    cfg = DecoderConfig(levels_attended=4, iterations=3)
    assert cfg.level_schedule(4) == [4, 3, 2, 1] * 3
    assert cfg.num_layers == 12
    with pytest.raises(ConfigError):
        cfg.level_schedule(3)


def test_bad_decoder_config():
    with pytest.raises(ConfigError):
        DecoderConfig(dim=30, heads=8)
    with pytest.raises(ConfigError):
        DecoderConfig(num_queries=0)


# ------------------------------------------------------------------ queries


def test_query_modes(small):
    bb, dec, scene = small
    for mode in QueryInit:
        net = Mask3DNet(bb, dec, mode, seed=0)
        q = init_queries(mode, net.pyramid(scene), 5, net.params, 16)
        assert q.X.shape == (5, 16) and q.pos_emb.shape == (5, 16)
        if mode is QueryInit.FPS_ZEROS:
            assert not q.X.data.any()
        if mode is QueryInit.FPS_FEATURES:
            np.testing.assert_array_equal(q.X.data, net.pyramid(scene).feats_proj[0].data[q.voxel_index])
        if mode is QueryInit.PARAMETRIC:
            assert q.voxel_index is None
            with pytest.raises(UsageError):
                init_queries(mode, net.pyramid(scene), 6, net.params, 16)


def test_too_many_fps_queries(small):
    bb, dec, scene = small
    net = Mask3DNet(bb, dec, seed=0)
    with pytest.raises(UsageError):
        net.forward(scene, num_queries=scene.grid.num_voxels + 1)


def test_voxel_encodings_open_interval(small):
    bb, dec, scene = small
    net = Mask3DNet(bb, dec, seed=0)
    pyr = net.pyramid(scene)
    lo, hi = encoding_box(pyr)
    assert np.all(lo <= pyr.coords[0].min(axis=0)) and np.all(hi >= pyr.coords[0].max(axis=0) + 1)
    for r, c in enumerate(pyr.coords):
        u = scale_to_unit_box((c + 0.5) * 2 ** r, lo, hi)
        assert np.all(np.abs(u) < 1.0)
    pes = voxel_positional_encodings(pyr, 16)
    # level-0 voxels are distinct, and so are their encodings
    assert len(np.unique(pes[0].round(12), axis=0)) == scene.grid.num_voxels


# ------------------------------------------------------------------ attention


def _attn_raw(rng, d):
    p = {}
    for n in "qkvo":
        p[f"a.w{n}"], p[f"a.b{n}"] = rng.normal(size=(d, d)) / np.sqrt(d), rng.normal(size=d) * 0.1
    p["a.ln_g"], p["a.ln_b"] = np.ones(d), np.zeros(d)
    return p


def test_attention_mask_values():
    m = attention_mask(np.array([[True, False], [False, False]]))
    assert m[0, 0] == 0.0 and m[0, 1] == ad.NEG_INF
    np.testing.assert_array_equal(m[1], [0.0, 0.0])


def test_single_active_voxel_copies_its_value(rng):
    d = 8
    raw = _attn_raw(rng, d)
    params = tensors(raw)
    X, F = rng.normal(size=(3, d)), rng.normal(size=(6, d))
    active = np.zeros((3, 6), dtype=bool)
    active[:, 4] = True
    _, w = masked_cross_attention(ad.constant(X), ad.constant(F), ad.constant(np.zeros((6, d))),
                                  ad.constant(np.zeros((3, d))), active, params, "a", 2, return_weights=True)
    for head in w:
        np.testing.assert_array_equal(head.data[:, 4], 1.0)
        assert not np.delete(head.data, 4, axis=1).any()


def test_all_active_equals_unmasked(rng):
    d = 8
    params = tensors(_attn_raw(rng, d))
    q, kv = ad.constant(rng.normal(size=(4, d))), ad.constant(rng.normal(size=(7, d)))
    a = multi_head_attention(q, kv, kv, params, "a", 2, attention_mask(np.ones((4, 7), bool))).data
    b = multi_head_attention(q, kv, kv, params, "a", 2).data
    np.testing.assert_array_equal(a, b)
    c = multi_head_attention(q, kv, kv, params, "a", 2, attention_mask(np.zeros((4, 7), bool))).data
    np.testing.assert_array_equal(c, b)


def test_single_head_matches_loops(rng):
    d = 4
    raw = _attn_raw(rng, d)
    q, kv = rng.normal(size=(3, d)), rng.normal(size=(5, d))
    got = multi_head_attention(ad.constant(q), ad.constant(kv), ad.constant(kv), tensors(raw), "a", 1).data
    Q = q @ raw["a.wq"] + raw["a.bq"]
    K = kv @ raw["a.wk"] + raw["a.bk"]
    V = kv @ raw["a.wv"] + raw["a.bv"]
    ref = np.zeros((3, d))
    for i in range(3):
        s = [sum(Q[i, c] * K[j, c] for c in range(d)) / np.sqrt(d) for j in range(5)]
        e = [np.exp(x - max(s)) for x in s]
        ref[i] = sum(e[j] / sum(e) * V[j] for j in range(5))
    ref = ref @ raw["a.wo"] + raw["a.bo"]
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_key_order_invariance(rng):
    d = 8
    params = tensors(_attn_raw(rng, d))
    q, kv = rng.normal(size=(4, d)), rng.normal(size=(9, d))
    active = rng.uniform(size=(4, 9)) < 0.5
    perm = rng.permutation(9)
    a = multi_head_attention(ad.constant(q), ad.constant(kv), ad.constant(kv), params, "a", 4,
                             attention_mask(active)).data
    b = multi_head_attention(ad.constant(q), ad.constant(kv[perm]), ad.constant(kv[perm]), params, "a", 4,
                             attention_mask(active[:, perm])).data
    np.testing.assert_allclose(a, b, atol=1e-12)


# ------------------------------------------------------------------ mask module


def test_mask_module_shapes_and_oracle(rng):
    dec = DecoderConfig(num_queries=3, heads=2, dim=8, num_classes=2, levels_attended=1, iterations=1)
    raw = init_decoder_params(dec, rng, QueryInit.FPS_ZEROS)
    X, F0 = rng.normal(size=(3, 8)), rng.normal(size=(11, 8))
    pred = mask_module(ad.constant(X), ad.constant(F0), tensors(raw))
    assert pred.class_logits.shape == (3, 3) and pred.heatmap.shape == (3, 11)
    np.testing.assert_allclose(pred.class_probs().sum(axis=1), 1.0)

    mu = X.mean(axis=1, keepdims=True)
    h = (X - mu) / np.sqrt(X.var(axis=1, keepdims=True) + 1e-5)
    logits = h @ raw["decoder.class.w"] + raw["decoder.class.b"]
    e = h
    for i in (1, 2, 3):
        e = e @ raw[f"decoder.mask_mlp.w{i}"] + raw[f"decoder.mask_mlp.b{i}"]
        if i < 3:
            e = np.maximum(e, 0)
    np.testing.assert_allclose(pred.class_logits.data, logits, atol=1e-12)
    np.testing.assert_allclose(pred.heatmap.data, 1 / (1 + np.exp(-(e @ F0.T))), atol=1e-12)
    assert np.array_equal(pred.binary_mask, pred.heatmap.data > 0.5)


def test_zero_embedding_gives_half_heatmap(rng):
    dec = DecoderConfig(num_queries=2, heads=2, dim=4, num_classes=1, levels_attended=1, iterations=1)
    raw = init_decoder_params(dec, rng, QueryInit.FPS_ZEROS)
    raw["decoder.mask_mlp.w3"][:] = 0
    pred = mask_module(ad.constant(rng.normal(size=(2, 4))), ad.constant(rng.normal(size=(5, 4))), tensors(raw))
    np.testing.assert_array_equal(pred.heatmap.data, 0.5)
    assert not pred.binary_mask.any()


# ------------------------------------------------------------------ sampling


def test_sample_voxels(rng):
    np.testing.assert_array_equal(sample_voxels(10, 4, None, training=False), np.arange(10))
    np.testing.assert_array_equal(sample_voxels(3, 4, rng), np.arange(3))
    s = sample_voxels(100, 7, rng)
    assert len(s) == 7 and len(set(s)) == 7 and np.all(np.diff(s) > 0)
    with pytest.raises(UsageError):
        sample_voxels(100, 7, None)
    with pytest.raises(UsageError):
        sample_voxels(10, 0, rng)


# ------------------------------------------------------------------ full refinement


def test_prediction_count_and_determinism(small):
    bb, dec, scene = small
    net = Mask3DNet(bb, dec, seed=1)
    a = net.forward(scene)
    b = net.forward(scene)
    assert len(a) == dec.num_layers + 1
    for pa, pb in zip(a, b):
        np.testing.assert_array_equal(pa.heatmap.data, pb.heatmap.data)
        np.testing.assert_array_equal(pa.class_logits.data, pb.class_logits.data)


def test_layers_share_weights_per_level(small):
    bb, dec, scene = small
    net = Mask3DNet(bb, dec, seed=1)
    names = {k for k in net.params if k.startswith("decoder.layer")}
    assert {k.split(".")[1] for k in names} == {"layer0", "layer1"}
    base = net.forward(scene)
    # perturbing layer1 leaves predictions 0 and 1 alone and moves layer 2 (first use) and 4 (reuse)
    w = net.params["decoder.layer1.ffn.b2"]
    net.params["decoder.layer1.ffn.b2"] = ad.parameter(w.data + 0.5, w.name)
    moved = net.forward(scene)
    net.params["decoder.layer1.ffn.b2"] = w
    for i in (0, 1):
        np.testing.assert_array_equal(moved[i].heatmap.data, base[i].heatmap.data)
    for i in (2, 4):
        assert not np.array_equal(moved[i].class_logits.data, base[i].class_logits.data)


@pytest.mark.parametrize("use_self", [False, True])
def test_duplicate_queries_stay_identical(small, use_self):
    bb, dec, scene = small
    dec2 = DecoderConfig(**{**dec.__dict__, "self_attention": use_self})
    net = Mask3DNet(bb, dec2, seed=2)
    pyr = net.pyramid(scene)
    q = init_queries(QueryInit.FPS_ZEROS, pyr, 3, net.params, 16)
    pos = q.pos_emb.data.copy()
    pos[1] = pos[0]
    preds = refine(InstanceQuerySet(q.X, ad.constant(pos), q.init_mode), pyr, dec2, net.params)
    for p in preds:
        np.testing.assert_allclose(p.heatmap.data[0], p.heatmap.data[1], atol=1e-12)
        np.testing.assert_allclose(p.class_logits.data[0], p.class_logits.data[1], atol=1e-12)


def test_query_count_changes_at_inference(small):
    bb, dec, scene = small
    net = Mask3DNet(bb, dec, seed=0)
    for k in (1, 3, 12):
        assert net.forward(scene, num_queries=k)[-1].heatmap.shape == (k, scene.grid.num_voxels)
    para = Mask3DNet(bb, dec, QueryInit.PARAMETRIC, seed=0)
    with pytest.raises(UsageError):
        para.forward(scene, num_queries=7)


def test_training_sampling_uses_rng(small):
    bb, dec, scene = small
    dec2 = DecoderConfig(**{**dec.__dict__, "voxel_sample_limit": 4})
    net = Mask3DNet(bb, dec2, seed=0)
    a = net.forward(scene, training=True, rng=np.random.default_rng(0))[-1].heatmap.data
    b = net.forward(scene, training=True, rng=np.random.default_rng(0))[-1].heatmap.data
    c = net.forward(scene, training=False)[-1].heatmap.data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_dim_mismatch_rejected():
    with pytest.raises(ConfigError):
        Mask3DNet(BackboneConfig(widths=(8, 8), dim=16), DecoderConfig(dim=32, levels_attended=1))


def test_fps_query_encoding_matches_its_voxel(small):
    bb, dec, scene = small
    net = Mask3DNet(bb, dec, seed=0)
    pyr = net.pyramid(scene)
    q = init_queries(QueryInit.FPS_ZEROS, pyr, 5, net.params, 16)
    np.testing.assert_array_equal(q.pos_emb.data, voxel_positional_encodings(pyr, 16)[0][q.voxel_index])


def test_no_layers_gives_initial_prediction(small):
    bb, _, scene = small
    dec = DecoderConfig(num_queries=3, heads=4, levels_attended=1, iterations=0, num_classes=3, dim=16)
    assert len(Mask3DNet(bb, dec, seed=0).forward(scene)) == 1


def test_fps_with_every_voxel_covers_all_encodings(small):
    bb, dec, scene = small
    net = Mask3DNet(bb, dec, seed=0)
    pyr = net.pyramid(scene)
    n = scene.grid.num_voxels
    q = init_queries(QueryInit.FPS_ZEROS, pyr, n, net.params, 16)
    assert sorted(q.voxel_index.tolist()) == list(range(n))
    got = {tuple(r) for r in q.pos_emb.data}
    assert got == {tuple(r) for r in voxel_positional_encodings(pyr, 16)[0]}


def test_unit_dot_product_activates_voxel(rng):
    dec = DecoderConfig(num_queries=1, heads=2, dim=4, num_classes=1, levels_attended=1, iterations=1)
    params = tensors(init_decoder_params(dec, rng, QueryInit.FPS_ZEROS))
    from maskseg3d.decoder import mask_embedding

    X = ad.constant(rng.normal(size=(1, 4)))
    e = mask_embedding(X, params).data[0]
    F0 = np.vstack([e / np.dot(e, e), np.zeros(4)])
    heat = mask_module(X, ad.constant(F0), params).heatmap.data[0]
    assert heat[0] == pytest.approx(1 / (1 + np.exp(-1.0)), abs=1e-12) and heat[1] == 0.5


def test_masked_weights_oracle(rng):
    d = 8
    raw = _attn_raw(rng, d)
    X, F = rng.normal(size=(4, d)), rng.normal(size=(10, d))
    vpe, qpe = rng.normal(size=(10, d)), rng.normal(size=(4, d))
    active = rng.uniform(size=(4, 10)) < 0.4
    active[0] = False
    _, w = masked_cross_attention(ad.constant(X), ad.constant(F), ad.constant(vpe), ad.constant(qpe), active,
                                  tensors(raw), "a", 2, return_weights=True)
    mu = X.mean(1, keepdims=True)
    q_in = (X - mu) / np.sqrt(X.var(1, keepdims=True) + 1e-5) + qpe
    Q = q_in @ raw["a.wq"] + raw["a.bq"]
    K = (F + vpe) @ raw["a.wk"] + raw["a.bk"]
    for h, wh in enumerate(w):
        cols = slice(4 * h, 4 * h + 4)
        s = Q[:, cols] @ K[:, cols].T / 2.0
        allowed = active | ~active.any(axis=1, keepdims=True)
        e = np.where(allowed, np.exp(s - s.max(1, keepdims=True)), 0.0)
        np.testing.assert_allclose(wh.data, e / e.sum(1, keepdims=True), atol=1e-12)
        assert not wh.data[~allowed].any()
        np.testing.assert_allclose(wh.data.sum(1), 1.0)


def test_single_query_self_attention(rng):
    from maskseg3d.decoder import self_attention

    d = 8
    raw = _attn_raw(rng, d)
    x, pe = rng.normal(size=(1, d)), rng.normal(size=(1, d))
    out = self_attention(ad.constant(x), ad.constant(pe), tensors(raw), "a", 2).data
    h = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
    v = h @ raw["a.wv"] + raw["a.bv"]
    np.testing.assert_allclose(out, x + v @ raw["a.wo"] + raw["a.bo"], atol=1e-12)


def test_self_attention_permutation(rng):
    from maskseg3d.decoder import self_attention

    d = 8
    params = tensors(_attn_raw(rng, d))
    x, pe = rng.normal(size=(5, d)), rng.normal(size=(5, d))
    perm = rng.permutation(5)
    a = self_attention(ad.constant(x), ad.constant(pe), params, "a", 4).data
    b = self_attention(ad.constant(x[perm]), ad.constant(pe[perm]), params, "a", 4).data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_consecutive_layers_resample():
    equal = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        first, second = sample_voxels(100, 30, rng), sample_voxels(100, 30, rng)
        equal += np.array_equal(first, second)
    assert equal == 0
