import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from maskseg3d import autodiff as ad
from maskseg3d.decoder import PredictionSet
from maskseg3d.errors import ConfigError, UsageError
from maskseg3d.oracles import brute_force_assignment
from maskseg3d.supervision import (
    GroundTruthInstance,
    LossWeights,
    bce_mask_loss,
    class_ce_loss,
    cost_matrix,
    dice_loss,
    hungarian,
    layer_loss,
    total_loss,
)


def brute_force_pairs(cost):
    """Lexicographically smallest optimal pair list, by exhaustive search."""
    import itertools

    K, T = cost.shape
    best, best_pairs = None, None
    if K >= T:
        cands = (sorted((q, t) for t, q in enumerate(p)) for p in itertools.permutations(range(K), T))
    else:
        cands = ([(q, t) for q, t in enumerate(p)] for p in itertools.permutations(range(T), K))
    for pairs in cands:
        c = math.fsum(cost[q, t] for q, t in pairs)
        if best is None or c < best or (c == best and pairs < best_pairs):
            best, best_pairs = c, pairs
    return best_pairs


# ------------------------------------------------------------------ weights


def test_default_weights():
    w = LossWeights()
    assert (w.dice, w.bce, w.cls, w.no_object) == (2.0, 5.0, 2.0, 0.1)
    with pytest.raises(ConfigError):
        LossWeights(dice=0.0)


def test_empty_ground_truth_rejected():
    with pytest.raises(UsageError):
        GroundTruthInstance(np.zeros(4, bool), 0)


# ------------------------------------------------------------------ losses


def test_dice_examples():
    p = ad.constant(np.array([1.0, 1.0, 0.0, 0.0]))
    assert dice_loss(p, [1, 1, 0, 0]).item() == pytest.approx(0.0)
    assert dice_loss(p, [0, 0, 1, 1]).item() == pytest.approx(1 - 1 / 5)
    half = ad.constant(np.full(4, 0.5))
    assert dice_loss(half, [1, 0, 0, 0]).item() == pytest.approx(1 - 2 / 4)


def test_bce_examples():
    p = ad.constant(np.array([0.5, 0.5]))
    assert bce_mask_loss(p, [1, 0]).item() == pytest.approx(math.log(2))
    exact = bce_mask_loss(ad.constant(np.array([1.0, 0.0])), [1, 0]).item()
    assert 0 <= exact < 1e-11
    wrong = bce_mask_loss(ad.constant(np.array([0.0])), [1]).item()
    assert wrong == pytest.approx(-math.log(1e-12))


def test_class_ce_no_object_scaling():
    z = ad.constant(np.zeros(4))
    assert class_ce_loss(z, 1).item() == pytest.approx(math.log(4))
    assert class_ce_loss(z, 3).item() == pytest.approx(0.1 * math.log(4))
    with pytest.raises(UsageError):
        class_ce_loss(z, 4)


def test_cost_matrix_terms(rng):
    logits = rng.normal(size=(3, 4))
    heat = rng.uniform(0.01, 0.99, size=(3, 10))
    gts = rng.uniform(size=(2, 10)) < 0.5
    classes = [2, 0]
    for name, w in (("dice", LossWeights(1, 1e-30, 1e-30)), ("bce", LossWeights(1e-30, 1, 1e-30)),
                    ("ce", LossWeights(1e-30, 1e-30, 1))):
        c = cost_matrix(logits, heat, gts, classes, w)
        for q in range(3):
            for t in range(2):
                if name == "dice":
                    ref = dice_loss(ad.constant(heat[q]), gts[t]).item()
                elif name == "bce":
                    ref = bce_mask_loss(ad.constant(heat[q]), gts[t]).item()
                else:
                    z = logits[q] - logits[q].max()
                    ref = -(z[classes[t]] - math.log(np.exp(z).sum()))
                assert c[q, t] == pytest.approx(ref, abs=1e-9)


# ------------------------------------------------------------------ hungarian


def test_hungarian_small_examples():
    a = hungarian(np.array([[4.0, 1.0], [2.0, 8.0]]))
    assert a.pairs == [(0, 1), (1, 0)] and a.total_cost == 3.0
    b = hungarian(np.array([[5.0], [1.0], [3.0]]))
    assert b.pairs == [(1, 0)] and b.unmatched_queries == [0, 2]


def test_hungarian_ties_go_lexicographic():
    assert hungarian(np.zeros((3, 2))).pairs == [(0, 0), (1, 1)]
    assert hungarian(np.ones((4, 4))).pairs == [(i, i) for i in range(4)]
    c = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    assert hungarian(c).pairs == [(0, 1), (1, 0)]


def test_fewer_queries_than_targets_warns():
    with pytest.warns(UserWarning, match="fewer queries"):
        a = hungarian(np.array([[1.0, 0.0, 2.0]]))
    assert a.pairs == [(0, 1)] and a.unmatched_targets == [0, 2]


def test_hungarian_rejects_bad_input():
    with pytest.raises(UsageError):
        hungarian(np.array([[np.nan]]))
    with pytest.raises(UsageError):
        hungarian(np.zeros(3))
    assert hungarian(np.zeros((2, 0))).unmatched_queries == [0, 1]


costs = st.integers(1, 5).flatmap(lambda k: st.integers(1, 5).flatmap(
    lambda t: arrays(np.float64, (k, t), elements=st.one_of(st.integers(0, 3).map(float),
                                                            st.floats(-10, 10, allow_nan=False)))))


@given(costs)
def test_hungarian_matches_exhaustive(cost):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = hungarian(cost)
    assert a.total_cost == brute_force_assignment(cost)
    assert a.pairs == brute_force_pairs(cost)
    assert len(a.pairs) == min(cost.shape)


dyadic = st.integers(1, 5).flatmap(lambda k: st.integers(1, 5).flatmap(
    lambda t: arrays(np.float64, (k, t), elements=st.integers(-40, 40).map(lambda x: x / 4))))


@given(dyadic, st.integers(-100, 100))
def test_hungarian_invariant_to_constant_shift(cost, shift):
    # quarter-integer entries keep every shifted sum exact
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        base = hungarian(cost)
        moved = hungarian(cost + shift)
    assert moved.pairs == base.pairs


# ------------------------------------------------------------------ objective


def _pred(logits, heat):
    return PredictionSet(ad.parameter(np.asarray(logits, float)), ad.parameter(np.asarray(heat, float)))


@pytest.mark.parametrize("C,K,layers", [(1, 1, 1), (3, 5, 4), (4, 20, 10)])
def test_zero_instance_scene_loss(C, K, layers):
    preds = [_pred(np.zeros((K, C + 1)), np.full((K, 6), 0.3)) for _ in range(layers)]
    got = total_loss(preds, [], num_classes=C).item()
    assert got == pytest.approx(layers * K * 0.1 * 2 * math.log(C + 1))


def test_layer_loss_by_hand():
    logits = np.zeros((2, 3))
    heat = np.array([[0.9, 0.9, 0.1], [0.5, 0.5, 0.5]])
    target = GroundTruthInstance(np.array([True, True, False]), 1)
    loss, assign = layer_loss(_pred(logits, heat), [target], LossWeights(), 2)
    assert assign.pairs == [(0, 0)]
    bce = -(2 * math.log(0.9) + math.log(0.9)) / 3
    dice = 1 - (2 * 1.8 + 1) / (1.9 + 2 + 1)
    ce = math.log(3) + 0.1 * math.log(3)
    assert loss.item() == pytest.approx(5 * bce + 2 * dice + 2 * ce)


def test_layers_are_matched_independently(rng):
    targets = [GroundTruthInstance(rng.uniform(size=8) < 0.5, c) for c in (0, 1)]
    targets = [t for t in targets if t.mask.any()]
    a = _pred(rng.normal(size=(3, 3)), rng.uniform(size=(3, 8)))
    b = _pred(rng.normal(size=(3, 3)), rng.uniform(size=(3, 8)))
    ab = total_loss([a, b], targets).item()
    ba = total_loss([b, a], targets).item()
    assert ab == pytest.approx(ba, rel=1e-14)
    assert ab == pytest.approx(layer_loss(a, targets, LossWeights(), 2)[0].item()
                               + layer_loss(b, targets, LossWeights(), 2)[0].item())


def test_query_order_invariance(rng):
    targets = [GroundTruthInstance(np.arange(8) < 4, 0), GroundTruthInstance(np.arange(8) >= 5, 1)]
    logits, heat = rng.normal(size=(4, 3)), rng.uniform(size=(4, 8))
    perm = rng.permutation(4)
    a = total_loss([_pred(logits, heat)], targets).item()
    b = total_loss([_pred(logits[perm], heat[perm])], targets).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_loss_gradient(rng):
    targets = [GroundTruthInstance(np.arange(10) < 4, 0), GroundTruthInstance(np.arange(10) >= 6, 2)]
    p = _pred(rng.normal(size=(4, 4)), rng.uniform(0.2, 0.8, size=(4, 10)))
    ad.backward(total_loss([p], targets))
    for t in (p.class_logits, p.heatmap):
        for _ in range(5):
            idx = tuple(int(rng.integers(s)) for s in t.shape)
            num = ad.numerical_gradient(lambda: total_loss([p], targets).item(), t, idx)
            assert t.grad[idx] == pytest.approx(num, rel=1e-6, abs=1e-8)
