"""Specialization/generalization metric suite."""

import math

import numpy as np
import pytest

from demlearn.clustering import LevelAssignment
from demlearn.data import Dataset
from demlearn.hierarchy import build_tree
from demlearn.metrics import (
    accuracy,
    c_gen,
    c_spe,
    evaluate,
    g_metrics,
    global_metric,
    round_metrics,
)
from demlearn.models import LOGISTIC, ModelSpec

SPEC = ModelSpec(LOGISTIC, 2, 3)


class FakeShard:
    def __init__(self, client_id, test):
        self.client_id = client_id
        self.test = test


class FakeClient:
    def __init__(self, cid, w, test):
        self.id = cid
        self.w0 = w
        self.shard = FakeShard(cid, test)


def logits_model(rows, bias):
    """Pack a hand-set 2x3 weight matrix + bias into a flat vector."""
    w = np.zeros(SPEC.param_count)
    w[:6] = np.asarray(rows, dtype=float).ravel()
    w[6:] = bias
    return w


def ds(features, labels):
    return Dataset(np.asarray(features, dtype=float), np.asarray(labels), 3)


def test_accuracy_tie_breaks_to_lowest_class():
    w = np.zeros(SPEC.param_count)  # uniform probabilities, argmax -> class 0
    data = ds([[0.3, -0.1], [1.0, 2.0]], [0, 0])
    assert accuracy(SPEC, w, data) == 1.0
    assert accuracy(SPEC, w, ds([[0.3, -0.1]], [1])) == 0.0


def test_accuracy_single_sample():
    w = logits_model([[5.0, 0.0, -5.0], [0.0, 0.0, 0.0]], [0.0, 0.0, 0.0])
    assert accuracy(SPEC, w, ds([[1.0, 0.0]], [0])) == 1.0


def test_accuracy_hand_counted_fixture():
    # weights route class by sign of the first feature; second feature ignored
    w = logits_model([[2.0, 0.0, -2.0], [0.0, 0.0, 0.0]], [0.0, 0.1, 0.0])
    data = ds(
        [[1.0, 0.0], [-1.0, 0.0], [2.0, 1.0], [0.0, 3.0], [-2.0, -1.0]],
        [0, 2, 0, 1, 2],
    )
    # logits: x>0 -> class 0 wins; x<0 -> class 2 wins; x=0 -> class 1 (bias 0.1)
    assert accuracy(SPEC, w, data) == pytest.approx(1.0)
    flipped = ds([[1.0, 0.0], [-1.0, 0.0]], [2, 0])
    assert accuracy(SPEC, w, flipped) == 0.0


def test_evaluate_loss_matches_uniform():
    w = np.zeros(SPEC.param_count)
    acc, nll = evaluate(SPEC, w, ds([[0.5, 0.5]], [2]))
    assert nll == pytest.approx(math.log(3), abs=1e-12)


def test_c_spe_single_and_perfect():
    w = logits_model([[5.0, 0.0, -5.0], [0.0, 0.0, 0.0]], [0.0, 0.0, 0.0])
    client = FakeClient(0, w, ds([[1.0, 0.0]], [0]))
    acc, _ = c_spe(SPEC, [client])
    assert acc == 1.0
    clients = [client, FakeClient(1, w.copy(), ds([[-1.0, 0.0]], [2]))]
    acc2, _ = c_spe(SPEC, clients)
    assert acc2 == 1.0


def test_c_spe_is_mean_over_clients():
    w = logits_model([[5.0, 0.0, -5.0], [0.0, 0.0, 0.0]], [0.0, 0.0, 0.0])
    right = FakeClient(0, w, ds([[1.0, 0.0]], [0]))
    wrong = FakeClient(1, w.copy(), ds([[1.0, 0.0]], [1]))
    acc, _ = c_spe(SPEC, [right, wrong])
    assert acc == pytest.approx(0.5)


def test_c_gen_shared_model_equals_union_accuracy():
    w = logits_model([[5.0, 0.0, -5.0], [0.0, 0.0, 0.0]], [0.0, 0.0, 0.0])
    union = ds([[1.0, 0.0], [-1.0, 0.0], [1.0, 1.0]], [0, 2, 1])
    clients = [FakeClient(i, w.copy(), union) for i in range(3)]
    acc, _ = c_gen(SPEC, clients, union)
    assert acc == pytest.approx(accuracy(SPEC, w, union))


def test_c_gen_two_client_hand_count():
    w_good = logits_model([[5.0, 0.0, -5.0], [0.0, 0.0, 0.0]], [0.0, 0.0, 0.0])
    w_zero = np.zeros(SPEC.param_count)
    union = ds([[1.0, 0.0], [-1.0, 0.0]], [0, 2])
    clients = [
        FakeClient(0, w_good, union),  # 2/2 correct
        FakeClient(1, w_zero, union),  # ties -> class 0: 1/2 correct
    ]
    acc, _ = c_gen(SPEC, clients, union)
    assert acc == pytest.approx((1.0 + 0.5) / 2)


def tree_for(clients, assign):
    return build_tree(assign, {c.id: c.w0 for c in clients})


def test_g_metrics_k1_empty():
    w = np.zeros(SPEC.param_count)
    union = ds([[1.0, 0.0]], [0])
    clients = [FakeClient(i, w.copy(), union) for i in range(2)]
    tree = tree_for(clients, LevelAssignment(1, {1: [[0, 1]]}))
    gs, gg, gsl, ggl = g_metrics(SPEC, tree, [c.shard for c in clients], union)
    assert gs == () and gg == ()


def test_g_metrics_identical_models_match_global():
    w = logits_model([[5.0, 0.0, -5.0], [0.0, 0.0, 0.0]], [0.0, 0.0, 0.0])
    union = ds([[1.0, 0.0], [-1.0, 0.0], [0.5, 1.0]], [0, 2, 0])
    clients = [FakeClient(i, w.copy(), union) for i in range(4)]
    assign = LevelAssignment(2, {2: [[0, 1, 2, 3]], 1: [[0, 1], [2, 3]]})
    tree = tree_for(clients, assign)
    gs, gg, _, _ = g_metrics(SPEC, tree, [c.shard for c in clients], union)
    ga, _ = global_metric(SPEC, tree.root.model, union)
    assert all(v == pytest.approx(ga) for v in gg)
    assert ga == pytest.approx(accuracy(SPEC, w, union))


def test_g_metrics_two_group_hand_count():
    w_good = logits_model([[5.0, 0.0, -5.0], [0.0, 0.0, 0.0]], [0.0, 0.0, 0.0])
    w_anti = logits_model([[-5.0, 0.0, 5.0], [0.0, 0.0, 0.0]], [0.0, 0.0, 0.0])
    t_pos = ds([[1.0, 0.0]], [0])
    t_neg = ds([[1.0, 0.0]], [2])
    union = ds([[1.0, 0.0], [1.0, 0.0]], [0, 2])
    clients = [
        FakeClient(0, w_good, t_pos),
        FakeClient(1, w_good.copy(), t_pos),
        FakeClient(2, w_anti, t_neg),
        FakeClient(3, w_anti.copy(), t_neg),
    ]
    assign = LevelAssignment(2, {2: [[0, 1, 2, 3]], 1: [[0, 1], [2, 3]]})
    tree = tree_for(clients, assign)
    gs, gg, _, _ = g_metrics(SPEC, tree, [c.shard for c in clients], union)
    # each group model is its members' (identical) model: fits own shard,
    # scores 1/2 on the union
    assert gs[0] == pytest.approx(1.0)
    assert gg[0] == pytest.approx(0.5)


def test_round_metrics_invariant_under_client_reordering():
    rng = np.random.default_rng(0)
    union = ds(rng.normal(0, 1, (6, 2)), rng.integers(0, 3, 6))
    clients = [
        FakeClient(i, rng.normal(0, 0.5, SPEC.param_count), union) for i in range(4)
    ]
    assign = LevelAssignment(2, {2: [[0, 1, 2, 3]], 1: [[0, 1], [2, 3]]})
    tree = tree_for(clients, assign)
    m1 = round_metrics(SPEC, 0, clients, union, tree=tree)
    m2 = round_metrics(SPEC, 0, list(reversed(clients)), union, tree=tree)
    assert m1.c_spe == m2.c_spe and m1.c_gen == m2.c_gen
    assert m1.g_spe == m2.g_spe and m1.global_acc == m2.global_acc


def test_round_metrics_baseline_path():
    rng = np.random.default_rng(1)
    union = ds(rng.normal(0, 1, (5, 2)), rng.integers(0, 3, 5))
    clients = [FakeClient(i, np.zeros(SPEC.param_count), union) for i in range(2)]
    m = round_metrics(SPEC, 3, clients, union, global_model=np.zeros(SPEC.param_count))
    assert m.t == 3
    assert m.g_spe == () and m.g_gen == ()
    assert m.global_acc == pytest.approx(accuracy(SPEC, np.zeros(SPEC.param_count), union))
    with pytest.raises(ValueError):
        round_metrics(SPEC, 0, clients, union)
