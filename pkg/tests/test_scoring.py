import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqcl.errors import ShapeError, StateError
from seqcl.neural import ForwardTrace, ModelConfig, forward, init_model
from seqcl.numerics import RngStream
from seqcl.scoring import (ScoreSet, activation_codes, activation_statistics, build_kernel, nwot_score,
                           score_all_nodes)
from seqcl.tasks import PartitionSpec, generate_global, partition


def model(seed=0, p1=0.5, p2=0.2, dims=(8, 32, 32, 4)):
    return init_model(ModelConfig(dims[0], dims[1:-1], dims[-1], "relu", p1, p2), RngStream(seed, ("init",)))


def batch(seed, n=16, d=8):
    return np.random.default_rng(seed).normal(size=(n, d))


def test_code_examples():
    trace = ForwardTrace(None, [np.zeros((3, 3))], [np.array([[0.5, 0.0, 1.2], [0.0, 0.0, 0.0], [0.5, 0.0, 1.2]])],
                         True)
    codes = activation_codes(trace)
    assert codes[0].tolist() == [1, 0, 1]
    assert codes[1].tolist() == [0, 0, 0]
    assert np.array_equal(codes[0], codes[2])


def test_codes_need_capture():
    trace = forward(model(), batch(0), capture=False)
    with pytest.raises(StateError):
        activation_codes(trace)


def test_codes_concatenate_layers():
    trace = forward(model(), batch(0), capture=True)
    assert activation_codes(trace).shape == (16, 64)


def test_kernel_examples():
    assert np.array_equal(build_kernel([(1, 0, 1), (1, 1, 0)]), [[3, 1], [1, 3]])
    assert np.array_equal(build_kernel([(1, 0, 1), (1, 0, 1)]), [[3, 3], [3, 3]])
    assert np.array_equal(build_kernel([(1, 1, 1), (0, 0, 0)]), [[3, 0], [0, 3]])
    with pytest.raises(ShapeError):
        build_kernel([(1, 0), (1, 0, 1)])
    with pytest.raises(ShapeError):
        build_kernel([(1, 0, 1)])


def test_kernel_equals_hamming_oracle():
    rng = np.random.default_rng(5)
    codes = rng.integers(0, 2, size=(9, 13))
    k = build_kernel(codes)
    for i in range(9):
        for j in range(9):
            assert k[i, j] == 13 - sum(a != b for a, b in zip(codes[i], codes[j]))


def test_worked_example_score():
    k = build_kernel([(1, 0, 1), (1, 1, 0)])
    from seqcl.numerics import log_det_psd
    assert abs(log_det_psd(k) - math.log(8)) <= 1e-12


def test_worked_example_through_a_model():
    # identity first layer, so the post-activation codes are exactly the inputs' sign pattern
    from seqcl.neural import Model
    cfg = ModelConfig(3, (3,), 2)
    m = Model(cfg, ((np.eye(3), np.zeros(3)), (np.zeros((3, 2)), np.zeros(2))))
    assert abs(nwot_score(m, [[1.0, -1.0, 2.0], [0.5, 3.0, -0.2]]) - math.log(8)) <= 1e-12


def test_kernel_symmetry_and_diagonal_on_scored_batches():
    m = model(1)
    for seed in range(50):
        codes = activation_codes(forward(m, batch(seed), capture=True))
        k = build_kernel(codes)
        assert np.array_equal(k, k.T)
        assert np.all(np.diag(k) == codes.shape[1])


def test_duplicate_batch_scores_below_distinct():
    m = model(2)
    for seed in range(50):
        x = batch(seed)
        copies = np.repeat(x[:1], len(x), axis=0)
        assert nwot_score(m, copies) < nwot_score(m, x)


def test_order_invariance():
    m = model(3)
    for seed in range(50):
        x = batch(seed)
        perm = np.random.default_rng(seed + 1000).permutation(len(x))
        assert abs(nwot_score(m, x[perm]) - nwot_score(m, x)) < 1e-9


def test_duplicate_degradation():
    m = model(4)
    for seed in range(50):
        x = batch(seed)
        row = np.random.default_rng(seed).integers(len(x))
        assert nwot_score(m, np.vstack([x, x[row:row + 1]])) <= nwot_score(m, x)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_degenerate_aid_score_equals_relu(seed):
    m = model(seed % 7, p1=1.0, p2=0.0)
    x = batch(seed)
    assert nwot_score(m, x, "aid", RngStream(seed, ("aid-mask",))) == nwot_score(m, x)


def test_aid_diverges_from_relu():
    differs = 0
    for seed in range(100):
        m = model(seed)
        x = batch(seed)
        differs += nwot_score(m, x, "aid", RngStream(seed, ("aid-mask",))) != nwot_score(m, x)
    assert differs >= 95


def test_aid_score_deterministic_per_stream():
    m = model(0)
    x = batch(0)
    s = RngStream(3, (0, 1, "aid-mask"))
    assert nwot_score(m, x, "aid", s) == nwot_score(m, x, "aid", s)


def nodes_for(seed, mode="class_noniid"):
    data = generate_global(8, 30, 8, seed)
    spec = PartitionSpec(mode, 4, classes_per_node=(1, 2)) if mode == "class_noniid" else PartitionSpec(mode, 4)
    return partition(data, spec, seed)[0]


@pytest.mark.parametrize("variant", ["relu", "aid"])
def test_schedule_independence(variant):
    m = model(5)
    nodes = nodes_for(5)
    serial = score_all_nodes(m, nodes, variant, 3, 16, 11)
    threaded = score_all_nodes(m, nodes, variant, 3, 16, 11, workers=4)
    reversed_order = score_all_nodes(m, nodes[::-1], variant, 3, 16, 11)
    assert serial == threaded == reversed_order
    assert sorted(serial.scores) == [1, 2, 3, 4]
    assert all(math.isfinite(v) for v in serial.scores.values())


def test_tiny_node_is_skipped():
    nodes = nodes_for(6)
    n = nodes[1]
    tiny = dataclasses.replace(n, train_sub=n.train_sub.subset([0]))
    scores = score_all_nodes(model(0), [nodes[0], tiny], "relu", 0, 8, 0)
    assert list(scores.scores) == [nodes[0].node_id]
    assert scores.skipped == (tiny.node_id,)


def test_domain_score_fixture_argmax():
    names = {1: "real", 2: "infograph", 3: "sketch", 4: "quickdraw"}
    scores = ScoreSet(0, "relu", {1: 1738.6, 2: 1729.7, 3: 1788.3, 4: 1803.4}, 32)
    assert names[scores.argmax()] == "quickdraw"
    assert scores.argmax([1, 2, 3]) == 3


def test_single_node_and_tie():
    assert ScoreSet(0, "relu", {7: -3.0}, 32).argmax() == 7
    node = nodes_for(7)[0]
    clone = dataclasses.replace(node, node_id=9)
    m = model(7)
    # both paths keyed by the same node id give equal scores
    a = score_all_nodes(m, [node], "relu", 0, 16, 1).scores[node.node_id]
    b = score_all_nodes(m, [dataclasses.replace(clone, node_id=node.node_id)], "relu", 0, 16, 1).scores[node.node_id]
    assert a == b
    tied = ScoreSet(0, "relu", {9: a, node.node_id: b}, 16)
    assert tied.argmax() == node.node_id


def test_scoreset_round_trip():
    s = ScoreSet(4, "aid", {1: 1.5, 2: -0.25}, 32, (3,))
    assert ScoreSet.from_dict(s.to_dict()) == s


def test_activation_statistics_shape():
    stats = activation_statistics(model(0), batch(0))
    assert len(stats) == 2
    assert len(stats[0]["firing_rate"]) == 32
    assert all(0.0 <= v <= 1.0 for v in stats[1]["firing_rate"])
