import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqcl.errors import ConfigError, DomainError, ShapeError
from seqcl.neural import Model, ModelConfig, init_model, train_pass
from seqcl.numerics import RngStream
from seqcl.regularizers import (Anchor, EwcState, consolidate, estimate_fisher, ewc_penalty, state_from_dict,
                                state_to_dict)
from seqcl.tasks import DataNode, LabeledDataset, PartitionSpec, generate_global, partition


def make_node(x, y, classes, node_id=1):
    data = LabeledDataset(np.asarray(x, dtype=float), y, classes)
    idx = np.arange(len(data))
    return DataNode(node_id, data, data, frozenset(int(v) for v in data.labels), idx, idx)


def logistic_model(w):
    cfg = ModelConfig(1, (1,), 2)
    return Model(cfg, ((np.array([[1.0]]), np.zeros(1)), (np.array([[0.0, w]]), np.zeros(2))))


def test_penalty_example():
    state = EwcState(lam=2.0, anchors=(Anchor((np.zeros(2),), (np.array([1.0, 2.0]),), 1),))
    value, grads = ewc_penalty([np.ones(2)], state)
    assert value == 3.0
    assert np.array_equal(grads[0], [2.0, 4.0])


def test_penalty_zero_at_anchor_and_on_zero_fisher():
    theta = (np.array([0.5, -1.0]),)
    state = EwcState(lam=5.0, anchors=(Anchor(theta, (np.array([1.0, 0.0]),), 1),))
    assert ewc_penalty([theta[0].copy()], state)[0] == 0.0
    # moving only where the Fisher is zero costs nothing
    assert ewc_penalty([np.array([0.5, 7.0])], state)[0] == 0.0


def test_penalty_shape_error():
    state = EwcState(anchors=(Anchor((np.zeros(2),), (np.ones(2),), 1),))
    with pytest.raises(ShapeError):
        ewc_penalty([np.zeros(3)], state)
    with pytest.raises(ShapeError):
        ewc_penalty([np.zeros(2), np.zeros(1)], state)


def random_state(rng, shapes, n_anchors, lam):
    anchors = []
    for k in range(n_anchors):
        anchors.append(Anchor(tuple(rng.normal(size=s) for s in shapes),
                              tuple(rng.exponential(size=s) for s in shapes), k + 1))
    return EwcState(lam=lam, anchors=tuple(anchors))


def test_penalty_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    h = 1e-4
    for trial in range(25):
        shapes = [(3, 2), (2,), (2, 4), (4,)]
        state = random_state(rng, shapes, 1 + trial % 3, float(rng.uniform(0.1, 100)))
        params = [rng.normal(size=s) for s in shapes]
        _, grads = ewc_penalty(params, state)
        for k, p in enumerate(params):
            for idx in np.ndindex(p.shape):
                plus = [q.copy() for q in params]
                minus = [q.copy() for q in params]
                plus[k][idx] += h
                minus[k][idx] -= h
                numeric = (ewc_penalty(plus, state)[0] - ewc_penalty(minus, state)[0]) / (2 * h)
                g = grads[k][idx]
                assert abs(numeric - g) <= 1e-5 * max(abs(numeric), abs(g), 1e-8)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 1e3))
def test_penalty_non_negative(seed, lam):
    rng = np.random.default_rng(seed)
    state = random_state(rng, [(2, 3)], 2, lam)
    assert ewc_penalty([rng.normal(size=(2, 3))], state)[0] >= 0.0


@pytest.mark.parametrize("x,w", [(0.5, 1.0), (1.0, -2.0), (2.0, 0.3), (3.0, 0.0)])
def test_true_fisher_matches_logistic_closed_form(x, w):
    m = logistic_model(w)
    node = make_node([[x]], [1], 2)
    fisher = estimate_fisher(m, node, batches=1, batch_size=1, stream=RngStream(0, ("f",)), mode="true")
    p = 1.0 / (1.0 + np.exp(-w * x))
    expected = p * (1 - p) * x * x
    assert abs(fisher[2][0, 1] - expected) <= 1e-6
    assert abs(fisher[2][0, 0] - expected) <= 1e-6


def test_frozen_layer_has_zero_fisher():
    cfg = ModelConfig(3, (4,), 3)
    rng = np.random.default_rng(1)
    m = Model(cfg, ((rng.normal(size=(3, 4)), rng.normal(size=4)), (np.zeros((4, 3)), rng.normal(size=3))))
    node = make_node(rng.normal(size=(20, 3)), rng.integers(0, 3, 20), 3)
    for mode in ("true", "sampled", "empirical"):
        fisher = estimate_fisher(m, node, 2, RngStream(0, ("f",)), 8, mode)
        assert np.all(fisher[0] == 0) and np.all(fisher[1] == 0)
        assert all(np.all(f >= 0) for f in fisher)


def test_fisher_errors():
    m = init_model(ModelConfig(2, (3,), 2), RngStream(0, ("i",)))
    node = make_node(np.zeros((0, 2)), np.zeros(0, dtype=int), 2)
    with pytest.raises(DomainError):
        estimate_fisher(m, node)
    full = make_node(np.ones((4, 2)), [0, 1, 0, 1], 2)
    with pytest.raises(DomainError):
        estimate_fisher(m, full, batches=0)
    with pytest.raises(ConfigError):
        estimate_fisher(m, full, mode="nope")


def test_batch_doubling_within_monte_carlo_envelope():
    data = generate_global(4, 200, 6, 0)
    node = partition(data, PartitionSpec("iid", 1), 0)[0][0]
    m = init_model(ModelConfig(6, (16,), 4), RngStream(0, ("i",)))
    stream = RngStream(0, ("fisher",))
    flat = lambda f: np.concatenate([v.ravel() for v in f])
    f8 = flat(estimate_fisher(m, node, 8, stream, 16))
    f16 = flat(estimate_fisher(m, node, 16, stream, 16))
    # per-batch spread from independent single-batch estimates
    singles = np.array([flat(estimate_fisher(m, node, 1, RngStream(1, ("spread", b)), 16)) for b in range(40)])
    var = singles.var(axis=0, ddof=1)
    # the 16-batch run reuses the first 8 batches, so f16 - f8 = (S2 - S1) / 16 with variance var / 16
    assert np.sum((f16 - f8) ** 2) <= 3.0 * np.sum(var) / 16


def test_consolidate_appends_and_replaces():
    data = generate_global(4, 50, 5, 0)
    nodes = partition(data, PartitionSpec("iid", 3), 0)[0]
    m = init_model(ModelConfig(5, (8,), 4), RngStream(0, ("i",)))
    state = consolidate(EwcState(fisher_batches=2), m, nodes[2], RngStream(0, ("f", 1)))
    assert len(state.anchors) == 1 and state.anchors[0].source_node == 3
    m2 = m.with_params([p + 1.0 for p in m.params()])
    state = consolidate(state, m, nodes[0], RngStream(0, ("f", 2)))
    state = consolidate(state, m2, nodes[2], RngStream(0, ("f", 3)))
    assert sorted(a.source_node for a in state.anchors) == [1, 3]
    newest = [a for a in state.anchors if a.source_node == 3][0]
    assert np.array_equal(newest.theta_star[0], m2.params()[0])


def test_state_round_trip():
    rng = np.random.default_rng(3)
    state = random_state(rng, [(2, 3), (3,)], 2, 7.5)
    back = state_from_dict(json.loads(json.dumps(state_to_dict(state))))
    assert back.lam == state.lam and len(back.anchors) == 2
    for a, b in zip(state.anchors, back.anchors):
        assert a.source_node == b.source_node
        assert all(np.array_equal(p, q) for p, q in zip(a.fisher, b.fisher))


def two_task_setup():
    data = generate_global(8, 100, 8, 0)
    nodes = partition(data, PartitionSpec("class_noniid", 2, classes_per_node=(3, 4)), 0)[0]
    m = init_model(ModelConfig(8, (16, 16), 8), RngStream(0, ("i",)))
    m, _ = train_pass(m, nodes[0].train_sub.features, nodes[0].train_sub.labels, 0.05, 32, RngStream(0, ("t",)))
    state = consolidate(EwcState(), m, nodes[0], RngStream(0, ("f",)))
    return m, state, nodes[1]


def steps(m, node, state, n, update):
    x, y = node.train_sub.features[:32], node.train_sub.labels[:32]
    for k in range(n):
        m, _ = train_pass(m, x, y, 0.05, 32, RngStream(0, ("s", k)), state, penalty_update=update)
    return m


@pytest.mark.parametrize("update", ["proximal", "explicit"])
def test_lambda_zero_is_bit_identical(update):
    m, state, other = two_task_setup()
    free = steps(m, other, None, 20, update)
    zero = steps(m, other, dataclasses.replace(state, lam=0.0), 20, update)
    assert all(np.array_equal(a, b) for a, b in zip(free.params(), zero.params()))


def test_large_lambda_anchors():
    m, state, other = two_task_setup()
    flat = lambda model: np.concatenate([p.ravel() for p in model.params()])
    start = flat(m)
    free = flat(steps(m, other, None, 100, "proximal")) - start
    held = flat(steps(m, other, dataclasses.replace(state, lam=1e6), 100, "proximal")) - start
    # coordinates with zero Fisher carry no penalty, so anchoring is measured on the Fisher support
    support = np.concatenate([f.ravel() for f in state.anchors[0].fisher]) > 0
    assert np.linalg.norm(held[support]) < 0.01 * np.linalg.norm(free[support])


def test_prox_is_the_exact_minimizer():
    rng = np.random.default_rng(2)
    state = random_state(rng, [(3,)], 2, 4.0)
    p = rng.normal(size=3)
    lr = 0.3
    t = state.prox([p], lr)[0]
    # stationarity of |t - p|^2 / (2 lr) + penalty(t)
    grad = (t - p) / lr + ewc_penalty([t], state)[1][0]
    assert np.allclose(grad, 0.0, atol=1e-12)
