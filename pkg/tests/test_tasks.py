import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqcl.errors import ConfigError, DomainError, ShapeError
from seqcl.neural import ModelConfig, evaluate, init_model, train_pass
from seqcl.numerics import RngStream
from seqcl.tasks import (DomainTransform, LabeledDataset, PartitionSpec, generate_global, load_dataset,
                         load_partition, partition, sample_minibatch, save_dataset, save_partition)


def test_generate_counts():
    d = generate_global(2, 10, 3, 0)
    assert d.features.shape == (20, 3)
    assert np.bincount(d.labels).tolist() == [10, 10]
    assert len(generate_global(5, 1, 3, 0)) == 5
    with pytest.raises(ConfigError):
        generate_global(0, 10, 3, 0)


def test_generate_deterministic():
    a, b = generate_global(3, 5, 4, 9), generate_global(3, 5, 4, 9)
    assert np.array_equal(a.features, b.features)
    assert not np.array_equal(a.features, generate_global(3, 5, 4, 10).features)


def test_blobs_are_learnable():
    data = generate_global(4, 150, 8, 0, class_sep=3.0)
    node = partition(data, PartitionSpec("iid", 1), 0)[0][0]
    m = init_model(ModelConfig(8, (32,), 4), RngStream(0, ("i",)))
    for k in range(10):
        m, _ = train_pass(m, node.train_sub.features, node.train_sub.labels, 0.05, 16, RngStream(0, (k, "t")))
    assert evaluate(m, node.test_sub) >= 0.9


def test_dataset_validation():
    with pytest.raises(ShapeError):
        LabeledDataset(np.zeros((3, 2)), [0, 1], 2)
    with pytest.raises(DomainError):
        LabeledDataset(np.zeros((2, 2)), [0, 2], 2)


def test_class_noniid_example():
    data = generate_global(6, 10, 3, 0)
    nodes, _ = partition(data, PartitionSpec("class_noniid", 3, classes_per_node=(2, 2)), 0)
    sets = [n.class_set for n in nodes]
    assert all(len(s) == 2 for s in sets)
    assert frozenset().union(*sets) == frozenset(range(6))
    assert all(not (a & b) for i, a in enumerate(sets) for b in sets[i + 1:])


def test_iid_single_node_holds_everything():
    data = generate_global(3, 20, 4, 1)
    nodes, global_test = partition(data, PartitionSpec("iid", 1), 1)
    node = nodes[0]
    assert sorted(np.concatenate([node.train_index, node.test_index]).tolist()) == list(range(60))
    assert len(global_test) == len(node.test_sub)


def test_scaled_class_bounds():
    data = generate_global(20, 20, 4, 0)
    for seed in range(20):
        nodes, _ = partition(data, PartitionSpec("class_noniid", 4, classes_per_node=(3, 6)), seed)
        assert all(3 <= len(n.class_set) <= 6 for n in nodes)


def test_infeasible_class_split_names_the_bound():
    data = generate_global(5, 4, 2, 0)
    with pytest.raises(ConfigError, match="exceeds class_count"):
        partition(data, PartitionSpec("class_noniid", 3, classes_per_node=(2, 3)), 0)


def test_spec_validation():
    with pytest.raises(ConfigError):
        PartitionSpec("iid", 2, test_fraction=1.0)
    with pytest.raises(ConfigError):
        PartitionSpec("weird")
    with pytest.raises(ConfigError):
        PartitionSpec("domain_noniid", 2, domain_transforms=(DomainTransform(),))
    with pytest.raises(ConfigError):
        partition(generate_global(2, 2, 2, 0), PartitionSpec("iid", 1))  # no seed anywhere


specs = st.builds(
    lambda mode, n, lo, span, frac, seed, sized: PartitionSpec(
        mode, n,
        classes_per_node=(lo, lo + span) if mode == "class_noniid" else None,
        samples_per_node=(5, 40) if sized else None,
        test_fraction=frac, seed=seed),
    st.sampled_from(["iid", "class_noniid", "domain_noniid"]),
    st.integers(1, 6), st.integers(1, 3), st.integers(0, 3),
    st.floats(0.05, 0.95), st.integers(0, 10**6), st.booleans(),
)


@settings(max_examples=100, deadline=None)
@given(specs)
def test_partition_invariants(spec):
    data = generate_global(18, 12, 5, 3)
    nodes, global_test = partition(data, spec)
    seen_train, seen_test = [], []
    for node in nodes:
        train, test = set(node.train_index.tolist()), set(node.test_index.tolist())
        assert not train & test
        labels = set(data.labels[node.train_index].tolist()) | set(data.labels[node.test_index].tolist())
        assert node.class_set == labels
        # transforms preserve labels
        assert np.array_equal(node.train_sub.labels, data.labels[node.train_index])
        if spec.mode != "domain_noniid":
            assert np.array_equal(node.test_sub.features, data.features[node.test_index])
        seen_train += node.train_index.tolist()
        seen_test += node.test_index.tolist()
    assert len(set(seen_train + seen_test)) == len(seen_train) + len(seen_test)
    assert not set(seen_train) & set(seen_test)
    assert len(global_test) == len(seen_test)
    assert np.array_equal(global_test.labels, np.concatenate([n.test_sub.labels for n in nodes]))
    if spec.mode == "class_noniid":
        sets = [n.class_set for n in nodes]
        assert all(not (a & b) for i, a in enumerate(sets) for b in sets[i + 1:])
    if spec.samples_per_node is None and spec.mode != "class_noniid":
        assert len(seen_train) + len(seen_test) == len(data)
    again, _ = partition(data, spec)
    assert all(np.array_equal(a.train_index, b.train_index) and np.array_equal(a.train_sub.features, b.train_sub.features)
               for a, b in zip(nodes, again))


def test_domain_transform_sparsifies():
    data = generate_global(4, 50, 8, 0)
    spec = PartitionSpec("domain_noniid", 2, domain_transforms=(DomainTransform(sparsify=0.75), DomainTransform()))
    nodes, _ = partition(data, spec, 0)
    zero_cols = np.all(nodes[0].train_sub.features == 0, axis=0)
    assert zero_cols.sum() == 6
    assert nodes[0].domain_tag == "domain-1"
    assert not np.all(nodes[1].train_sub.features == 0, axis=0).any()


def one_node(seed=0, classes=2, per_class=50):
    data = generate_global(classes, per_class, 3, seed)
    return partition(data, PartitionSpec("iid", 1, test_fraction=0.2), seed)[0][0]


def test_minibatch_full_size_is_a_permutation():
    node = one_node()
    n = len(node.train_sub)
    x, y = sample_minibatch(node, n, RngStream(0, ("b",)))
    assert sorted(map(tuple, x.tolist())) == sorted(map(tuple, node.train_sub.features.tolist()))
    x2, _ = sample_minibatch(node, n, RngStream(0, ("b",)))
    assert np.array_equal(x, x2)
    big, _ = sample_minibatch(node, n + 5, RngStream(0, ("b",)))
    assert big.shape[0] == n + 5


def test_minibatch_class_frequencies():
    node = one_node(1, 2, 100)
    share = np.mean(node.train_sub.labels == 1)
    hits = [sample_minibatch(node, 1, RngStream(0, ("draw", i)))[1][0] for i in range(10000)]
    assert abs(np.mean(np.asarray(hits) == 1) - share) <= 0.02


def test_minibatch_empty_node():
    node = one_node()
    empty = type(node)(9, node.train_sub.subset([]), node.test_sub, frozenset(), np.zeros(0, int), node.test_index)
    with pytest.raises(DomainError):
        sample_minibatch(empty, 2, RngStream(0))


@pytest.mark.parametrize("mode", ["iid", "class_noniid", "domain_noniid"])
def test_files_round_trip(tmp_path, mode):
    data = generate_global(6, 15, 4, 2)
    spec = PartitionSpec(mode, 3, classes_per_node=(1, 2) if mode == "class_noniid" else None)
    nodes, global_test = partition(data, spec, 2)
    save_dataset(tmp_path / "data.npz", data)
    save_partition(tmp_path / "partition.json", nodes, spec, "data.npz")
    back = load_dataset(tmp_path / "data.npz")
    assert np.array_equal(back.features, data.features) and np.array_equal(back.labels, data.labels)
    nodes2, global2, spec2 = load_partition(tmp_path / "partition.json")
    assert spec2 == spec
    for a, b in zip(nodes, nodes2):
        assert a.node_id == b.node_id and a.class_set == b.class_set
        assert np.array_equal(a.train_sub.features, b.train_sub.features)
        assert np.array_equal(a.test_sub.labels, b.test_sub.labels)
    assert np.array_equal(global_test.features, global2.features)
