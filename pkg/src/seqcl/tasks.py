"""Synthetic data and its partition into data nodes.

A global Gaussian-blob dataset is split across ``N`` nodes under one of three
regimes (``iid``, ``class_noniid``, ``domain_noniid``). Every node keeps a
disjoint train/test sub-split of its allocation; the union of all node test
splits forms the centralized global test set.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .numerics import RngStream

PARTITION_MODES = ("iid", "class_noniid", "domain_noniid")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or labels.ndim != 1 or features.shape[0] != labels.shape[0]:
            raise ShapeError(f"features {features.shape} do not match labels {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise DomainError("labels must lie in [0, class_count)")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(self.features[index], self.labels[index], self.class_count)

    @staticmethod
    def concat(parts, class_count: int, input_dim: int) -> "LabeledDataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            return LabeledDataset(np.zeros((0, input_dim)), np.zeros(0, dtype=np.int64), class_count)
        return LabeledDataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            class_count,
        )


@dataclass(frozen=True)
class DomainTransform:
    """Recipe for one node's feature-space shift (label preserving)."""

    rotate: bool = True
    bias_scale: float = 1.0
    scale: float = 1.0
    sparsify: float = 0.0  # fraction of coordinates forced to zero


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "iid"
    n_nodes: int = 4
    classes_per_node: tuple | None = None
    samples_per_node: tuple | None = None
    test_fraction: float = 0.3
    domain_transforms: tuple | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.mode not in PARTITION_MODES:
            raise ConfigError(f"partition mode must be one of {PARTITION_MODES}, got {self.mode!r}")
        if self.n_nodes < 1:
            raise ConfigError("n_nodes must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie strictly between 0 and 1")
        for name in ("classes_per_node", "samples_per_node"):
            bounds = getattr(self, name)
            if bounds is None:
                continue
            bounds = tuple(int(v) for v in bounds)
            if len(bounds) != 2 or bounds[0] < 1 or bounds[0] > bounds[1]:
                raise ConfigError(f"{name} must be a (min, max) pair with 1 <= min <= max")
            object.__setattr__(self, name, bounds)
        if self.domain_transforms is not None:
            transforms = tuple(
                t if isinstance(t, DomainTransform) else DomainTransform(**t) for t in self.domain_transforms
            )
            if len(transforms) != self.n_nodes:
                raise ConfigError("domain_transforms needs exactly one entry per node")
            for t in transforms:
                if not 0.0 <= t.sparsify < 1.0:
                    raise ConfigError("sparsify must lie in [0, 1)")
            object.__setattr__(self, "domain_transforms", transforms)

    def to_dict(self) -> dict:
        out = asdict(self)
        for name in ("classes_per_node", "samples_per_node"):
            if out[name] is not None:
                out[name] = list(out[name])
        if out["domain_transforms"] is not None:
            out["domain_transforms"] = [dict(t) for t in out["domain_transforms"]]
        return out


@dataclass(frozen=True, eq=False)
class DataNode:
    node_id: int
    train_sub: LabeledDataset
    test_sub: LabeledDataset
    class_set: frozenset
    train_index: np.ndarray
    test_index: np.ndarray
    domain_tag: str | None = None
    transform: dict | None = field(default=None, compare=False)


def generate_global(class_count: int, samples_per_class: int, input_dim: int, seed: int,
                    class_sep: float = 1.0, noise: float = 1.0) -> LabeledDataset:
    """Balanced Gaussian blobs.

    Class means are drawn once per seed from ``N(0, class_sep**2 I)``; samples
    scatter around them with standard deviation ``noise``.
    """
    if min(class_count, samples_per_class, input_dim) < 1:
        raise ConfigError("class_count, samples_per_class and input_dim must all be >= 1")
    root = RngStream(seed, ("global-data",))
    means = root.child("means").generator().normal(0.0, class_sep, size=(class_count, input_dim))
    labels = np.repeat(np.arange(class_count), samples_per_class)
    scatter = root.child("samples").generator().normal(0.0, noise, size=(labels.size, input_dim))
    return LabeledDataset(means[labels] + scatter, labels, class_count)


def _split(index: np.ndarray, test_fraction: float, rng: np.random.Generator):
    index = rng.permutation(index)
    n = index.size
    n_test = int(round(test_fraction * n))
    if n >= 2:
        n_test = min(max(n_test, 1), n - 1)
    else:
        n_test = 0
    return np.sort(index[n_test:]), np.sort(index[:n_test])


def _class_counts(spec: PartitionSpec, class_count: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = spec.classes_per_node or (class_count // spec.n_nodes,) * 2
    if lo < 1:
        raise ConfigError(f"class_noniid needs class_count >= n_nodes ({class_count} < {spec.n_nodes})")
    if spec.n_nodes * lo > class_count:
        raise ConfigError(
            f"class_noniid infeasible: n_nodes * min classes_per_node = {spec.n_nodes * lo} "
            f"exceeds class_count = {class_count}"
        )
    counts = rng.integers(lo, hi + 1, size=spec.n_nodes)
    while counts.sum() > class_count:
        shrinkable = np.flatnonzero(counts > lo)
        counts[rng.choice(shrinkable)] -= 1
    return counts


def _realize_transform(recipe: DomainTransform, input_dim: int, stream: RngStream) -> dict:
    rng = stream.generator()
    if recipe.rotate:
        q, r = np.linalg.qr(rng.normal(size=(input_dim, input_dim)))
        rotation = q * np.sign(np.diag(r))
    else:
        rotation = np.eye(input_dim)
    bias = rng.normal(0.0, 1.0, size=input_dim) * recipe.bias_scale
    n_zero = int(round(recipe.sparsify * input_dim))
    keep = np.ones(input_dim)
    keep[rng.permutation(input_dim)[:n_zero]] = 0.0
    return {"rotation": rotation, "scale": float(recipe.scale), "bias": bias, "keep": keep}


def apply_transform(features: np.ndarray, transform: dict) -> np.ndarray:
    out = (features @ np.asarray(transform["rotation"])) * transform["scale"] + np.asarray(transform["bias"])
    return out * np.asarray(transform["keep"])


def partition(global_data: LabeledDataset, spec: PartitionSpec, seed: int | None = None):
    """Split ``global_data`` into data nodes.

    Returns ``(nodes, global_test)``. ``seed`` is used only when ``spec.seed`` is
    unset. The result is a pure function of ``(global_data, spec, seed)``.
    """
    seed = spec.seed if spec.seed is not None else seed
    if seed is None:
        raise ConfigError("partition needs a seed (spec.seed or the seed argument)")
    root = RngStream(seed, ("partition",))
    rng = root.child("assign").generator()
    n = len(global_data)
    c = global_data.class_count
    d = global_data.features.shape[1]
    all_index = np.arange(n)

    if spec.mode in ("iid", "domain_noniid"):
        owner = rng.integers(0, spec.n_nodes, size=n)
        allocations = [all_index[owner == i] for i in range(spec.n_nodes)]
    else:
        counts = _class_counts(spec, c, rng)
        classes = rng.permutation(c)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        allocations = []
        for i in range(spec.n_nodes):
            own = classes[bounds[i]:bounds[i + 1]]
            allocations.append(all_index[np.isin(global_data.labels, own)])

    if spec.samples_per_node is not None:
        lo, hi = spec.samples_per_node
        trimmed = []
        for alloc in allocations:
            size = min(int(rng.integers(lo, hi + 1)), alloc.size)
            trimmed.append(np.sort(rng.choice(alloc, size=size, replace=False)))
        allocations = trimmed

    transforms = spec.domain_transforms
    if spec.mode == "domain_noniid" and transforms is None:
        transforms = (DomainTransform(),) * spec.n_nodes

    nodes = []
    for i, alloc in enumerate(allocations):
        node_id = i + 1
        train_idx, test_idx = _split(alloc, spec.test_fraction, root.child("split", node_id).generator())
        train_sub = global_data.subset(train_idx)
        test_sub = global_data.subset(test_idx)
        transform, tag = None, None
        if spec.mode == "domain_noniid":
            transform = _realize_transform(transforms[i], d, root.child("domain", node_id))
            tag = f"domain-{node_id}"
            train_sub = LabeledDataset(apply_transform(train_sub.features, transform), train_sub.labels, c)
            test_sub = LabeledDataset(apply_transform(test_sub.features, transform), test_sub.labels, c)
        class_set = frozenset(int(v) for v in np.unique(global_data.labels[alloc]))
        nodes.append(DataNode(node_id, train_sub, test_sub, class_set, train_idx, test_idx, tag, transform))

    global_test = LabeledDataset.concat([node.test_sub for node in nodes], c, d)
    return nodes, global_test


def sample_minibatch(node: DataNode, size: int, stream: RngStream):
    """Uniform draw from the node's training split.

    Without replacement when ``size`` fits, otherwise with replacement.
    """
    n = len(node.train_sub)
    if n == 0:
        raise DomainError(f"node {node.node_id} holds no training samples")
    rng = stream.generator()
    idx = rng.choice(n, size=size, replace=size > n)
    return node.train_sub.features[idx], node.train_sub.labels[idx]


# --- files -----------------------------------------------------------------

DATASET_FORMAT = "seqcl-dataset"
PARTITION_FORMAT = "seqcl-partition"


def save_dataset(path, dataset: LabeledDataset) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, format=np.array(DATASET_FORMAT), version=np.array(1),
                 features=dataset.features, labels=dataset.labels, class_count=np.array(dataset.class_count))


def load_dataset(path) -> LabeledDataset:
    with np.load(path, allow_pickle=False) as data:
        if str(data["format"]) != DATASET_FORMAT or int(data["version"]) != 1:
            raise ConfigError(f"{path} is not a version-1 seqcl dataset file")
        return LabeledDataset(data["features"], data["labels"], int(data["class_count"]))


def save_partition(path, nodes, spec: PartitionSpec, dataset_file: str) -> None:
    payload = {
        "format": PARTITION_FORMAT,
        "version": 1,
        "dataset_file": str(dataset_file),
        "spec": spec.to_dict(),
        "nodes": [],
    }
    for node in nodes:
        entry = {
            "node_id": node.node_id,
            "domain_tag": node.domain_tag,
            "train_index": node.train_index.tolist(),
            "test_index": node.test_index.tolist(),
        }
        if node.transform is not None:
            entry["transform"] = {k: np.asarray(v).tolist() for k, v in node.transform.items()}
        payload["nodes"].append(entry)
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def load_partition(path):
    """Rebuild ``(nodes, global_test, spec)`` from a partition manifest.

    A relative ``dataset_file`` is resolved against the manifest's directory.
    """
    path = Path(path)
    payload = json.loads(path.read_text(encoding="utf-8"))
    if payload.get("format") != PARTITION_FORMAT or payload.get("version") != 1:
        raise ConfigError(f"{path} is not a version-1 seqcl partition manifest")
    data_path = Path(payload["dataset_file"])
    if not data_path.is_absolute():
        data_path = path.parent / data_path
    data = load_dataset(data_path)
    spec = PartitionSpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in payload["spec"].items()})
    c = data.class_count
    nodes = []
    for entry in payload["nodes"]:
        train_idx = np.asarray(entry["train_index"], dtype=np.int64)
        test_idx = np.asarray(entry["test_index"], dtype=np.int64)
        train_sub, test_sub = data.subset(train_idx), data.subset(test_idx)
        transform = entry.get("transform")
        if transform is not None:
            transform = {k: (np.asarray(v) if isinstance(v, list) else v) for k, v in transform.items()}
            train_sub = LabeledDataset(apply_transform(train_sub.features, transform), train_sub.labels, c)
            test_sub = LabeledDataset(apply_transform(test_sub.features, transform), test_sub.labels, c)
        labels = np.concatenate([data.labels[train_idx], data.labels[test_idx]])
        nodes.append(DataNode(entry["node_id"], train_sub, test_sub, frozenset(int(v) for v in np.unique(labels)),
                              train_idx, test_idx, entry.get("domain_tag"), transform))
    global_test = LabeledDataset.concat([n.test_sub for n in nodes], c, data.features.shape[1])
    return nodes, global_test, spec
