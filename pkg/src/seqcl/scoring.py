"""Zero-cost node scores from binary activation codes.

A minibatch is pushed through the model once; every sample becomes a binary
code marking which hidden units fired (value > 0). The kernel
``K[i, j] = N_A - hamming(c_i, c_j)`` counts agreeing units, and the score is
``log det K``. Diverse minibatches give codes that disagree often, hence a
better-conditioned kernel and a larger score.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .neural import ForwardTrace, Model, forward
from .numerics import RngStream, log_det_psd
from .tasks import DataNode, sample_minibatch

VARIANTS = ("relu", "aid")


def activation_codes(trace: ForwardTrace) -> np.ndarray:
    """Per-sample binary codes, hidden layers concatenated: shape ``(batch, N_A)``."""
    if not trace.captured or not trace.post_activations:
        raise StateError("forward trace carries no captured activations")
    return np.concatenate([a > 0 for a in trace.post_activations], axis=1)


def build_kernel(codes) -> np.ndarray:
    if isinstance(codes, np.ndarray):
        c = codes
    else:
        lengths = {len(code) for code in codes}
        if len(lengths) > 1:
            raise ShapeError(f"activation codes have unequal lengths {sorted(lengths)}")
        c = np.asarray(codes)
    if c.ndim != 2:
        raise ShapeError("codes must form a (samples, units) array")
    if c.shape[0] < 2:
        raise ShapeError("a kernel needs at least two codes")
    c = c.astype(np.float64)
    # agreements on ones plus agreements on zeros
    return c @ c.T + (1.0 - c) @ (1.0 - c).T


def nwot_score(model: Model, minibatch, variant: str = "relu", stream: RngStream | None = None,
               jitter: float = 0.0) -> float:
    if variant not in VARIANTS:
        raise ConfigError(f"scoring variant must be one of {VARIANTS}")
    x = np.asarray(minibatch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ShapeError("scoring needs a minibatch of at least two samples")
    if variant == "aid" and stream is None:
        raise ConfigError("AID scoring needs a mask stream")
    trace = forward(model, x, capture=True, mask_stream=stream, activation=variant)
    return log_det_psd(build_kernel(activation_codes(trace)), jitter)


@dataclass
class ScoreSet:
    step: int
    variant: str
    scores: dict
    minibatch_size: int
    skipped: tuple = field(default_factory=tuple)

    def argmax(self, among=None):
        """Highest-scoring node id; ties go to the lowest id."""
        ids = sorted(self.scores if among is None else (i for i in among if i in self.scores))
        if not ids:
            raise StateError("no scored node to choose from")
        return max(ids, key=lambda i: (self.scores[i], -i))

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "variant": self.variant,
            "scores": {str(k): v for k, v in sorted(self.scores.items())},
            "minibatch_size": self.minibatch_size,
            "skipped": list(self.skipped),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ScoreSet":
        return cls(
            step=int(payload["step"]),
            variant=payload["variant"],
            scores={int(k): float(v) for k, v in payload["scores"].items()},
            minibatch_size=int(payload["minibatch_size"]),
            skipped=tuple(payload.get("skipped", ())),
        )


def score_node(model: Model, node: DataNode, variant: str, step: int, batch_size: int, rng_root: int,
               jitter: float = 0.0) -> float:
    x, _ = sample_minibatch(node, batch_size, RngStream(rng_root, (step, node.node_id, "score-sample")))
    mask = RngStream(rng_root, (step, node.node_id, "aid-mask")) if variant == "aid" else None
    return nwot_score(model, x, variant, mask, jitter)


def score_all_nodes(model: Model, nodes, variant: str = "relu", step: int = 0, batch_size: int = 32,
                    rng_root: int = 0, jitter: float = 0.0, workers: int = 1) -> ScoreSet:
    """Score every node that has at least two training samples.

    Each node's minibatch and AID masks come from streams keyed by
    ``(step, node_id, purpose)``, so the result does not depend on evaluation
    order; ``workers > 1`` scores nodes on a thread pool.
    """
    eligible = [n for n in nodes if len(n.train_sub) >= 2]
    skipped = tuple(n.node_id for n in nodes if len(n.train_sub) < 2)

    def run(node):
        return node.node_id, score_node(model, node, variant, step, batch_size, rng_root, jitter)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(run, eligible))
    else:
        pairs = [run(n) for n in eligible]
    return ScoreSet(step, variant, dict(sorted(pairs)), batch_size, skipped)


def activation_statistics(model: Model, minibatch, variant: str = "relu", stream: RngStream | None = None) -> list:
    """Per-layer unit statistics of one forward pass, ready to dump as JSON.

    For each hidden layer: the fraction of samples on which each unit fired,
    plus the mean and standard deviation of its pre-activation.
    """
    x = np.asarray(minibatch, dtype=np.float64)
    trace = forward(model, x, capture=True, mask_stream=stream, activation=variant)
    out = []
    for pre, post in zip(trace.pre_activations, trace.post_activations):
        out.append({
            "firing_rate": np.mean(post > 0, axis=0).tolist(),
            "pre_mean": pre.mean(axis=0).tolist(),
            "pre_std": pre.std(axis=0).tolist(),
        })
    return out
