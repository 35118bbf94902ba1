"""Elastic weight consolidation.

After each node visit the harness snapshots the parameters and a diagonal
Fisher estimate; later training adds
``(lam / 2) * sum_anchors sum_i F_i (theta_i - theta*_i)**2`` to the loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .neural import Model, predict_proba, squared_sample_grads
from .numerics import RngStream
from .tasks import DataNode, sample_minibatch

FISHER_MODES = ("true", "sampled", "empirical")


@dataclass(frozen=True)
class Anchor:
    theta_star: tuple
    fisher: tuple
    source_node: int


@dataclass(frozen=True)
class EwcState:
    lam: float = 50.0
    fisher_batches: int = 8
    fisher_batch_size: int = 32
    fisher_mode: str = "true"
    anchors: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("EWC lambda must be >= 0")
        if self.fisher_batches < 1 or self.fisher_batch_size < 1:
            raise ConfigError("fisher_batches and fisher_batch_size must be >= 1")
        if self.fisher_mode not in FISHER_MODES:
            raise ConfigError(f"fisher_mode must be one of {FISHER_MODES}")

    def penalty(self, params):
        return ewc_penalty(params, self)

    def prox(self, params, learning_rate: float):
        """``argmin_t |t - params|**2 / (2 lr) + penalty(t)``, in closed form per coordinate."""
        out = []
        for i, p in enumerate(params):
            weight = np.zeros_like(p)
            pull = np.zeros_like(p)
            for anchor in self.anchors:
                weight += anchor.fisher[i]
                pull += anchor.fisher[i] * anchor.theta_star[i]
            step = learning_rate * self.lam
            out.append((p + step * pull) / (1.0 + step * weight))
        return out


def estimate_fisher(model: Model, node: DataNode, batches: int = 8, stream: RngStream | None = None,
                    batch_size: int = 32, mode: str = "true") -> list:
    """Diagonal Fisher information averaged over ``batches`` minibatches of the node.

    ``mode`` picks the label distribution for the log-likelihood gradients:
    ``"true"`` takes the exact expectation under the model's own predictive
    distribution, ``"sampled"`` draws one label per sample from it, and
    ``"empirical"`` uses the dataset labels.
    """
    if batches < 1:
        raise DomainError("batches must be >= 1")
    if len(node.train_sub) == 0:
        raise DomainError(f"node {node.node_id} holds no training samples")
    if mode not in FISHER_MODES:
        raise ConfigError(f"fisher_mode must be one of {FISHER_MODES}")
    stream = stream or RngStream(0, ("fisher", node.node_id))
    total = [np.zeros_like(p) for p in model.params()]
    count = 0
    for b in range(batches):
        x, y = sample_minibatch(node, batch_size, stream.child(b, "batch"))
        probs = predict_proba(model, x)
        n, classes = probs.shape
        if mode == "true":
            for c in range(classes):
                # d(-log p_c)/dlogits = p - e_c, weighted by sqrt(p_c) so squares carry p_c
                d = probs.copy()
                d[:, c] -= 1.0
                d *= np.sqrt(probs[:, c])[:, None]
                for acc, sq in zip(total, squared_sample_grads(model, x, d)):
                    acc += sq
        else:
            if mode == "sampled":
                u = stream.child(b, "labels").generator().random(n)
                labels = np.minimum((np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1), classes - 1)
            else:
                labels = np.asarray(y)
            d = probs.copy()
            d[np.arange(n), labels] -= 1.0
            for acc, sq in zip(total, squared_sample_grads(model, x, d)):
                acc += sq
        count += n
    return [acc / count for acc in total]


def ewc_penalty(params, state: EwcState):
    """Penalty value and its gradient with respect to ``params``."""
    params = list(params)
    grads = [np.zeros_like(p) for p in params]
    value = 0.0
    for anchor in state.anchors:
        if len(anchor.theta_star) != len(params):
            raise ShapeError("anchor does not match the model's parameter list")
        for g, p, star, f in zip(grads, params, anchor.theta_star, anchor.fisher):
            if p.shape != star.shape or p.shape != f.shape:
                raise ShapeError(f"anchor shape {star.shape} does not match parameter shape {p.shape}")
            diff = p - star
            value += 0.5 * state.lam * float(np.sum(f * diff * diff))
            g += state.lam * f * diff
    return value, grads


def consolidate(state: EwcState, model: Model, node: DataNode, stream: RngStream | None = None) -> EwcState:
    """Anchor the current parameters to ``node``, replacing any older anchor for it."""
    fisher = estimate_fisher(model, node, state.fisher_batches, stream, state.fisher_batch_size, state.fisher_mode)
    anchor = Anchor(tuple(p.copy() for p in model.params()), tuple(fisher), node.node_id)
    kept = tuple(a for a in state.anchors if a.source_node != node.node_id)
    return EwcState(state.lam, state.fisher_batches, state.fisher_batch_size, state.fisher_mode, kept + (anchor,))


def state_to_dict(state: EwcState) -> dict:
    return {
        "lam": state.lam,
        "fisher_batches": state.fisher_batches,
        "fisher_batch_size": state.fisher_batch_size,
        "fisher_mode": state.fisher_mode,
        "anchors": [
            {
                "source_node": a.source_node,
                "shapes": [list(p.shape) for p in a.theta_star],
                "theta_star": [p.ravel().tolist() for p in a.theta_star],
                "fisher": [f.ravel().tolist() for f in a.fisher],
            }
            for a in state.anchors
        ],
    }


def state_from_dict(payload: dict) -> EwcState:
    anchors = []
    for a in payload.get("anchors", ()):
        shapes = [tuple(s) for s in a["shapes"]]
        theta = tuple(np.asarray(v, dtype=np.float64).reshape(s) for v, s in zip(a["theta_star"], shapes))
        fisher = tuple(np.asarray(v, dtype=np.float64).reshape(s) for v, s in zip(a["fisher"], shapes))
        anchors.append(Anchor(theta, fisher, int(a["source_node"])))
    return EwcState(payload["lam"], payload["fisher_batches"], payload["fisher_batch_size"],
                    payload["fisher_mode"], tuple(anchors))
