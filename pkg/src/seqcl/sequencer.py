"""Next-node selection: candidate sets, selection policies and an exhaustive oracle."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

from .errors import ConfigError, OracleCapError, StateError
from .numerics import RngStream, fmt_real
from .scoring import ScoreSet

POLICY_KINDS = ("random", "greedy_nwot", "rotation", "scheduled", "round_robin", "oracle")
CANDIDATE_RULES = ("all", "exclude_current", "unvisited_only")
SCORE_FREE = ("random", "round_robin")


@dataclass
class SequenceState:
    node_ids: tuple
    visited: list = field(default_factory=list)
    visit_counts: dict = field(default_factory=dict)
    initial_scores: ScoreSet | None = None
    last_scores: ScoreSet | None = None
    current_scores: ScoreSet | None = None
    last_forgetting: dict = field(default_factory=dict)
    epsilon: float = -0.05

    @property
    def step(self) -> int:
        return len(self.visited) + 1

    def record_visit(self, node_id: int) -> None:
        self.visited.append(node_id)
        self.visit_counts[node_id] = self.visit_counts.get(node_id, 0) + 1


@dataclass(frozen=True)
class Policy:
    kind: str = "greedy_nwot"
    candidate_rule: str = "all"
    quota: int = 3
    cf_trigger: bool = True
    name: str | None = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"policy kind must be one of {POLICY_KINDS}, got {self.kind!r}")
        if self.candidate_rule not in CANDIDATE_RULES:
            raise ConfigError(f"candidate_rule must be one of {CANDIDATE_RULES}")
        if self.quota < 1:
            raise ConfigError("scheduler quota must be >= 1")

    @property
    def label(self) -> str:
        return self.name or self.kind

    @property
    def needs_scores(self) -> bool:
        return self.kind not in SCORE_FREE


def candidates(state: SequenceState, rule: str = "all") -> list:
    nodes = sorted(state.node_ids)
    if rule == "all":
        return nodes
    if rule == "exclude_current":
        if not state.visited or len(nodes) == 1:
            return nodes
        return [n for n in nodes if n != state.visited[-1]]
    if rule == "unvisited_only":
        seen = set(state.visited)
        left = [n for n in nodes if n not in seen]
        return left or nodes
    raise ConfigError(f"unknown candidate rule {rule!r}")


def _cycle_pick(order, position, allowed):
    n = len(order)
    for k in range(n):
        node = order[(position + k) % n]
        if node in allowed:
            return node
    raise StateError("no candidate in the rotation order")


def rotation_order(scores: ScoreSet) -> list:
    """Node ids by descending score, ties to the lowest id."""
    return sorted(scores.scores, key=lambda i: (-scores.scores[i], i))


def select_next(state: SequenceState, policy: Policy, stream: RngStream | None = None) -> int:
    allowed = candidates(state, policy.candidate_rule)
    kind = policy.kind
    if kind == "oracle":
        raise ConfigError("the oracle is run through oracle_search, not select_next")
    if kind == "random":
        if stream is None:
            raise StateError("random selection needs a stream")
        return int(allowed[stream.generator().integers(len(allowed))])
    if kind == "round_robin":
        return _cycle_pick(sorted(state.node_ids), (state.step - 1) % len(state.node_ids), allowed)

    if state.current_scores is None:
        raise StateError(f"policy {kind!r} needs the current score set")
    if kind == "rotation":
        reference = state.initial_scores or state.current_scores
        order = rotation_order(reference)
        return _cycle_pick(order, (state.step - 1) % len(order), allowed)
    if kind == "scheduled":
        counts = {n: state.visit_counts.get(n, 0) for n in state.node_ids}
        top = max(counts.values())
        lagging = [n for n in allowed if top - counts[n] >= policy.quota]
        if lagging:
            return min(lagging, key=lambda n: (counts[n], n))
        if policy.cf_trigger and state.last_forgetting:
            forgotten = [n for n in allowed if n in state.last_forgetting]
            if forgotten:
                worst = min(forgotten, key=lambda n: (state.last_forgetting[n], n))
                if state.last_forgetting[worst] < state.epsilon:
                    return worst
    return state.current_scores.argmax(allowed)


# --- exhaustive oracle -----------------------------------------------------

OBJECTIVES = ("final_global_acc", "sum_delta_m")


@dataclass
class OracleRow:
    sequence: tuple
    delta_m: list
    step_min_forgetting: list  # None where no node had been visited before
    final_global_acc: float
    initial_global_acc: float
    epsilon: float

    @property
    def min_forgetting(self) -> float | None:
        values = [v for v in self.step_min_forgetting if v is not None]
        return min(values) if values else None

    @property
    def feasible(self) -> bool:
        m = self.min_forgetting
        return m is None or m >= self.epsilon

    @property
    def sum_delta_m(self) -> float:
        return math.fsum(self.delta_m)

    def value(self, objective: str) -> float:
        return self.final_global_acc if objective == "final_global_acc" else self.sum_delta_m


@dataclass
class OracleResult:
    objective: str
    table: list
    best_sequence: tuple | None
    best_value: float
    best_unconstrained_sequence: tuple
    best_unconstrained_value: float

    def row(self, sequence) -> OracleRow:
        sequence = tuple(sequence)
        for r in self.table:
            if r.sequence == sequence:
                return r
        raise KeyError(sequence)


def _enumerate(node_ids, horizon, rule):
    """All sequences honouring the candidate rule, in lexicographic order."""
    out = []

    def walk(prefix):
        if len(prefix) == horizon:
            out.append(tuple(prefix))
            return
        state = SequenceState(tuple(node_ids), list(prefix))
        for node in candidates(state, rule):
            walk(prefix + [node])

    walk([])
    return out


def count_sequences(node_ids, horizon: int, rule: str = "all") -> int:
    n = len(node_ids)
    if rule == "all":
        return n ** horizon
    return len(_enumerate(node_ids, horizon, rule))


def best_by(table, objective: str, feasible_only: bool = True, tol: float = 0.0):
    """Sequences attaining the best objective value (within ``tol``)."""
    rows = [r for r in table if r.feasible or not feasible_only]
    if not rows:
        return [], -math.inf
    top = max(r.value(objective) for r in rows)
    return [r.sequence for r in rows if r.value(objective) >= top - tol], top


def oracle_search(env, horizon: int, rule: str = "all", objective: str = "final_global_acc",
                  epsilon: float = -0.05, cap: int = 2000) -> OracleResult:
    """Train and evaluate every admissible sequence of length ``horizon``.

    ``env`` provides ``node_ids``, ``initial()`` and ``advance(state, node_id,
    step)``; states expose ``global_acc`` and ``node_acc`` (a dict over all
    nodes). Prefixes are trained once and shared, which is exact because the
    environment's randomness is keyed by ``(step, node_id)``.
    """
    if objective not in OBJECTIVES:
        raise ConfigError(f"objective must be one of {OBJECTIVES}")
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    node_ids = tuple(sorted(env.node_ids))
    required = count_sequences(node_ids, horizon, rule)
    if required > cap:
        raise OracleCapError(required, cap)

    table = []
    start = env.initial()

    def walk(prefix, state, deltas, step_mins):
        if len(prefix) == horizon:
            table.append(OracleRow(tuple(prefix), list(deltas), list(step_mins), state.global_acc,
                                   start.global_acc, epsilon))
            return
        seq_state = SequenceState(node_ids, list(prefix))
        previous = sorted(set(prefix))
        for node in candidates(seq_state, rule):
            nxt = env.advance(state, node, len(prefix) + 1)
            dm = nxt.global_acc - state.global_acc
            dw = min((nxt.node_acc[j] - state.node_acc[j] for j in previous), default=None)
            walk(prefix + [node], nxt, deltas + [dm], step_mins + [dw])

    walk([], start, [], [])
    table.sort(key=lambda r: r.sequence)
    best, best_value = best_by(table, objective, feasible_only=True)
    free, free_value = best_by(table, objective, feasible_only=False)
    return OracleResult(objective, table, best[0] if best else None, best_value, free[0], free_value)


def _fmt(v) -> str:
    return fmt_real(v)


def write_oracle_csv(path, result: OracleResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence", "feasible", "delta_m", "min_forgetting", "final_global_acc", "sum_delta_m"])
        for r in result.table:
            w.writerow([
                "-".join(str(v) for v in r.sequence),
                int(r.feasible),
                ";".join(_fmt(v) for v in r.delta_m),
                _fmt(r.min_forgetting),
                _fmt(r.final_global_acc),
                _fmt(r.sum_delta_m),
            ])
