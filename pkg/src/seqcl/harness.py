"""The sequenced continual-learning loop, its metrics, multi-seed sweeps and all file I/O.

One episode repeats score -> select -> train -> evaluate -> log for a fixed
number of node visits. Every random draw is keyed by the run seed plus a
``(step, node_id, purpose)`` tuple, so two runs with the same configuration
are identical and runs that differ only in their policy share data, initial
model and per-visit shuffles.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, NumericError, StateError
from .neural import ModelConfig, evaluate, init_model, model_to_dict, train_pass
from .numerics import RngStream, fmt_real
from .regularizers import EwcState, consolidate
from .scoring import VARIANTS, ScoreSet, score_all_nodes
from .sequencer import Policy, SequenceState, select_next
from .tasks import DomainTransform, PartitionSpec, generate_global, partition

# --- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class DataSpec:
    class_count: int = 20
    samples_per_class: int = 200
    input_dim: int = 16
    class_sep: float = 1.0
    noise: float = 1.0
    seed: int | None = None


@dataclass(frozen=True)
class ModelSpec:
    hidden_dims: tuple = (64, 64)
    aid_p1: float = 0.5
    aid_p2: float = 0.2
    aid_convention: str = "drop"


@dataclass(frozen=True)
class ScoringConfig:
    variant: str = "relu"
    minibatch_size: int = 32
    jitter: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"scoring variant must be one of {VARIANTS}")
        if self.minibatch_size < 2:
            raise ConfigError("scoring minibatch_size must be >= 2")
        if self.jitter < 0:
            raise ConfigError("jitter must be >= 0")


@dataclass(frozen=True)
class EwcConfig:
    lam: float = 50.0
    fisher_batches: int = 8
    fisher_batch_size: int = 32
    fisher_mode: str = "true"
    update: str = "proximal"

    def __post_init__(self):
        if self.update not in ("proximal", "explicit"):
            raise ConfigError("ewc.update must be 'proximal' or 'explicit'")
        # fails early on a bad lam, batch count or fisher_mode (YAML turns a bare true into a bool)
        self.initial_state()

    def initial_state(self) -> EwcState:
        return EwcState(self.lam, self.fisher_batches, self.fisher_batch_size, self.fisher_mode)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    horizon: int = 20
    epochs_per_visit: int = 1
    learning_rate: float = 0.05
    train_batch_size: int = 32
    epsilon: float = -0.05
    full_eval: bool = False
    data: DataSpec = field(default_factory=DataSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    policy: Policy = field(default_factory=Policy)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    ewc: EwcConfig | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs_per_visit < 1 or self.train_batch_size < 1:
            raise ConfigError("epochs_per_visit and train_batch_size must be >= 1")
        if self.epsilon >= 0:
            raise ConfigError("epsilon must be negative")
        # validates the model side early
        self.model_config()

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(self.data.input_dim, tuple(m.hidden_dims), self.data.class_count, "relu",
                           m.aid_p1, m.aid_p2, m.aid_convention)


_SECTIONS = {
    "data": DataSpec,
    "partition": PartitionSpec,
    "model": ModelSpec,
    "policy": Policy,
    "scoring": ScoringConfig,
    "ewc": EwcConfig,
}


def _build(cls, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where!r}: {', '.join(unknown)}")
    values = dict(values)
    for key in ("hidden_dims", "classes_per_node", "samples_per_node"):
        if isinstance(values.get(key), list):
            values[key] = tuple(values[key])
    if cls is PartitionSpec and values.get("domain_transforms") is not None:
        transforms = []
        for i, t in enumerate(values["domain_transforms"]):
            transforms.append(_build(DomainTransform, t, f"{where}.domain_transforms[{i}]"))
        values["domain_transforms"] = tuple(transforms)
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad value in {where!r}: {exc}") from exc


def config_from_dict(payload: dict) -> RunConfig:
    if payload is None:
        payload = {}
    if not isinstance(payload, dict):
        raise ConfigError("a run configuration must be a mapping")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(payload) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    values = {}
    for key, value in payload.items():
        if key in _SECTIONS:
            values[key] = None if value is None and key == "ewc" else _build(_SECTIONS[key], value or {}, key)
        else:
            values[key] = value
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    return obj


def config_to_dict(config: RunConfig) -> dict:
    return _plain(config)


def load_config(path) -> RunConfig:
    try:
        payload = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(payload)


def dump_config(config: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(config), sort_keys=False), encoding="utf-8")


def fingerprint(config: RunConfig) -> str:
    blob = json.dumps(config_to_dict(config), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


# --- environment -----------------------------------------------------------


@dataclass
class EnvState:
    model: object
    ewc: EwcState | None
    global_acc: float
    node_acc: dict
    train_loss: float = float("nan")


class Environment:
    """Data nodes, global test set and initial model for one seed.

    ``advance`` is a pure function of ``(state, node_id, step)``; that is what
    lets the oracle share trained prefixes and lets paired runs share shuffles.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        seed = config.seed
        d = config.data
        self.dataset = generate_global(d.class_count, d.samples_per_class, d.input_dim,
                                       d.seed if d.seed is not None else seed, d.class_sep, d.noise)
        self.nodes, self.global_test = partition(self.dataset, config.partition, seed)
        self.node_ids = tuple(n.node_id for n in self.nodes)
        self._by_id = {n.node_id: n for n in self.nodes}
        self.initial_model = init_model(config.model_config(), RngStream(seed, ("init-model",)))

    def node(self, node_id):
        return self._by_id[node_id]

    def _measure(self, model):
        node_acc = {n.node_id: evaluate(model, n.test_sub) for n in self.nodes if len(n.test_sub)}
        return evaluate(model, self.global_test), node_acc

    def initial(self) -> EnvState:
        ewc = self.config.ewc.initial_state() if self.config.ewc else None
        g, per_node = self._measure(self.initial_model)
        return EnvState(self.initial_model, ewc, g, per_node)

    def advance(self, state: EnvState, node_id: int, step: int) -> EnvState:
        cfg = self.config
        node = self._by_id[node_id]
        regularizer = state.ewc if state.ewc is not None and state.ewc.anchors and state.ewc.lam > 0 else None
        model, loss = train_pass(
            state.model, node.train_sub.features, node.train_sub.labels, cfg.learning_rate,
            cfg.train_batch_size, RngStream(cfg.seed, (step, node_id, "train")), regularizer,
            passes=cfg.epochs_per_visit, penalty_update=cfg.ewc.update if cfg.ewc else "proximal",
        )
        ewc = state.ewc
        if ewc is not None:
            ewc = consolidate(ewc, model, node, RngStream(cfg.seed, (step, node_id, "fisher")))
        g, per_node = self._measure(model)
        return EnvState(model, ewc, g, per_node, loss)

    def score(self, model, step: int, scoring: ScoringConfig | None = None, workers: int = 1) -> ScoreSet:
        s = scoring or self.config.scoring
        return score_all_nodes(model, self.nodes, s.variant, step, s.minibatch_size, self.config.seed,
                               s.jitter, workers)


# --- metrics and logs ------------------------------------------------------


def compute_forgetting(prev_acc: dict, curr_acc: dict, visited, epsilon: float):
    """Per-node accuracy change on previously visited nodes, its minimum and the constraint flag.

    With nothing visited before, the minimum is ``None`` and the constraint holds.
    """
    nodes = sorted(set(visited))
    missing = [j for j in nodes if j not in prev_acc or j not in curr_acc]
    if missing:
        raise StateError(f"accuracy missing for visited node(s) {missing}")
    change = {j: curr_acc[j] - prev_acc[j] for j in nodes}
    low = min(change.values()) if change else None
    return change, low, low is None or low >= epsilon


@dataclass
class StepRecord:
    step: int
    selected_node: int
    scores: ScoreSet | None
    train_loss: float
    global_acc: float
    per_node_acc: dict
    delta_m: float
    forgetting: dict
    min_forgetting: float | None
    constraint_ok: bool

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "selected_node": self.selected_node,
            "scores": None if self.scores is None else self.scores.to_dict(),
            "train_loss": self.train_loss,
            "global_acc": self.global_acc,
            "per_node_acc": {str(k): v for k, v in sorted(self.per_node_acc.items())},
            "delta_m": self.delta_m,
            "forgetting": {str(k): v for k, v in sorted(self.forgetting.items())},
            "min_forgetting": self.min_forgetting,
            "constraint_ok": self.constraint_ok,
        }


@dataclass
class RunLog:
    fingerprint: str
    policy: str
    seed: int
    node_ids: tuple
    initial_global_acc: float
    records: list = field(default_factory=list)
    failure: str | None = None
    final_model: object = None
    initial_params_digest: str = ""
    wall_clock_seconds: float = 0.0

    @property
    def completed(self) -> bool:
        return self.failure is None

    @property
    def sequence(self) -> list:
        return [r.selected_node for r in self.records]

    @property
    def final_global_acc(self) -> float:
        return self.records[-1].global_acc if self.records else self.initial_global_acc

    def visit_histogram(self) -> dict:
        counts = {n: 0 for n in self.node_ids}
        for v in self.sequence:
            counts[v] += 1
        return counts

    def to_dict(self) -> dict:
        return {
            "format": "seqcl-runlog",
            "version": 1,
            "fingerprint": self.fingerprint,
            "policy": self.policy,
            "seed": self.seed,
            "node_ids": list(self.node_ids),
            "initial_global_acc": self.initial_global_acc,
            "initial_params_digest": self.initial_params_digest,
            "failure": self.failure,
            "wall_clock_seconds": self.wall_clock_seconds,
            "steps": [r.to_dict() for r in self.records],
        }


def params_digest(model) -> str:
    h = hashlib.sha256()
    for p in model.params():
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()[:16]


def run_episode(config: RunConfig, env: Environment | None = None, workers: int = 1) -> RunLog:
    """Run ``config.horizon`` node visits and return the step log.

    A non-finite update stops the episode; the log is then truncated and
    carries the failure message.
    """
    started = time.perf_counter()
    env = env or Environment(config)
    policy = config.policy
    if policy.kind == "oracle":
        raise ConfigError("use oracle_search for the oracle policy")
    state = env.initial()
    log = RunLog(fingerprint(config), policy.label, config.seed, env.node_ids, state.global_acc,
                 initial_params_digest=params_digest(state.model))
    seq = SequenceState(env.node_ids, epsilon=config.epsilon)
    for h in range(1, config.horizon + 1):
        scores = env.score(state.model, h - 1, config.scoring, workers)
        seq.last_scores, seq.current_scores = seq.current_scores, scores
        if h == 1:
            seq.initial_scores = scores
        node = select_next(seq, policy, RngStream(config.seed, (h, 0, "select")))
        previous = list(seq.visited)
        try:
            nxt = env.advance(state, node, h)
        except NumericError as exc:
            log.failure = f"step {h}: {exc}"
            break
        seq.record_visit(node)
        change, low, ok = compute_forgetting(state.node_acc, nxt.node_acc, previous, config.epsilon)
        seq.last_forgetting = change
        shown = nxt.node_acc if config.full_eval else {j: nxt.node_acc[j] for j in set(seq.visited)}
        log.records.append(StepRecord(h, node, scores, nxt.train_loss, nxt.global_acc, dict(sorted(shown.items())),
                                      nxt.global_acc - state.global_acc, change, low, ok))
        state = nxt
    log.final_model = state.model
    log.wall_clock_seconds = time.perf_counter() - started
    return log


# --- CSV / JSON ------------------------------------------------------------

STEP_COLUMNS = ("step", "policy", "seed", "selected_node", "train_loss", "global_acc", "delta_m",
                "min_forgetting", "constraint_ok")


def step_columns(node_ids) -> list:
    ids = sorted(node_ids)
    return list(STEP_COLUMNS) + [f"acc_node_{i}" for i in ids] + [f"score_node_{i}" for i in ids]


def write_step_csv(path, logs) -> None:
    """One row per step for every log (all logs must share node ids)."""
    logs = list(logs)
    ids = sorted(logs[0].node_ids)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(step_columns(ids))
        for log in logs:
            for r in log.records:
                scores = r.scores.scores if r.scores else {}
                w.writerow(
                    [r.step, log.policy, log.seed, r.selected_node, fmt_real(r.train_loss), fmt_real(r.global_acc),
                     fmt_real(r.delta_m), fmt_real(r.min_forgetting), "true" if r.constraint_ok else "false"]
                    + [fmt_real(r.per_node_acc.get(i)) for i in ids]
                    + [fmt_real(scores.get(i)) for i in ids]
                )


def read_step_csv(path) -> list:
    """Parse a step CSV back into dicts; empty cells become ``None``."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            row = {}
            for key, value in raw.items():
                if key == "policy":
                    row[key] = value
                elif key == "constraint_ok":
                    row[key] = value == "true"
                elif key in ("step", "seed", "selected_node"):
                    row[key] = int(value)
                else:
                    row[key] = None if value == "" else float(value)
            rows.append(row)
    return rows


def write_run_json(path, log: RunLog) -> None:
    Path(path).write_text(json.dumps(log.to_dict(), indent=1), encoding="utf-8")


def write_checkpoint(path, model) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)), encoding="utf-8")


# --- sweeps ----------------------------------------------------------------


def _arm_config(base: RunConfig, arm) -> RunConfig:
    if isinstance(arm, Policy):
        return dataclasses.replace(base, policy=arm)
    if isinstance(arm, RunConfig):
        stripped = dataclasses.replace(arm, policy=base.policy, scoring=base.scoring, seed=base.seed)
        if config_to_dict(stripped) != config_to_dict(base):
            raise ConfigError("sweep arms may differ from the base config only in policy and scoring")
        return dataclasses.replace(base, policy=arm.policy, scoring=arm.scoring)
    raise ConfigError(f"unsupported sweep arm {arm!r}")


def entropy(counts) -> float:
    """Shannon entropy (nats) of a visit histogram."""
    c = np.asarray(list(counts), dtype=np.float64)
    total = c.sum()
    if total <= 0:
        return 0.0
    p = c[c > 0] / total
    return float(-(p * np.log(p)).sum())


@dataclass
class SweepReport:
    labels: list
    seeds: list
    horizon: int
    logs: dict  # label -> list of RunLog (seed order)

    def curves(self, label) -> np.ndarray:
        out = np.full((len(self.seeds), self.horizon), np.nan)
        for i, log in enumerate(self.logs[label]):
            acc = [r.global_acc for r in log.records]
            out[i, :len(acc)] = acc
        return out

    def mean_curve(self, label) -> np.ndarray:
        return np.mean(self.curves(label), axis=0)

    def std_curve(self, label) -> np.ndarray:
        return np.std(self.curves(label), axis=0)

    def final_acc(self, label) -> np.ndarray:
        return np.array([log.final_global_acc for log in self.logs[label]])

    def paired_differences(self, label, reference=None) -> np.ndarray:
        reference = reference or self.labels[0]
        return self.final_acc(label) - self.final_acc(reference)

    def histograms(self, label) -> list:
        return [log.visit_histogram() for log in self.logs[label]]

    def entropies(self, label) -> np.ndarray:
        return np.array([entropy(h.values()) for h in self.histograms(label)])

    def mean_min_forgetting(self, label) -> float:
        vals = [r.min_forgetting for log in self.logs[label] for r in log.records if r.min_forgetting is not None]
        return float(np.mean(vals)) if vals else 0.0

    def to_dict(self) -> dict:
        reference = self.labels[0]
        return {
            "format": "seqcl-sweep",
            "version": 1,
            "seeds": list(self.seeds),
            "horizon": self.horizon,
            "reference": reference,
            "policies": {
                label: {
                    "mean_global_acc": self.mean_curve(label).tolist(),
                    "std_global_acc": self.std_curve(label).tolist(),
                    "final_global_acc": self.final_acc(label).tolist(),
                    "paired_final_difference": self.paired_differences(label, reference).tolist(),
                    "visit_histograms": [{str(k): v for k, v in h.items()} for h in self.histograms(label)],
                    "visit_entropy": self.entropies(label).tolist(),
                    "mean_min_forgetting": self.mean_min_forgetting(label),
                    "failures": [log.failure for log in self.logs[label] if log.failure],
                }
                for label in self.labels
            },
        }

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_step_csv(directory / "sweep_steps.csv", [log for label in self.labels for log in self.logs[label]])
        (directory / "sweep_summary.json").write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")


def sweep(base_config: RunConfig, policies, seeds, workers: int = 1) -> SweepReport:
    """Paired multi-seed comparison.

    Per seed, one environment (partition and initial model) is built and every
    arm runs on it. An arm is a :class:`Policy` or a full :class:`RunConfig`
    differing from ``base_config`` only in ``policy`` and ``scoring``.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    arms = [_arm_config(base_config, arm) for arm in policies]
    labels = []
    for cfg in arms:
        label = cfg.policy.label
        if cfg.scoring.variant != "relu" and cfg.policy.name is None:
            label = f"{label}+{cfg.scoring.variant}"
        while label in labels:
            label += "'"
        labels.append(label)
    logs = {label: [] for label in labels}
    for s in seeds:
        env = Environment(dataclasses.replace(base_config, seed=s))
        for label, cfg in zip(labels, arms):
            log = run_episode(dataclasses.replace(cfg, seed=s), env, workers)
            log.policy = label
            logs[label].append(log)
    return SweepReport(labels, seeds, base_config.horizon, logs)


def sign_test_p(differences) -> float:
    """One-sided sign test p-value for a positive median; zero differences are dropped."""
    d = np.asarray(differences, dtype=np.float64)
    pos = int(np.sum(d > 0))
    n = int(np.sum(d != 0))
    if n == 0:
        return 1.0
    return float(sum(math.comb(n, k) for k in range(pos, n + 1)) / 2 ** n)
