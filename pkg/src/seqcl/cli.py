"""Command-line entry point: ``seqcl {simulate,sweep,score,oracle}``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 oracle cap exceeded.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .errors import ConfigError, NumericError, OracleCapError, SingularityError
from .harness import (Environment, ScoringConfig, load_config, run_episode, sweep, write_checkpoint,
                      write_run_json, write_step_csv, dump_config)
from .neural import model_from_dict
from .scoring import activation_statistics, score_all_nodes
from .sequencer import CANDIDATE_RULES, OBJECTIVES, POLICY_KINDS, oracle_search, write_oracle_csv
from .tasks import load_partition, sample_minibatch, save_dataset, save_partition
from .numerics import RngStream

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CAP = 0, 2, 3, 4


def parse_seeds(text: str) -> list:
    """``"0-9"``, ``"1,4,7"`` or a mix such as ``"0-2,10"``."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ConfigError(f"bad seed list entry {part!r}") from None
    if not seeds:
        raise ConfigError("the seed list is empty")
    return seeds


def parse_policies(text: str, base):
    """Comma-separated arms; ``kind[:rule][+aid]`` e.g. ``random,greedy_nwot+aid,scheduled:exclude_current``."""
    arms = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        variant = "relu"
        if token.endswith("+aid"):
            token, variant = token[:-4], "aid"
        kind, _, rule = token.partition(":")
        policy = dataclasses.replace(base.policy, kind=kind, candidate_rule=rule or base.policy.candidate_rule,
                                     name=None)
        arms.append(dataclasses.replace(base, policy=policy,
                                        scoring=dataclasses.replace(base.scoring, variant=variant)))
    if not arms:
        raise ConfigError("the policy list is empty")
    return arms


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    config = load_config(args.config)
    env = Environment(config)
    log = run_episode(config, env, args.workers)
    out = _out_dir(args.out)
    write_step_csv(out / "steps.csv", [log])
    write_run_json(out / "run.json", log)
    write_checkpoint(out / "model.json", log.final_model)
    save_dataset(out / "dataset.npz", env.dataset)
    save_partition(out / "partition.json", env.nodes, config.partition, "dataset.npz")
    dump_config(config, out / "config.yaml")
    print(f"{log.policy}: {len(log.records)} steps, final global accuracy {log.final_global_acc:.4f}")
    if log.failure:
        print(f"run stopped early: {log.failure}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    arms = parse_policies(args.policies, config)
    report = sweep(config, arms, parse_seeds(args.seeds), args.workers)
    report.write(_out_dir(args.out))
    reference = report.labels[0]
    for label in report.labels:
        diff = report.paired_differences(label, reference)
        print(f"{label:24s} final {report.final_acc(label).mean():.4f}  paired diff vs {reference} {diff.mean():+.4f}")
    failed = any(log.failure for logs in report.logs.values() for log in logs)
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_score(args) -> int:
    try:
        payload = json.loads(Path(args.checkpoint).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint {args.checkpoint}: {exc}") from exc
    model = model_from_dict(payload)
    try:
        nodes, _, _ = load_partition(args.partition)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read partition {args.partition}: {exc}") from exc
    s = ScoringConfig(args.variant, args.batch_size, args.jitter)
    scores = score_all_nodes(model, nodes, s.variant, args.step, s.minibatch_size, args.seed, s.jitter)
    text = json.dumps(scores.to_dict(), indent=1)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text)
    if args.activations:
        stats = {}
        for node in nodes:
            if len(node.train_sub) < 2:
                continue
            x, _ = sample_minibatch(node, s.minibatch_size,
                                    RngStream(args.seed, (args.step, node.node_id, "score-sample")))
            mask = RngStream(args.seed, (args.step, node.node_id, "aid-mask")) if s.variant == "aid" else None
            stats[str(node.node_id)] = activation_statistics(model, x, s.variant, mask)
        Path(args.activations).write_text(json.dumps(stats), encoding="utf-8")
    return EXIT_OK


def cmd_oracle(args) -> int:
    config = load_config(args.config)
    env = Environment(config)
    horizon = args.horizon or config.horizon
    rule = args.rule or config.policy.candidate_rule
    result = oracle_search(env, horizon, rule, args.objective, config.epsilon, args.cap)
    write_oracle_csv(args.out, result)
    print(f"{len(result.table)} sequences; best feasible {result.best_sequence} = {result.best_value:.6g}; "
          f"best unconstrained {result.best_unconstrained_sequence} = {result.best_unconstrained_value:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqcl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one episode from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1, help="threads used for node scoring")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="paired multi-seed comparison of policies")
    p.add_argument("--config", required=True)
    p.add_argument("--policies", required=True,
                   help=f"comma list of kind[:rule][+aid]; kinds {', '.join(k for k in POLICY_KINDS if k != 'oracle')}")
    p.add_argument("--seeds", required=True, help='e.g. "0-9" or "0,3,5"')
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("score", help="score every node of a partition with a model checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--variant", default="relu", choices=("relu", "aid"))
    p.add_argument("--step", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="ScoreSet JSON path (stdout when omitted)")
    p.add_argument("--activations", help="also write per-node activation statistics to this JSON path")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("oracle", help="enumerate every sequence of a small environment")
    p.add_argument("--config", required=True)
    p.add_argument("--horizon", type=int)
    p.add_argument("--rule", choices=CANDIDATE_RULES)
    p.add_argument("--objective", default="final_global_acc", choices=OBJECTIVES)
    p.add_argument("--cap", type=int, default=2000)
    p.add_argument("--out", required=True, help="oracle table CSV path")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OracleCapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAP
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, SingularityError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
