"""
Exhaustive search on a tiny network
===================================

With three nodes and four visits there are 81 sequences. Every prefix is
trained once and shared, each complete sequence is evaluated, and sequences
whose forgetting ever drops below epsilon are marked infeasible.
"""
import dataclasses

from seqcl import DataSpec, Environment, PartitionSpec, Policy, RunConfig, oracle_search, run_episode
from seqcl.harness import ModelSpec, ScoringConfig

config = RunConfig(seed=0, horizon=4, data=DataSpec(6, 40, 6), partition=PartitionSpec("iid", 3),
                   model=ModelSpec((16, 16)), scoring=ScoringConfig(minibatch_size=16))
env = Environment(config)
result = oracle_search(env, 4, objective="final_global_acc", epsilon=config.epsilon)

feasible = [r for r in result.table if r.feasible]
print(f"{len(result.table)} sequences, {len(feasible)} feasible")
print("best feasible     ", result.best_sequence, round(result.best_value, 4))
print("best unconstrained", result.best_unconstrained_sequence, round(result.best_unconstrained_value, 4))

# a policy run on the same environment lands exactly on one row of the table
for kind in ("random", "greedy_nwot", "scheduled"):
    log = run_episode(dataclasses.replace(config, policy=Policy(kind)), env)
    row = result.row(log.sequence)
    print(f"{kind:12s} {tuple(log.sequence)} final {log.final_global_acc:.4f} feasible {row.feasible}")
