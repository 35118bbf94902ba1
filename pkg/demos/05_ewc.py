"""
Consolidating past nodes with EWC
=================================

After each visit the parameters and a diagonal Fisher estimate are stored as
an anchor for that node. Later training is pulled back towards the anchors,
which reduces how much earlier nodes are forgotten.
"""
import dataclasses

from seqcl import EwcConfig, PartitionSpec, Policy, RunConfig, sweep

base = RunConfig(horizon=16, partition=PartitionSpec("class_noniid", 4, classes_per_node=(3, 6)))
arms = [Policy("random"), Policy("scheduled")]

plain = sweep(base, arms, seeds=range(3))
ewc = sweep(dataclasses.replace(base, ewc=EwcConfig(lam=50.0)), arms, seeds=range(3))

for label in ("random", "scheduled"):
    print(f"{label:10s} final acc {plain.final_acc(label).mean():.3f} -> {ewc.final_acc(label).mean():.3f} with EWC;"
          f" mean min forgetting {plain.mean_min_forgetting(label):+.3f} -> {ewc.mean_min_forgetting(label):+.3f}")
