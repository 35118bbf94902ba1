"""
Comparing policies over paired seeds
====================================

Per seed, every policy starts from the same partition and the same initial
model and sees the same per-visit shuffles. On domain-shifted nodes where one
node has a squeezed feature space, greedy selection by score never visits that
node; the scheduler's visit quota forces it in.
"""
import dataclasses

from seqcl import DomainTransform, PartitionSpec, Policy, RunConfig, ScoringConfig, sweep

spec = PartitionSpec("domain_noniid", 4, domain_transforms=(DomainTransform(sparsify=0.75),) + (DomainTransform(),) * 3)
base = RunConfig(horizon=20, partition=spec)
arms = [Policy("random"), Policy("greedy_nwot"), Policy("scheduled", quota=3),
        dataclasses.replace(base, scoring=ScoringConfig("aid"))]
report = sweep(base, arms, seeds=range(4))

for label in report.labels:
    hist = report.histograms(label)
    print(f"{label:16s} final {report.final_acc(label).mean():.3f}  "
          f"paired diff vs random {report.paired_differences(label, 'random').mean():+.3f}")
    for seed, h in zip(report.seeds, hist):
        print(f"    seed {seed} visits {h}")

# mean and spread of global accuracy per step, ready for plotting
print("\nscheduled mean curve", report.mean_curve("scheduled").round(3))
print("scheduled std curve ", report.std_curve("scheduled").round(3))
