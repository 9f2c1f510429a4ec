"""Watching the expert routers learn to separate instances.

Trains the aggregator on a small synthetic dataset and then inspects the
per-instance router scores: the negative expert should accept background
instances, each positive expert should accept (mostly) its own subtype,
and the retained union should be sparse.
"""

import numpy as np

from moediff import autodiff as ad
from moediff.moe import aggregate, score_table
from moediff.synthetic import SynthSpec, generate_dataset, nearest_cluster
from moediff.training import TrainConfig, train_stage1

spec = SynthSpec(num_classes=3, embedding_dim=64, instances_min=12, instances_max=24,
                 positive_fraction=0.1, cluster_separation=8.0, noise_std=1.0, seed=7)
_, train_bags = generate_dataset(spec, 40)
_, test_bags = generate_dataset(spec, 10, seed_offset=10**6, id_prefix="eval")

config = TrainConfig(seed=11)
config.stage1.epochs = 40
print(f"training the aggregator on {len(train_bags)} bags "
      f"(ratios {config.ratios.alpha0}/{config.ratios.alpha1})...")
model, log = train_stage1(train_bags, config, eval_bags=test_bags)
print(f"final loss {log[-1]['loss']:.4f}, held-out prior accuracy {log[-1]['acc']:.3f}")

print("\nrouter scores on one positive bag (class 1)")
bag = next(b for b in test_bags if b.label == 1)
truth = nearest_cluster(bag.instances, spec)
rows = score_table(model, bag, config.ratios)
print("  instance  true-cluster  expert0-score  expert1-score  expert2-score  retained-by")
for i in range(bag.size):
    per_expert = {r["expert_index"]: r for r in rows if r["instance_index"] == i}
    retained = [str(r) for r in range(3) if per_expert[r]["retained"]]
    print(f"    {i:3d}       {truth[i]}          "
          + "        ".join(f"{per_expert[r]['score']:.3f}" for r in range(3))
          + "      " + (",".join(retained) or "-"))

print("\nsparsity across the held-out bags")
with ad.no_grad():
    sizes = [(aggregate(model, b, config.ratios).sparse_bag.size, b.size)
             for b in test_bags]
kept = sum(m for m, _ in sizes)
total = sum(n for _, n in sizes)
print(f"  retained {kept}/{total} instances "
      f"({kept / total:.1%}); all bags below half: "
      f"{all(m < n / 2 for m, n in sizes)}")
