"""Generating synthetic bags and checking them against the label oracle.

The generator draws bags from isotropic Gaussian clusters: background
instances around the origin, and for a positive bag a small share of
instances from its subtype cluster.  Because the cluster means are known,
every bag's label can be re-derived analytically, which is what makes the
whole benchmark self-verifying.
"""

import numpy as np

from moediff.synthetic import (SynthSpec, cluster_means, generate_bag, generate_dataset,
                               nearest_cluster, oracle_label)

spec = SynthSpec(num_classes=3, embedding_dim=64, instances_min=12, instances_max=24,
                 positive_fraction=0.1, cluster_separation=8.0, noise_std=1.0, seed=7)

print("cluster geometry")
means = cluster_means(spec)
for a in range(3):
    for b in range(a + 1, 3):
        print(f"  |mean_{a} - mean_{b}| = {np.linalg.norm(means[a] - means[b]):.3f}")

print("\none bag per class")
for label in range(3):
    bag = generate_bag(spec, label, seed=1000 + label)
    assigned = nearest_cluster(bag.instances, spec)
    print(f"  label {label}: {bag.size} instances, per-cluster counts "
          f"{np.bincount(assigned, minlength=3).tolist()}, "
          f"oracle says {oracle_label(bag, spec)}")

print("\noracle agreement over a full dataset")
manifest, bags = generate_dataset(spec, bags_per_class=50)
hits = sum(oracle_label(bag, spec) == bag.label for bag in bags)
print(f"  {hits}/{len(bags)} bags re-labelled correctly by the oracle")

print("\nscarcity control")
shares = []
for bag in bags:
    if bag.label > 0:
        shares.append((nearest_cluster(bag.instances, spec) > 0).mean())
print(f"  mean positive share {np.mean(shares):.3f} (target {spec.positive_fraction})")
