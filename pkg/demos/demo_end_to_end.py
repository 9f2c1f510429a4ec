"""The full pipeline at reduced scale: two training stages, posterior
sampling, metrics with PAvPU, and the pooling controls for comparison.

The defaults here are trimmed for a quick run (a few minutes); the
acceptance suite runs the full-size version.
"""

import numpy as np

from moediff.baselines import baseline_accuracy, fit_baseline
from moediff.diffusion import default_schedule
from moediff.evaluate import evaluate
from moediff.synthetic import SynthSpec, generate_dataset
from moediff.training import TrainConfig, train_stage1, train_stage2

spec = SynthSpec(num_classes=3, embedding_dim=64, instances_min=12, instances_max=24,
                 positive_fraction=0.1, cluster_separation=8.0, noise_std=1.0, seed=5)
_, train_bags = generate_dataset(spec, 60)
_, test_bags = generate_dataset(spec, 20, seed_offset=10**6, id_prefix="test")

config = TrainConfig(seed=9)
config.stage1.epochs = 50
config.stage2.epochs = 100

print(f"stage 1: expert aggregator on {len(train_bags)} bags")
moe, log1 = train_stage1(train_bags, config, eval_bags=test_bags)
print(f"  loss {log1[-1]['loss']:.4f}, prior accuracy {log1[-1]['acc']:.3f}")

print("stage 2: diffusion denoiser (aggregator frozen)")
denoiser, log2 = train_stage2(train_bags, moe, config)
print(f"  noise loss {log2[-1]['loss']:.4f}")

print("posterior sampling and metrics")
sched = default_schedule(config.diffusion.timesteps, config.diffusion.beta_min)
report, records = evaluate(moe, denoiser, sched, test_bags, config.ratios,
                           n_samples=100, seed=2)
print(f"  accuracy {report.accuracy:.4f}  f1 {report.f1_macro:.4f}  "
      f"auc {report.auc_macro:.4f}  pavpu {report.pavpu:.4f}")
print(f"  certain on {np.mean([r.certain for r in records]):.0%} of bags")

print("pooling controls")
for mode in ("mean", "max", "attention"):
    control = fit_baseline(mode, train_bags, 3, seed=4, epochs=60)
    print(f"  {mode:9s} pooling accuracy {baseline_accuracy(control, test_bags):.4f}")
