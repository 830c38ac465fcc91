"""Virtual populations and the visual predictive check.

Given a study, the model infers the study latent from the observed
individuals, draws fresh individual latents from the prior and decodes them on
the study's design times. Percentiles of many such virtual replicates, set
against the observed percentiles bin by bin, form the VPC table.

Run:  python3 demos/03_virtual_population_vpc.py [snapshot.json]
Without a snapshot a short training run is done first (about a minute).
"""
import sys

import numpy as np

from aicmet.inference import EvalProtocolConfig, nearest_rank_percentile, study_vpc, synthesize_population
from aicmet.model import AICMET, ModelConfig
from aicmet.ou import PriorConfig
from aicmet.simulate import SimulationConfig, generate_study, study_rng
from aicmet.training import TrainerConfig, train

sim = SimulationConfig(prior=PriorConfig(n_peripheral=(0, 1), n_individuals=(12, 16)))
if len(sys.argv) > 1:
    model, _ = AICMET.load(sys.argv[1])
else:
    model = train(TrainerConfig(learning_rate=3e-3, batch_size=8, iterations=60, loss_weight_lr_scale=0.1),
                  sim, ModelConfig(H=32, Z_d=8, heads=4, layers=2)).model

study = generate_study(sim, study_rng(99, 0), "vpc-demo")
rng = np.random.default_rng(0)

# a handful of virtual individuals sharing one draw of the study latent
virtual = synthesize_population(model, study, 5, rng=rng)[0]
print("virtual individuals (first three design times):")
for k, d in enumerate(virtual):
    print(f"  v{k}: " + ", ".join(f"{t:.2f}h->{y:.3g}" for t, y in zip(d.times[:3], d.obs[:3])))

# percentiles use the nearest-rank rule: the ceil(p n / 100)-th smallest value
print("\nnearest-rank p50 of [3, 1, 2, 10]:", nearest_rank_percentile([3, 1, 2, 10], 50))

table = study_vpc(model, study, EvalProtocolConfig(vpc_replicates=50), rng)
print(f"\nVPC over {len(table.rows)} bins (simulated vs observed p5 / p50 / p95)")
print("  time    sim p5    sim p50   sim p95 |  obs p5    obs p50   obs p95   n")
for r in table.rows:
    print(f"{r.bin_time:6.2f}  " + "  ".join(f"{v:8.3g}" for v in r.sim) + " | "
          + "  ".join(f"{v:8.3g}" for v in r.obs) + f"  {r.n_obs:2d}")
inside = np.mean([r.sim[0] <= r.obs[1] <= r.sim[2] for r in table.rows])
print(f"observed medians inside the simulated 5-95% band: {inside:.0%}")
for t, why in table.dropped:
    print(f"bin {t:.2f} dropped: {why}")
