"""Training the in-context model and forecasting a new individual.

The network never sees a real study during training: studies are simulated on
the fly and the encoder learns to amortise posterior inference over the
study-level and individual-level latents. At test time a new individual is
predicted from the other individuals of its study plus its own first few
samples, in a single forward pass and without any fitting.

Run:  python3 demos/02_train_and_forecast.py [iterations]   (default 150, a few minutes)
"""
import sys
import time

import numpy as np

from aicmet.inference import (EvalProtocolConfig, evaluate_study, pooled_log_rmse, population_median_predictor,
                              posterior_predictive)
from aicmet.model import AICMET, ModelConfig
from aicmet.ou import PriorConfig
from aicmet.simulate import SimulationConfig
from aicmet.training import TrainerConfig, eval_batch, train

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 150
sim = SimulationConfig(prior=PriorConfig(n_peripheral=(0, 1)))
model_cfg = ModelConfig(H=32, Z_d=8, heads=4, layers=2)
trainer = TrainerConfig(learning_rate=3e-3, batch_size=16, iterations=iterations, loss_weight_lr_scale=0.1)

held_out = eval_batch(sim, seed=2024, n=6)
cfg = EvalProtocolConfig(mc_samples=64)


def score(model):
    return pooled_log_rmse([evaluate_study(s, cfg, model=model, rng=np.random.default_rng(0)) for s in held_out])


baseline = pooled_log_rmse([evaluate_study(s, cfg, predictor=population_median_predictor(), include_partial=False)
                            for s in held_out])
print(f"population-median baseline log-RMSE: {baseline:.3f}")
print(f"untrained model log-RMSE:            {score(AICMET(model_cfg)):.3f}")

t0 = time.perf_counter()


def progress(row):
    if row["step"] % 25 == 0:
        print(f"  step {row['step']:4d}  loss {row['loss_total']:8.2f}  "
              f"forecast nll {row['recon_forecast']:7.1f}  ({time.perf_counter() - t0:.0f}s)")


result = train(trainer, sim, model_cfg, progress=progress)
model = result.model
print(f"trained model log-RMSE:              {score(model):.3f}  after {iterations} steps")

# One forecast in detail: context = the rest of the study + 4 early samples.
study = held_out[0]
d = study.individuals[0]
t, y = d.after(4).valid()
rep = posterior_predictive(model, study.without(0), d.first(4), t, cfg, np.random.default_rng(1), observed=y)
print("\n time    observed   predicted   90% band")
for k in range(t.size):
    print(f"{t[k]:5.1f}  {y[k]:9.4g}  {rep.mean[k]:10.4g}   [{rep.quantiles[5.0][k]:.3g}, {rep.quantiles[95.0][k]:.3g}]")
print(f"joint log predictive density of the targets: {rep.log_likelihood():.2f}")
