"""Finite-difference verification of every network block and of the full
training objective (both bounds plus the loss combiner, noise frozen)."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, ParameterStore, Tensor, grad_check
from .model import AICMET, ModelConfig
from .nn import (AttentionPool, FeedForward, GRUCell, LayerNorm, Linear, LossWeights, MultiHeadAttention,
                 TransformerBlock, recurrent_forward, weighted_total_loss)
from .objectives import batch_elbo_forecast, batch_elbo_new, loss_components
from .ou import PriorConfig
from .simulate import SimulationConfig, generate_study, partition_study, study_rng


def _weighted(x: Tensor, w: np.ndarray) -> Tensor:
    # a random linear functional keeps every output entry in play
    return ad.tsum(x * w)


def block_checks(seed: int = 0, tolerance: float = 1e-4) -> dict[str, GradCheckReport]:
    """Gradient checks of each primitive on small random inputs (inputs included)."""
    rng = np.random.default_rng(seed)
    H, heads, L = 8, 2, 5
    reports = {}

    def run(name, build):
        store = ParameterStore()
        f, extra = build(store)
        params = dict(store.items())
        params.update(extra)
        reports[name] = grad_check(f, params, tolerance=tolerance, rng=np.random.default_rng(seed))

    def linear(store):
        lin = Linear(store, "lin", 3, 4, rng)
        x = Tensor(rng.normal(size=(6, 3)), requires_grad=True, name="x")
        w = rng.normal(size=(6, 4))
        return (lambda: _weighted(lin(x), w)), {"x": x}

    def feedforward(store):
        ff = FeedForward(store, "ff", 3, 7, 2, rng)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True, name="x")
        w = rng.normal(size=(4, 2))
        return (lambda: _weighted(ff(x), w)), {"x": x}

    def layernorm(store):
        ln = LayerNorm(store, "ln", H)
        store["ln.gain"].value[:] = rng.normal(1.0, 0.3, H)
        x = Tensor(rng.normal(size=(3, H)), requires_grad=True, name="x")
        w = rng.normal(size=(3, H))
        return (lambda: _weighted(ln(x), w)), {"x": x}

    def gru(store):
        cell = GRUCell(store, "gru", 3, H, rng)
        x = Tensor(rng.normal(size=(2, L, 3)), requires_grad=True, name="x")
        mask = np.ones((2, L), dtype=bool)
        mask[1, 3:] = False
        w = rng.normal(size=(2, L, H))
        return (lambda: _weighted(recurrent_forward(cell, x, mask), w)), {"x": x}

    def attention(store):
        mha = MultiHeadAttention(store, "mha", H, heads, rng)
        q = Tensor(rng.normal(size=(2, 3, H)), requires_grad=True, name="q")
        kv = Tensor(rng.normal(size=(2, L, H)), requires_grad=True, name="kv")
        mask = np.ones((2, L), dtype=bool)
        mask[0, 2:] = False
        w = rng.normal(size=(2, 3, H))
        return (lambda: _weighted(mha(q, kv, kv, mask), w)), {"q": q, "kv": kv}

    def pool(store):
        p = AttentionPool(store, "pool", H, heads, rng)
        x = Tensor(rng.normal(size=(3, L, H)), requires_grad=True, name="x")
        mask = np.ones((3, L), dtype=bool)
        mask[2, 1:] = False
        w = rng.normal(size=(3, H))
        return (lambda: _weighted(p(x, mask), w)), {"x": x}

    def block_self(store):
        blk = TransformerBlock(store, "blk", H, heads, rng)
        x = Tensor(rng.normal(size=(2, L, H)), requires_grad=True, name="x")
        mask = np.ones((2, L), dtype=bool)
        mask[1, 4:] = False
        w = rng.normal(size=(2, L, H))
        return (lambda: _weighted(blk(x, mask=mask), w)), {"x": x}

    def block_cross(store):
        blk = TransformerBlock(store, "blk", H, heads, rng, cross=True)
        q = Tensor(rng.normal(size=(2, 4, H)), requires_grad=True, name="q")
        k = Tensor(rng.normal(size=(2, 1, H)), requires_grad=True, name="k")
        v = Tensor(rng.normal(size=(2, 1, H)), requires_grad=True, name="v")
        w = rng.normal(size=(2, 4, H))
        return (lambda: _weighted(blk(q, k, v), w)), {"q": q, "k": k, "v": v}

    def combiner(store):
        lw = LossWeights(store, "loss", ["a", "b", "c"])
        store["loss.u"].value[:] = rng.normal(size=3)
        comps = [Tensor(float(v), requires_grad=True, name=f"L{i}") for i, v in enumerate(rng.uniform(0.5, 3, 3))]
        return (lambda: weighted_total_loss(comps, lw)), {c.name: c for c in comps}

    for name, build in [("linear", linear), ("feedforward", feedforward), ("layer_norm", layernorm),
                        ("gru", gru), ("multi_head_attention", attention), ("attention_pool", pool),
                        ("transformer_block", block_self), ("cross_attention_block", block_cross),
                        ("loss_combiner", combiner)]:
        run(name, build)
    return reports


def objective_check(model_cfg: ModelConfig | None = None, seed: int = 0, n_studies: int = 2,
                    tolerance: float = 1e-4, max_entries: int | None = 3) -> GradCheckReport:
    """Check the combined objective of both bounds with all Monte Carlo noise frozen."""
    model = AICMET(model_cfg or ModelConfig(H=16, Z_d=4, heads=2, layers=1))
    sim = SimulationConfig(prior=PriorConfig(n_individuals=(3, 5)))
    studies = [generate_study(sim, study_rng(seed, i)) for i in range(n_studies)]
    rng = np.random.default_rng(seed)
    # move the combiner weights off zero so their gradients are exercised
    model.loss_weights.u.value[:] = rng.normal(0.0, 0.5, size=model.loss_weights.u.shape)
    holdouts = [partition_study(s, "holdout_individual", rng) for s in studies]
    forecasts = [partition_study(s, "context_target", rng) for s in studies]
    noise: dict = {}

    def f():
        new = batch_elbo_new(model, holdouts, 1, rng, noise)
        fc = batch_elbo_forecast(model, forecasts, 1, rng, noise)
        return weighted_total_loss(loss_components(new, fc), model.loss_weights)

    f()  # populate the frozen noise
    return grad_check(f, model.store, tolerance=tolerance, max_entries=max_entries,
                      rng=np.random.default_rng(seed))


def run_gradcheck_suite(model_cfg: ModelConfig | None = None, seed: int = 0,
                        max_entries: int | None = 3, tolerance: float = 1e-4) -> dict[str, GradCheckReport]:
    reports = block_checks(seed, tolerance)
    reports["full_objective"] = objective_check(model_cfg, seed, tolerance=tolerance, max_entries=max_entries)
    return reports
