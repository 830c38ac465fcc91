import math

import numpy as np
import pytest

from aicmet import autodiff as ad
from aicmet.model import AICMET, LOSS_COMPONENTS, ModelConfig
from aicmet.ou import PriorConfig
from aicmet.simulate import SimulationConfig, study_rng
from aicmet.training import (METRIC_COLUMNS, OptimizerState, TrainerConfig, TrainingDivergedError,
                             batch_loss, read_metrics, snapshot_step, train, training_batch, training_step)

TINY = ModelConfig(H=16, Z_d=4, heads=2, layers=1, init_seed=3)
SIM = SimulationConfig(prior=PriorConfig(n_individuals=(3, 5)))


def _step(model, studies, lr=1e-3, seed=0):
    cfg = TrainerConfig(learning_rate=lr, batch_size=len(studies), iterations=1)
    opt = OptimizerState.for_store(model.store)
    return training_step(studies, model, opt, cfg, study_rng(seed, 0, 1), seed=seed)


def test_config_defaults_and_validation():
    cfg = TrainerConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.iterations) == (1e-4, 128, 5000)
    with pytest.raises(ValueError, match="batch_size"):
        TrainerConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        TrainerConfig(learning_rate=float("nan")).validate()


def test_identical_seeds_give_bit_identical_updates(studies):
    a, b = AICMET(TINY), AICMET(TINY)
    ma, mb = _step(a, studies), _step(b, studies)
    assert ma == mb
    for name, t in a.store.items():
        assert np.array_equal(t.value, b.store[name].value), name


def test_zero_learning_rate_leaves_parameters(studies):
    model = AICMET(TINY)
    before = model.store.state_dict()
    _step(model, studies, lr=0.0)
    for name, t in model.store.items():
        assert np.array_equal(t.value, before[name])


def test_frozen_loss_weights_stay_put(studies):
    model = AICMET(TINY)
    cfg = TrainerConfig(learning_rate=1e-2, batch_size=len(studies), loss_weight_lr_scale=0.0)
    opt = OptimizerState.for_store(model.store)
    before = model.store.state_dict()
    training_step(studies, model, opt, cfg, np.random.default_rng(0))
    moved = {n for n, t in model.store.items() if not np.array_equal(t.value, before[n])}
    assert moved and not any(n.startswith("loss.") for n in moved)
    with pytest.raises(ValueError, match="loss_weight_lr_scale"):
        TrainerConfig(loss_weight_lr_scale=-1.0).validate()


def test_gradient_norm_is_finite_and_positive(studies):
    m = _step(AICMET(TINY), studies)
    assert math.isfinite(m["grad_norm"]) and m["grad_norm"] > 0
    assert set(LOSS_COMPONENTS) <= set(m)


def test_non_finite_loss_aborts_with_seed(studies):
    model = AICMET(TINY)
    model.store["dec.head.fc2.bias"].value[:] = np.nan
    with pytest.raises(TrainingDivergedError) as err:
        _step(model, studies, seed=17)
    assert err.value.seed == 17


def test_on_the_fly_studies_depend_only_on_seed_and_index():
    a = training_batch(SIM, 5, 3, 4)
    b = training_batch(SIM, 5, 0, 16)[12:]
    for x, y in zip(a, b):
        assert x.study_id == y.study_id
        for d, e in zip(x.individuals, y.individuals):
            assert np.array_equal(d.obs, e.obs) and np.array_equal(d.times, e.times)


def test_loss_decreases_on_fixed_data(studies):
    model = AICMET(TINY)
    cfg = TrainerConfig(learning_rate=3e-3, batch_size=len(studies))
    opt = OptimizerState.for_store(model.store)

    def fixed_loss():
        noise: dict = {}
        with ad.Tape():
            total, _ = batch_loss(model, studies, cfg, np.random.default_rng(0), noise)
        return total.item()

    initial = fixed_loss()
    for t in range(200):
        training_step(studies, model, opt, cfg, np.random.default_rng(1000 + t))
    assert fixed_loss() < initial


def test_zero_iterations_snapshot_equals_init(tmp_path):
    res = train(TrainerConfig(iterations=0, batch_size=2), SIM, TINY, out_dir=tmp_path)
    model, _ = AICMET.load(res.snapshot)
    init = AICMET(TINY)
    for name, t in init.store.items():
        assert np.array_equal(model.store[name].value, t.value)
    assert snapshot_step(res.snapshot) == 0


def test_metrics_log_reproduces_total(tmp_path):
    res = train(TrainerConfig(iterations=3, batch_size=2, learning_rate=1e-3), SIM, TINY, out_dir=tmp_path)
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0].split(",")
    assert tuple(header[:len(METRIC_COLUMNS)]) == METRIC_COLUMNS
    rows = read_metrics(tmp_path / "metrics.csv")
    assert [r["step"] for r in rows] == [1, 2, 3]
    for row, mem in zip(rows, res.metrics):
        total = sum(math.exp(-row[f"u_{c}"]) * row[c] + row[f"u_{c}"] for c in LOSS_COMPONENTS)
        assert abs(total - row["loss_total"]) <= 1e-12 * max(1.0, abs(total))
        assert row["loss_total"] == mem["loss_total"]
        assert row["wall_time_s"] is None


def test_resume_reproduces_unbroken_run(tmp_path):
    full = train(TrainerConfig(iterations=4, batch_size=2, learning_rate=1e-3, snapshot_every=2),
                 SIM, TINY, out_dir=tmp_path / "full")
    mid = tmp_path / "full" / "snapshot_0000002.json"
    assert snapshot_step(mid) == 2
    resumed = train(TrainerConfig(iterations=4, batch_size=2, learning_rate=1e-3),
                    SIM, TINY, out_dir=tmp_path / "resumed", resume_from=mid)
    for name, t in full.model.store.items():
        assert np.array_equal(resumed.model.store[name].value, t.value), name
    assert [r["loss_total"] for r in resumed.metrics] == [r["loss_total"] for r in full.metrics[2:]]


def test_resume_needs_optimizer_state(tmp_path):
    path = AICMET(TINY).save(tmp_path / "bare.json")
    with pytest.raises(ValueError, match="optimizer"):
        train(TrainerConfig(iterations=1, batch_size=2), SIM, resume_from=path)
