"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines appear in
the output even without ``-s``.
"""
import json
import math
import shutil
import time

import numpy as np
import pytest

from aicmet import cli
from aicmet.autodiff import Tensor
from aicmet.gradcheck import run_gradcheck_suite
from aicmet.inference import (EvalProtocolConfig, evaluate_study, nearest_rank_percentile, noise_floor,
                              oracle_predictor, pooled_log_rmse, population_median_predictor,
                              posterior_predictive, study_vpc, vpc_percentiles)
from aicmet.model import AICMET, GaussianPosterior, ModelConfig, StudyScaler
from aicmet.objectives import kl_diag_gaussian, kl_diag_gaussian_np
from aicmet.ou import CoordinateHyperParams, IndividualMeans, PriorConfig, StudyHyperParams, sample_parameter_path
from aicmet.pk import DoseEvent, KineticParams, Route, apply_dose, bateman, integrate_path
from aicmet.simulate import IndividualRecord, SimulationConfig, StudyRecord, generate_study, study_rng
from aicmet.training import TrainerConfig, eval_batch, train

# desk-scale training run used by criterion 6
DESK_SIM = SimulationConfig(prior=PriorConfig(n_peripheral=(0, 1)))
DESK_MODEL = ModelConfig(H=32, Z_d=8, heads=4, layers=2)
DESK_TRAINER = TrainerConfig(learning_rate=3e-3, batch_size=16, iterations=500, seed=0, loss_weight_lr_scale=0.1)
HELD_OUT_SEED = 12345
HELD_OUT_STUDIES = 16


@pytest.fixture
def verdict(capsys):
    def report(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nCRITERION {number} {'PASS' if ok else 'FAIL'}: {title} | {detail}")
        assert ok, detail

    return report


# ---------------------------------------------------------------- 1. ODE oracle

def _oral_run(n_steps: int):
    grid = np.linspace(0.0, 24.0, n_steps + 1)
    p = KineticParams(1.0, 0.1, 10.0)
    x = integrate_path(apply_dose(DoseEvent(100.0, Route.ORAL), 0), np.tile(p.log_vector(), (grid.size, 1)), grid)
    exact = bateman(grid, 100.0, 1.0, 0.1)
    return np.max(np.abs(x[1:, 1] - exact[1:]) / exact[1:]), np.max(np.abs(x[:, 1] - exact))


def test_criterion_1_ode_oracle(verdict):
    t0 = time.perf_counter()
    rel_512, abs_512 = _oral_run(512)
    elapsed = time.perf_counter() - t0
    _, abs_256 = _oral_run(256)
    ratio = abs_256 / abs_512
    ok = rel_512 < 1e-6 and ratio >= 12.0 and elapsed < 1.0
    verdict(1, "ODE oracle", ok,
            f"max rel err {rel_512:.2e} (<1e-6), halving ratio {ratio:.1f} (>=12), {elapsed:.3f}s (<1s)")


# ---------------------------------------------------------------- 2. OU exactness

def test_criterion_2_ou_exactness(verdict):
    t0 = time.perf_counter()
    n = 100_000
    m, lam, sigma = np.array([0.5, -1.0, 2.0]), np.array([0.7, 2.0, 0.3]), np.array([0.4, 1.1, 0.25])
    coords = [CoordinateHyperParams(m[k], 0.0, lam[k], sigma[k]) for k in range(3)]
    eta = StudyHyperParams(coords, 0, 3, DoseEvent(10.0), 0.1)
    # lags keep lambda * lag <= 1 so the autocovariance is resolvable at 1e5 paths
    grid = np.array([0.0, 0.3, 0.7, 1.2])
    th = sample_parameter_path(eta, IndividualMeans(np.tile(m, (n, 1))), grid, np.random.default_rng(0)).theta
    var = sigma ** 2 / (2 * lam)
    failures = []
    worst_mean = worst_var = worst_cov = 0.0
    for node in (0, 2, 3):
        x = th[:, node, :]
        z = np.abs(x.mean(axis=0) - m) / np.sqrt(var / n)
        rv = np.abs(x.var(axis=0) / var - 1)
        worst_mean, worst_var = max(worst_mean, z.max()), max(worst_var, rv.max())
        if np.any(z > 3) or np.any(rv > 0.05):
            failures.append(node)
    for a, b in ((0, 1), (1, 2), (2, 3)):
        lag = grid[b] - grid[a]
        cov = np.mean((th[:, a] - m) * (th[:, b] - m), axis=0)
        expect = var * np.exp(-lam * lag)
        rc = np.abs(cov / expect - 1)
        worst_cov = max(worst_cov, rc.max())
        if np.any(rc > 0.10):
            failures.append((a, b))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 30.0
    verdict(2, "OU exactness", ok,
            f"worst mean z {worst_mean:.2f} (<3), var {worst_var:.3%} (<5%), "
            f"autocov {worst_cov:.3%} (<10%), {elapsed:.1f}s")


# ---------------------------------------------------------------- 3. gradient suite

def test_criterion_3_gradient_suite(verdict):
    t0 = time.perf_counter()
    reports = run_gradcheck_suite(ModelConfig(H=16, Z_d=4, heads=2, layers=1), seed=0, tolerance=1e-4)
    elapsed = time.perf_counter() - t0
    failed = [name for name, r in reports.items() if not r.passed]
    worst = max(r.max_deviation for r in reports.values())
    ok = not failed and "full_objective" in reports and elapsed < 120.0
    verdict(3, "gradient suite", ok,
            f"{len(reports)} checks, failed {failed or 'none'}, worst rel err {worst:.1e} (<1e-4), {elapsed:.1f}s")


# ---------------------------------------------------------------- 4. KL correctness

def test_criterion_4_kl_correctness(verdict):
    rng = np.random.default_rng(4)
    worst = 0.0
    zero_exact = True
    for _ in range(100):
        d = int(rng.integers(1, 6))
        m1, m2 = rng.normal(0, 1, d), rng.normal(0, 1, d)
        lv1, lv2 = rng.normal(0, 0.7, d), rng.normal(0, 0.7, d)
        z = m1 + np.exp(lv1 / 2) * rng.standard_normal((100_000, d))
        log_ratio = -0.5 * np.sum((z - m1) ** 2 / np.exp(lv1) + lv1 - (z - m2) ** 2 / np.exp(lv2) - lv2, axis=1)
        exact = kl_diag_gaussian(GaussianPosterior(Tensor(m1), Tensor(lv1)),
                                 GaussianPosterior(Tensor(m2), Tensor(lv2))).item()
        worst = max(worst, abs(log_ratio.mean() - exact) / exact)
        q = GaussianPosterior(Tensor(m1), Tensor(lv1))
        zero_exact &= kl_diag_gaussian(q, q).item() == 0.0 and float(kl_diag_gaussian_np(m1, lv1, m1, lv1)) == 0.0
    ok = worst < 0.02 and zero_exact
    verdict(4, "KL correctness", ok, f"worst MC rel dev {worst:.3%} over 100 pairs (<2%), KL(q||q)=0 exact: {zero_exact}")


# ---------------------------------------------------------------- 5. invariance suite

def test_criterion_5_invariance_suite(verdict):
    model = AICMET(ModelConfig(H=32, Z_d=8, heads=4, layers=2, init_seed=11))
    sim = SimulationConfig(prior=PriorConfig(n_individuals=(6, 9)))
    s = generate_study(sim, study_rng(5, 0), "inv")
    rng = np.random.default_rng(5)

    # study pooling under permutations of the individuals
    base = model.encode_study(s)
    perm_drift = 0.0
    for _ in range(5):
        perm = rng.permutation(len(s))
        q = model.encode_study(StudyRecord([s.individuals[i] for i in perm], s.study_id))
        perm_drift = max(perm_drift, np.max(np.abs(q.mean.value - base.mean.value)),
                         np.max(np.abs(q.log_var.value - base.log_var.value)))

    # masked padding entries with arbitrary values
    d = s.individuals[0].first(5)
    t, y = d.valid()
    sc = StudyScaler.from_records([d])
    padded = IndividualRecord(d.dose, np.concatenate([t, t[-1] + np.array([0.5, 3.0])]),
                              np.concatenate([y, [1e8, 0.0]]), np.array([True] * t.size + [False, False]))
    a, b = model.encode_individual(d, sc), model.encode_individual(padded, sc)
    pad_drift = max(np.max(np.abs(a.mean.value - b.mean.value)), np.max(np.abs(a.log_var.value - b.log_var.value)))

    # target values never reach the encoder
    seen = []
    original = model.encode_records

    def spy(records, scalers):
        enc = original(records, scalers)
        seen.append((enc.posterior.mean.value.copy(), enc.posterior.log_var.value.copy()))
        return enc

    model.encode_records = spy
    cfg = EvalProtocolConfig(mc_samples=4)
    evaluate_study(s, cfg, model=model, rng=np.random.default_rng(0))
    first = list(seen)
    seen.clear()
    d0 = s.individuals[0]
    bumped = d0.obs.copy()
    bumped[cfg.context_observations:] *= 13.0
    changed = StudyRecord([IndividualRecord(d0.dose, d0.times, bumped, d0.mask)] + list(s.individuals[1:]), s.study_id)
    evaluate_study(changed, cfg, model=model, rng=np.random.default_rng(0))
    del model.encode_records
    leak_free = all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(first[:1], seen[:1]))

    # each query time decodes the same whatever batch it arrives in
    zn, zs = rng.normal(size=8), rng.normal(size=8)
    dose = DoseEvent(80.0, Route.ORAL)
    times = np.sort(rng.uniform(0.0, 48.0, 41))
    whole = model.decode_at_times(times, zn, zs, dose)
    batch_exact = True
    for lo, hi in ((0, 1), (1, 7), (7, 24), (24, 41)):
        part = model.decode_at_times(times[lo:hi], zn, zs, dose)
        batch_exact &= np.array_equal(part.mean, whole.mean[lo:hi]) and np.array_equal(part.log_var,
                                                                                         whole.log_var[lo:hi])
    for k in rng.choice(times.size, 6, replace=False):
        one = model.decode_at_times(times[k:k + 1], zn, zs, dose)
        batch_exact &= one.mean[0] == whole.mean[k] and one.log_var[0] == whole.log_var[k]

    ok = perm_drift <= 1e-12 and pad_drift <= 1e-10 and leak_free and batch_exact
    verdict(5, "invariance suite", ok,
            f"permutation drift {perm_drift:.1e} (<=1e-12), padding drift {pad_drift:.1e} (<=1e-10), "
            f"no leakage (bitwise): {leak_free}, query-batch exact: {batch_exact}")


# ---------------------------------------------------------------- 6. smoke training

def _forecast_log_likelihood(model, studies, cfg) -> float:
    total = 0.0
    for k, s in enumerate(studies):
        for i, d in enumerate(s.individuals):
            if d.n_valid <= cfg.context_observations:
                continue
            t, y = d.after(cfg.context_observations).valid()
            rep = posterior_predictive(model, s.without(i), d.first(cfg.context_observations), t, cfg,
                                       np.random.default_rng(1000 * k + i), observed=y)
            total += rep.log_likelihood()
    return total


def test_criterion_6_smoke_training(verdict):
    t0 = time.perf_counter()
    held = eval_batch(DESK_SIM, HELD_OUT_SEED, HELD_OUT_STUDIES)
    cfg = EvalProtocolConfig(mc_samples=64)
    init = AICMET(DESK_MODEL)
    ll_init = _forecast_log_likelihood(init, held, cfg)
    result = train(DESK_TRAINER, DESK_SIM, DESK_MODEL)
    model = result.model
    ll_trained = _forecast_log_likelihood(model, held, cfg)
    evs = [evaluate_study(s, cfg, model=model, rng=np.random.default_rng(1)) for s in held]
    rmse = pooled_log_rmse(evs)
    baseline = pooled_log_rmse([evaluate_study(s, cfg, predictor=population_median_predictor(),
                                               include_partial=False) for s in held])
    coverage = float(np.nanmean([e.coverage for e in evs]))
    elapsed = time.perf_counter() - t0
    ok = ll_trained > ll_init and rmse < baseline and elapsed < 900.0
    verdict(6, "smoke training", ok,
            f"held-out forecast log-lik {ll_init:.1f} -> {ll_trained:.1f}, pooled log-RMSE {rmse:.4f} "
            f"vs population-median baseline {baseline:.4f}, 90% band coverage {coverage:.3f}, {elapsed:.0f}s")


# ---------------------------------------------------------------- 7. noise floor

def test_criterion_7_noise_floor(verdict):
    details, ok = [], True
    for sigma in (0.05, 0.15, 0.25):
        sim = SimulationConfig(prior=PriorConfig(sigma_obs=(sigma, sigma)))
        evs = []
        for i in range(40):
            s = generate_study(sim, study_rng(7, i))
            evs.append(evaluate_study(s, predictor=oracle_predictor(s)))
        got, floor = pooled_log_rmse(evs), noise_floor(sigma)
        ok &= abs(got - floor) < 0.2 * floor
        details.append(f"sigma {sigma}: {got:.4f} vs floor {floor:.4f}")
    verdict(7, "noise floor", ok, ", ".join(details) + " (within 20%)")


# ---------------------------------------------------------------- 8. VPC correctness

def test_criterion_8_vpc_correctness(verdict):
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(2000):
        x = rng.lognormal(size=int(rng.integers(1, 80)))
        srt = np.sort(x)
        for p in (5.0, 50.0, 95.0):
            if nearest_rank_percentile(x, p) != srt[max(1, math.ceil(p / 100 * x.size)) - 1]:
                mismatches += 1

    # a full table against the oracle applied bin by bin
    dose = DoseEvent(10.0, Route.ORAL)
    bins = (0.5, 1.0, 2.0, 4.0, 8.0)
    obs = StudyRecord([IndividualRecord(dose, np.array(bins), rng.lognormal(size=5)) for _ in range(7)])
    sims = [[IndividualRecord(dose, np.array(bins), rng.lognormal(size=5)) for _ in range(7)] for _ in range(9)]
    table = vpc_percentiles(sims, obs, EvalProtocolConfig(time_bins=bins))
    for j, row in enumerate(table.rows):
        o = np.sort([d.obs[j] for d in obs.individuals])
        expected_obs = [o[max(1, math.ceil(p / 100 * o.size)) - 1] for p in (5, 50, 95)]
        pooled = np.sort([d.obs[j] for rep in sims for d in rep])
        expected_sim = [pooled[max(1, math.ceil(p / 100 * pooled.size)) - 1] for p in (5, 50, 95)]
        if row.obs != expected_obs or row.sim != expected_sim:
            mismatches += 1

    # monotonicity on a model-generated VPC
    s = generate_study(SimulationConfig(prior=PriorConfig(n_individuals=(8, 10))), study_rng(8, 0))
    model = AICMET(ModelConfig(H=16, Z_d=4, heads=2, layers=1, init_seed=2))
    vpc = study_vpc(model, s, EvalProtocolConfig(vpc_replicates=20), np.random.default_rng(0))
    rows = vpc.rows + table.rows
    monotone = bool(vpc.rows) and all(r.sim == sorted(r.sim) and r.obs == sorted(r.obs) for r in rows)
    ok = mismatches == 0 and monotone
    verdict(8, "VPC correctness", ok,
            f"oracle mismatches {mismatches}, monotone in all {len(rows)} bins: {monotone}")


# ---------------------------------------------------------------- 9. reproducibility

REPRO = {
    "simulation": {"n_individuals": [3, 5]},
    "model": {"H": 16, "Z_d": 4, "heads": 2, "layers": 1},
    "trainer": {"batch_size": 3, "iterations": 4, "learning_rate": 1e-3, "snapshot_every": 2},
    "eval": {"mc_samples": 8, "vpc_replicates": 3},
    "io": {"n_studies": 3},
}


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _pipeline(root, cfg_path):
    out = root / "run"
    assert cli.main(["simulate", "--config", cfg_path, "--seed", "21", "--out", str(out / "sim")]) == 0
    assert cli.main(["train", "--config", cfg_path, "--seed", "21", "--out", str(out / "train")]) == 0
    assert cli.main(["eval", "--config", cfg_path, "--seed", "21", "--snapshot", str(out / "train" / "snapshot.json"),
                     "--studies", str(out / "sim" / "studies.jsonl"), "--out", str(out / "eval")]) == 0
    return _tree_bytes(out)


def test_criterion_9_reproducibility(verdict, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(REPRO))
    first = _pipeline(tmp_path, str(cfg_path))
    shutil.rmtree(tmp_path / "run")
    second = _pipeline(tmp_path, str(cfg_path))
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    kinds = {k.rsplit(".", 1)[-1] for k in first}

    sim = SimulationConfig(prior=PriorConfig(n_individuals=(3, 5)))
    mcfg = ModelConfig(H=16, Z_d=4, heads=2, layers=1)
    full = train(TrainerConfig(iterations=4, batch_size=3, learning_rate=1e-3, snapshot_every=2, seed=21),
                 sim, mcfg, out_dir=tmp_path / "full")
    resumed = train(TrainerConfig(iterations=4, batch_size=3, learning_rate=1e-3, seed=21), sim, mcfg,
                    out_dir=tmp_path / "resumed", resume_from=tmp_path / "full" / "snapshot_0000002.json")
    resume_exact = all(np.array_equal(resumed.model.store[n].value, t.value) for n, t in full.model.store.items())
    resume_exact &= [r["loss_total"] for r in resumed.metrics] == [r["loss_total"] for r in full.metrics[2:]]

    ok = not differing and {"json", "jsonl", "csv"} <= kinds and resume_exact
    verdict(9, "reproducibility", ok,
            f"{len(first)} artifacts compared ({', '.join(sorted(kinds))}), differing {differing or 'none'}, "
            f"resume bit-exact: {resume_exact}")
