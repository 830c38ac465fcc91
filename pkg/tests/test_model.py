import numpy as np
import pytest

from aicmet import autodiff as ad
from aicmet.autodiff import Tape
from aicmet.model import (AICMET, GaussianPosterior, ModelConfig, StudyScaler, load_snapshot, sample_latent)
from aicmet.objectives import batch_elbo_new
from aicmet.pk import DoseEvent, Route
from aicmet.simulate import IndividualRecord, StudyRecord, partition_study


def _record(n=5, seed=0, route=Route.ORAL):
    rng = np.random.default_rng(seed)
    t = np.cumsum(rng.uniform(0.2, 2.0, n))
    y = np.exp(rng.normal(0.0, 1.0, n))
    return IndividualRecord(DoseEvent(100.0, route), t, y)


def _close(p, q, tol):
    np.testing.assert_allclose(p.mean.value, q.mean.value, rtol=0, atol=tol)
    np.testing.assert_allclose(p.log_var.value, q.log_var.value, rtol=0, atol=tol)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(H=10, heads=4).validate()
    with pytest.raises(ValueError):
        ModelConfig(H=16, Z_d=0, heads=2).validate()
    assert ModelConfig(H=16, heads=2).embed_widths == (6, 6, 4)


def test_five_observations_give_four_transitions(tiny_model):
    e = tiny_model.embed_transitions(_record(5))
    assert e.shape == (4, tiny_model.cfg.H)


def test_identical_records_embed_identically(tiny_model):
    a, b = _record(6, seed=1), _record(6, seed=1)
    assert np.array_equal(tiny_model.embed_transitions(a).value, tiny_model.embed_transitions(b).value)


def test_masked_trailing_observation_excluded(tiny_model):
    d = _record(5)
    mask = np.array([True] * 4 + [False])
    masked = IndividualRecord(d.dose, d.times, d.obs, mask)
    assert tiny_model.embed_transitions(masked).shape == (3, tiny_model.cfg.H)
    sc = StudyScaler.from_records([d.first(4)])
    _close(tiny_model.encode_individual(masked, sc), tiny_model.encode_individual(d.first(4), sc), 1e-12)


def test_posterior_shapes(tiny_model):
    p = tiny_model.encode_individual(_record(4))
    assert p.mean.shape == p.log_var.shape == (tiny_model.cfg.Z_d,)


def test_padding_with_masked_entries_leaves_posterior_unchanged(tiny_model):
    d = _record(4, seed=2)
    sc = StudyScaler.from_records([d])
    t = np.concatenate([d.times, d.times[-1] + np.array([1.0, 2.5, 4.0])])
    y = np.concatenate([d.obs, [7.0, 1e6, 0.0]])
    padded = IndividualRecord(d.dose, t, y, np.array([True] * 4 + [False] * 3))
    _close(tiny_model.encode_individual(d, sc), tiny_model.encode_individual(padded, sc), 1e-10)


def test_batched_encoding_matches_single(tiny_model, studies):
    s = studies[0]
    sc = StudyScaler.from_study(s)
    enc = tiny_model.encode_records(s.individuals, [sc] * len(s))
    for i, d in enumerate(s.individuals):
        _close(enc.posterior.row(i), tiny_model.encode_individual(d, sc), 1e-10)


def test_transition_order_matters(tiny_model):
    d = _record(6, seed=3)
    sc = StudyScaler.from_records([d])
    swapped = d.obs.copy()
    swapped[[1, 3]] = swapped[[3, 1]]
    other = IndividualRecord(d.dose, d.times, swapped)
    a, b = tiny_model.encode_individual(d, sc), tiny_model.encode_individual(other, sc)
    assert not np.allclose(a.mean.value, b.mean.value, atol=1e-8)


def test_non_positive_gap_rejected(tiny_model):
    with pytest.raises(ValueError):
        IndividualRecord(DoseEvent(1.0, Route.IV), [0.0, 1.0, 1.0], [1.0, 1.0, 1.0])


def test_study_pooling_is_permutation_invariant(tiny_model, studies):
    s = studies[1]
    rng = np.random.default_rng(0)
    base = tiny_model.encode_study(s)
    for _ in range(3):
        perm = rng.permutation(len(s))
        shuffled = StudyRecord([s.individuals[i] for i in perm], s.study_id)
        _close(base, tiny_model.encode_study(shuffled), 1e-12)


def test_singleton_study_pools_its_own_summary(tiny_model):
    d = _record(5, seed=4)
    sc = StudyScaler.from_records([d])
    enc = tiny_model.encode_records([d], [sc])
    p = tiny_model.encode_study(StudyRecord([d]), sc)
    # a singleton softmax passes the projected summary straight through
    attn = tiny_model.pool_study.attn
    cs = attn.o_proj(attn.v_proj(enc.summary))
    np.testing.assert_allclose(p.mean.value, tiny_model.head_s_mu(cs).value[0], atol=1e-12)
    np.testing.assert_allclose(p.log_var.value, tiny_model.head_s_lv(cs).value[0], atol=1e-12)


def test_adding_an_individual_moves_the_study_posterior(tiny_model, studies):
    s = studies[0]
    sc = StudyScaler.from_study(s)
    a = tiny_model.encode_study(s.without(0), sc)
    b = tiny_model.encode_study(s, sc)
    assert not np.allclose(a.mean.value, b.mean.value, atol=1e-8)


def test_masked_individuals_in_pool_are_neutral(tiny_model, studies):
    s = studies[2]
    sc = StudyScaler.from_study(s)
    extra = [_record(4, seed=9), _record(7, seed=10)]
    enc = tiny_model.encode_records(list(s.individuals) + extra, [sc] * (len(s) + 2))
    pooled = tiny_model.pool(enc.summary, [list(range(len(s)))]).row(0)
    _close(pooled, tiny_model.encode_study(s, sc), 1e-10)


def test_empty_study_rejected(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.pool(ad.Tensor(np.zeros((2, tiny_model.cfg.H))), [[]])


def test_zero_and_one_observation_contexts_use_null_embedding(tiny_model):
    d = _record(3)
    e0 = tiny_model.embed_transitions(d.first(0)).value
    e1 = tiny_model.embed_transitions(d.first(1)).value
    np.testing.assert_array_equal(e0[0], tiny_model.null_embedding.value)
    np.testing.assert_array_equal(e1[0], tiny_model.null_embedding.value)
    p = tiny_model.encode_individual(d.first(0))
    assert np.all(np.isfinite(p.mean.value))


def _latents(model, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=model.cfg.Z_d), rng.normal(size=model.cfg.Z_d)


def test_repeated_query_times_decode_identically(tiny_model):
    zn, zs = _latents(tiny_model)
    out = tiny_model.decode_at_times([1.0, 2.0, 1.0], zn, zs, DoseEvent(50.0, Route.ORAL))
    assert out.mean[0] == out.mean[2] and out.log_var[0] == out.log_var[2]


def test_split_query_sets_give_identical_results(tiny_model):
    zn, zs = _latents(tiny_model, 1)
    dose = DoseEvent(50.0, Route.IV)
    t = np.array([0.0, 0.5, 1.5, 3.0, 8.0, 24.0])
    whole = tiny_model.decode_at_times(t, zn, zs, dose)
    a = tiny_model.decode_at_times(t[:2], zn, zs, dose)
    b = tiny_model.decode_at_times(t[2:], zn, zs, dose)
    assert np.array_equal(np.concatenate([a.mean, b.mean]), whole.mean)
    assert np.array_equal(np.concatenate([a.log_var, b.log_var]), whole.log_var)


def test_individual_latent_is_live(tiny_model):
    zn, zs = _latents(tiny_model, 2)
    dose = DoseEvent(50.0, Route.ORAL)
    a = tiny_model.decode_at_times([1.0, 4.0], zn, zs, dose)
    b = tiny_model.decode_at_times([1.0, 4.0], zn + 1.0, zs, dose)
    assert not np.allclose(a.mean, b.mean)


def test_predictive_contract(tiny_model):
    zn, zs = _latents(tiny_model, 3)
    out = tiny_model.decode_at_times([0.5, 1.0], zn, zs, DoseEvent(10.0, Route.IV))
    assert out.mean.shape == out.log_var.shape == out.times.shape == (2,)
    assert out.scale == "log-concentration"
    assert np.all(out.log_var >= tiny_model.cfg.min_log_var)
    with pytest.raises(ValueError):
        tiny_model.decode_at_times([-1.0], zn, zs, DoseEvent(10.0, Route.IV))


def test_sample_latent_vanishing_variance():
    p = GaussianPosterior(ad.Tensor([0.3, -1.2]), ad.Tensor([-50.0, -50.0]))
    z = sample_latent(p, np.random.default_rng(0)).z.value
    np.testing.assert_allclose(z, [0.3, -1.2], atol=1e-10)


def test_prior_draws_are_standard_normal():
    rng = np.random.default_rng(11)
    draws = np.stack([sample_latent(None, rng, width=3).z.value for _ in range(10_000)])
    assert np.all(np.abs(draws.mean(axis=0)) < 3 / np.sqrt(10_000))
    assert np.all(np.abs(draws.var(axis=0) - 1.0) < 0.05)
    assert sample_latent(None, rng, width=3).source == "prior"


def test_sample_gradient_flows_to_mean_and_log_var():
    m = ad.Tensor([0.2, -0.4], requires_grad=True, name="m")
    lv = ad.Tensor([0.1, -0.3], requires_grad=True, name="lv")
    eps = np.array([0.7, -1.1])
    rep = ad.grad_check(lambda: ad.tsum(ad.square(sample_latent(GaussianPosterior(m, lv), eps=eps).z)),
                        {"m": m, "lv": lv}, tolerance=1e-7)
    assert rep.passed, rep.summary()
    assert np.all(m.grad != 0) and np.all(lv.grad != 0)


def test_snapshot_round_trip(tiny_model, tmp_path):
    path = tiny_model.save(tmp_path / "snap.json", extra={"note": 1})
    model, doc = AICMET.load(path)
    assert model.cfg == tiny_model.cfg
    for name, t in tiny_model.store.items():
        assert np.array_equal(model.store[name].value, t.value)
    assert load_snapshot(path)["extra"]["note"] == 1


def _single_token_dead(model):
    # with a single latent key/value token the decoder's attention weight is
    # identically 1, so its query and key paths cannot affect the loss
    names = [n for n in model.store.names() if n.startswith("dec.phi_key.")]
    for l in range(model.cfg.layers):
        pre = f"dec.block{l}."
        names += [n for n in model.store.names()
                  if n.startswith((pre + "norm_q.", pre + "attn.q.", pre + "attn.k."))]
    return sorted(names)


def test_dead_parameter_screen(tiny_model, studies):
    rng = np.random.default_rng(0)
    splits = [partition_study(s, "holdout_individual", rng) for s in studies]
    # a one-observation context individual exercises the null embedding
    ctx = splits[0].context
    splits[0].context = StudyRecord(list(ctx.individuals) + [ctx.individuals[0].first(1)], ctx.study_id)
    tiny_model.store.zero_grad()
    with Tape() as tape:
        b = batch_elbo_new(tiny_model, splits, 2, rng)
        tape.backward(b.negative_elbo)
    dead = sorted(name for name, t in tiny_model.store.items()
                  if not name.startswith("loss.") and not np.any(t.grad != 0))
    assert dead == _single_token_dead(tiny_model)
