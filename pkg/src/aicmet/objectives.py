"""Variational objectives: the new-individual bound and the forecast bound.

Both are returned as *negative* ELBO components (to be minimised). The
reconstruction terms are offset by their infimum, ``0.5 * (log 2 pi + min_log_var)``
per observation, so every component handed to the loss combiner is >= 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import AICMET, LOG_2PI, LOSS_COMPONENTS, GaussianPosterior, StudyScaler
from .simulate import ForecastSplit, HoldoutSplit, IndividualRecord, StudyRecord

COMPONENTS = LOSS_COMPONENTS


def kl_diag_gaussian(q1: GaussianPosterior, q2: GaussianPosterior | None = None) -> Tensor:
    """``KL[q1 || q2]`` summed over the last axis; ``q2=None`` is the standard normal."""
    m1, lv1 = q1.mean, q1.log_var
    if q2 is None:
        term = ad.exp(lv1) + ad.square(m1) - 1.0 - lv1
    else:
        if q1.width != q2.width:
            raise ValueError("KL between Gaussians of different widths")
        m2, lv2 = q2.mean, q2.log_var
        term = ad.exp(lv1 - lv2) + ad.square(m2 - m1) * ad.exp(-lv2) - 1.0 + lv2 - lv1
    return ad.tsum(term, axis=-1) * 0.5


def kl_diag_gaussian_np(mean1, log_var1, mean2=0.0, log_var2=0.0) -> np.ndarray:
    mean1, log_var1, mean2, log_var2 = map(np.asarray, (mean1, log_var1, mean2, log_var2))
    return 0.5 * np.sum(np.exp(log_var1 - log_var2) + (mean2 - mean1) ** 2 * np.exp(-log_var2)
                        - 1.0 + log_var2 - log_var1, axis=-1)


def gaussian_nll(y: np.ndarray, mean: Tensor, log_var: Tensor, mask: np.ndarray, offset: float = 0.0) -> Tensor:
    """Masked Gaussian negative log-likelihood summed over the last axis.

    ``offset`` is subtracted per valid entry.
    """
    r = ad.square(mean - y)
    nll = (r * ad.exp(-log_var) + log_var + LOG_2PI) * 0.5 - offset
    return ad.tsum(ad.where(mask, nll, 0.0), axis=-1)


@dataclass
class ElboBreakdown:
    reconstruction: Tensor
    kl_terms: dict[str, Tensor] = field(default_factory=dict)

    @property
    def negative_elbo(self) -> Tensor:
        total = self.reconstruction
        for v in self.kl_terms.values():
            total = total + v
        return total

    def scalars(self) -> dict[str, float]:
        out = {"reconstruction": float(self.reconstruction.value)}
        out.update({k: float(v.value) for k, v in self.kl_terms.items()})
        return out


def _padded_targets(records: Sequence[IndividualRecord], log_scale: bool, scalers=None):
    times, ys = [], []
    for i, d in enumerate(records):
        t, y = d.valid()
        times.append(t)
        if log_scale:
            ys.append(np.log(y))
        else:
            ys.append(y / np.exp(scalers[i].y_shift))
    T = max(1, max(len(t) for t in times))
    Y = np.zeros((len(records), T))
    for i, y in enumerate(ys):
        Y[i, :len(y)] = y
    return times, Y


def _offset(model: AICMET) -> float:
    return 0.5 * (LOG_2PI + model.cfg.min_log_var)


def _draw(shape, rng, noise, key):
    if noise is not None and key in noise:
        eps = np.asarray(noise[key])
        if eps.shape != shape:
            raise ValueError(f"frozen noise {key!r} has shape {eps.shape}, expected {shape}")
        return eps
    eps = rng.standard_normal(shape)
    if noise is not None:
        noise[key] = eps
    return eps


def _mc_recon(model, records, scalers, post_n: GaussianPosterior, post_s: GaussianPosterior,
              eps_n: np.ndarray, eps_s: np.ndarray) -> Tensor:
    """Mean over Monte Carlo draws of per-row reconstruction loss, shape ``(N,)``.

    ``eps_n`` and ``eps_s`` are standard-normal draws of shape ``(mc, N, Z_d)``.
    """
    mc, n, Z = eps_n.shape
    times, Y = _padded_targets(records, model.cfg.log_scale_targets, scalers)
    z_n = post_n.mean + ad.exp(post_n.log_var * 0.5) * eps_n
    z_s = post_s.mean + ad.exp(post_s.log_var * 0.5) * eps_s
    z_n = ad.reshape(z_n, (mc * n, Z))
    z_s = ad.reshape(z_s, (mc * n, Z))
    doses = [d.dose for d in records] * mc
    mu, lv, mask = model.decode_batch(times * mc, z_n, z_s, doses, list(scalers) * mc)
    Yr = np.tile(Y, (mc, 1))
    nll = gaussian_nll(Yr[:, :mu.shape[1]], mu, lv, mask, _offset(model))
    return ad.mean(ad.reshape(nll, (mc, n)), axis=0)


def batch_elbo_new(model: AICMET, splits: Sequence[HoldoutSplit], mc_samples: int = 1,
                   rng: np.random.Generator | None = None, noise: dict | None = None,
                   kl_weight: float = 1.0) -> ElboBreakdown:
    """New-individual bound averaged over a batch of holdout splits."""
    rng = rng or np.random.default_rng()
    records, scalers, ctx_groups, full_groups, new_rows = [], [], [], [], []
    for sp in splits:
        sc = StudyScaler.from_study(sp.context)
        start = len(records)
        records.extend(sp.context.individuals)
        records.append(sp.held_out)
        scalers.extend([sc] * (len(sp.context) + 1))
        ctx_rows = list(range(start, start + len(sp.context)))
        new = start + len(sp.context)
        ctx_groups.append(ctx_rows)
        full_groups.append(ctx_rows + [new])
        new_rows.append(new)
    enc = model.encode_records(records, scalers)
    both = model.pool(enc.summary, ctx_groups + full_groups)
    B = len(splits)
    q_s_ctx = GaussianPosterior(both.mean[:B], both.log_var[:B])
    q_s_full = GaussianPosterior(both.mean[B:], both.log_var[B:])
    rows = np.array(new_rows)
    q_n = GaussianPosterior(enc.posterior.mean[rows], enc.posterior.log_var[rows])
    new_records = [sp.held_out for sp in splits]
    new_scalers = [scalers[r] for r in new_rows]
    shape = (mc_samples, B, model.cfg.Z_d)
    recon = _mc_recon(model, new_records, new_scalers, q_n, q_s_full,
                      _draw(shape, rng, noise, "new.z_n"), _draw(shape, rng, noise, "new.z_s"))
    w = float(kl_weight)
    kls = {
        "kl_s_ctx": ad.mean(kl_diag_gaussian(q_s_full, q_s_ctx)) * w,
        "kl_s_prior": ad.mean(kl_diag_gaussian(q_s_full)) * w,
        "kl_n_prior": ad.mean(kl_diag_gaussian(q_n)) * w,
    }
    return ElboBreakdown(ad.mean(recon), kls)


def batch_elbo_forecast(model: AICMET, splits: Sequence[ForecastSplit], mc_samples: int = 1,
                        rng: np.random.Generator | None = None, noise: dict | None = None,
                        kl_weight: float = 1.0) -> ElboBreakdown:
    """Forecast bound averaged over a batch of context/target splits."""
    rng = rng or np.random.default_rng()
    records, scalers, groups = [], [], []
    full_rows, ctx_rows, targets, tgt_scalers, study_of = [], [], [], [], []
    for b, sp in enumerate(splits):
        sc = StudyScaler.from_study(sp.full)
        start = len(records)
        records.extend(sp.full.individuals)
        scalers.extend([sc] * len(sp.full))
        groups.append(list(range(start, start + len(sp.full))))
        full_rows.extend(start + i for i in sp.indices)
        study_of.extend([b] * len(sp.indices))
        targets.extend(sp.target)
        tgt_scalers.extend([sc] * len(sp.indices))
    for sp in splits:
        sc = StudyScaler.from_study(sp.full)
        ctx_rows.extend(range(len(records), len(records) + len(sp.context)))
        records.extend(sp.context)
        scalers.extend([sc] * len(sp.context))
    enc = model.encode_records(records, scalers)
    q_s = model.pool(enc.summary, groups)
    fr, cr, so = np.array(full_rows), np.array(ctx_rows), np.array(study_of)
    q_full = GaussianPosterior(enc.posterior.mean[fr], enc.posterior.log_var[fr])
    q_ctx = GaussianPosterior(enc.posterior.mean[cr], enc.posterior.log_var[cr])
    q_s_rows = GaussianPosterior(q_s.mean[so], q_s.log_var[so])
    # one z_s draw per study, shared by its individuals
    B, Z = len(splits), model.cfg.Z_d
    eps_s = _draw((mc_samples, B, Z), rng, noise, "forecast.z_s")[:, so]
    eps_i = _draw((mc_samples, len(so), Z), rng, noise, "forecast.z_i")
    recon_rows = _mc_recon(model, targets, tgt_scalers, q_full, q_s_rows, eps_i, eps_s)
    kl_rows = kl_diag_gaussian(q_full, q_ctx)
    onehot = np.zeros((B, len(so)))
    onehot[so, np.arange(len(so))] = 1.0
    recon = ad.mean(ad.matmul(Tensor(onehot), ad.reshape(recon_rows, (-1, 1))))
    kl = ad.mean(ad.matmul(Tensor(onehot), ad.reshape(kl_rows, (-1, 1)))) * float(kl_weight)
    return ElboBreakdown(recon, {"kl_i_refine": kl})


def elbo_new(model: AICMET, s_context: StudyRecord, d_new: IndividualRecord, mc_samples: int = 1,
             rng: np.random.Generator | None = None, noise: dict | None = None,
             kl_weight: float = 1.0) -> ElboBreakdown:
    return batch_elbo_new(model, [HoldoutSplit(s_context, d_new, len(s_context))], mc_samples, rng,
                          noise, kl_weight)


def elbo_forecast(model: AICMET, split: ForecastSplit, mc_samples: int = 1,
                  rng: np.random.Generator | None = None, noise: dict | None = None,
                  kl_weight: float = 1.0) -> ElboBreakdown:
    return batch_elbo_forecast(model, [split], mc_samples, rng, noise, kl_weight)


def loss_components(new: ElboBreakdown, forecast: ElboBreakdown) -> dict[str, Tensor]:
    return {
        "recon_new": new.reconstruction,
        "kl_s_ctx": new.kl_terms["kl_s_ctx"],
        "kl_s_prior": new.kl_terms["kl_s_prior"],
        "kl_n_prior": new.kl_terms["kl_n_prior"],
        "recon_forecast": forecast.reconstruction,
        "kl_i_refine": forecast.kl_terms["kl_i_refine"],
    }
