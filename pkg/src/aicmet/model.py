"""The amortized in-context mixed-effect transformer.

Encoder: per-transition embeddings -> GRU -> self-attention -> attention pooling
gives an individual summary ``c_i`` and ``q(z_i | D^i)``; a second pooling over
the summaries of a study gives ``q(z_s | S)``.

Decoder: query times are embedded linearly and cross-attend to a single
key/value token built from ``[z_n; z_s; dose]``; a feed-forward head emits the
mean and log-variance of log-concentration.

All inputs are normalised per study context by a :class:`StudyScaler` (time
divided by the latest context time, log-concentration shifted by its context
mean); outputs are mapped back before they leave the model.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .nn import AttentionPool, FeedForward, GRUCell, Linear, LossWeights, TransformerBlock, recurrent_forward
from .pk import DoseEvent, Route
from .simulate import IndividualRecord, StudyRecord

SNAPSHOT_FORMAT = 1
LOG_2PI = math.log(2.0 * math.pi)
LOSS_COMPONENTS = ("recon_new", "kl_s_ctx", "kl_s_prior", "kl_n_prior", "recon_forecast", "kl_i_refine")


@dataclass
class ModelConfig:
    H: int = 128
    Z_d: int = 32
    heads: int = 4
    layers: int = 2
    log_scale_targets: bool = True
    min_log_var: float = math.log(1e-4)
    init_seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.H < 3 or self.H % self.heads:
            raise ValueError(f"H={self.H} must be >= 3 and divisible by heads={self.heads}")
        if self.Z_d < 1 or self.layers < 1 or self.heads < 1:
            raise ValueError("Z_d, layers and heads must be positive")
        return self

    @property
    def embed_widths(self) -> tuple[int, int, int]:
        w = math.ceil(self.H / 3)
        return w, w, self.H - 2 * w


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian; ``mean`` and ``log_var`` share any leading batch axes."""

    mean: Tensor
    log_var: Tensor

    @classmethod
    def prior(cls, width: int, batch: tuple = ()) -> "GaussianPosterior":
        return cls(Tensor(np.zeros(batch + (width,))), Tensor(np.zeros(batch + (width,))))

    @property
    def width(self) -> int:
        return self.mean.shape[-1]

    def row(self, i) -> "GaussianPosterior":
        return GaussianPosterior(self.mean[i], self.log_var[i])

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean.value, self.log_var.value


@dataclass
class LatentSample:
    z: Tensor
    source: str = "posterior"


@dataclass
class PredictiveGaussian:
    times: np.ndarray
    mean: np.ndarray
    log_var: np.ndarray
    scale: str = "log-concentration"


@dataclass(frozen=True)
class StudyScaler:
    time_scale: float = 1.0
    y_shift: float = 0.0

    @classmethod
    def from_records(cls, records: Sequence[IndividualRecord]) -> "StudyScaler":
        ts, ys = [], []
        for d in records:
            t, y = d.valid()
            ts.append(t)
            ys.append(y[y > 0])
        t = np.concatenate(ts) if ts else np.empty(0)
        y = np.concatenate(ys) if ys else np.empty(0)
        time_scale = float(t.max()) if t.size and t.max() > 0 else 1.0
        y_shift = float(np.log(y).mean()) if y.size else 0.0
        return cls(time_scale, y_shift)

    @classmethod
    def from_study(cls, s: StudyRecord) -> "StudyScaler":
        return cls.from_records(s.individuals)


def sample_latent(p: GaussianPosterior | None, rng: np.random.Generator | None = None,
                  eps: np.ndarray | None = None, width: int | None = None) -> LatentSample:
    """Reparameterised draw ``mean + exp(log_var / 2) * eps``; ``None`` means the prior."""
    if p is None:
        if width is None:
            raise ValueError("prior draws need a width")
        e = rng.standard_normal(width) if eps is None else eps
        return LatentSample(Tensor(e), "prior")
    if eps is None:
        eps = rng.standard_normal(p.mean.shape)
    return LatentSample(p.mean + ad.exp(p.log_var * 0.5) * eps, "posterior")


def dose_features(dose: DoseEvent, y_shift: float = 0.0) -> np.ndarray:
    oral = dose.route is Route.ORAL
    return np.array([math.log(dose.amount) - y_shift, float(oral), float(not oral)])


@dataclass
class _Encoded:
    posterior: GaussianPosterior  # (N, Z_d)
    summary: Tensor               # (N, H)


class AICMET:
    """Encoder/decoder network; all weights live in ``self.store``."""

    def __init__(self, cfg: ModelConfig | None = None, rng: np.random.Generator | None = None):
        self.cfg = (cfg or ModelConfig()).validate()
        rng = rng or np.random.default_rng(self.cfg.init_seed)
        H, Z = self.cfg.H, self.cfg.Z_d
        st = self.store = ParameterStore()
        w_y, w_t, w_dt = self.cfg.embed_widths
        self.phi_y = Linear(st, "enc.phi_y", 1, w_y, rng)
        self.phi_tau = Linear(st, "enc.phi_tau", 1, w_t, rng)
        self.phi_dtau = Linear(st, "enc.phi_dtau", 1, w_dt, rng)
        self.null_embedding = st.add("enc.null_embedding", rng.normal(0.0, 1.0, size=H))
        self.rnn = GRUCell(st, "enc.rnn", H, H, rng)
        self.enc_blocks = [TransformerBlock(st, f"enc.block{l}", H, self.cfg.heads, rng)
                           for l in range(self.cfg.layers)]
        self.pool_individual = AttentionPool(st, "enc.pool_individual", H, self.cfg.heads, rng)
        self.head_i_mu = FeedForward(st, "enc.head_i_mu", H, H, Z, rng)
        self.head_i_lv = FeedForward(st, "enc.head_i_lv", H, H, Z, rng)
        self.pool_study = AttentionPool(st, "enc.pool_study", H, self.cfg.heads, rng)
        self.head_s_mu = FeedForward(st, "enc.head_s_mu", H, H, Z, rng)
        self.head_s_lv = FeedForward(st, "enc.head_s_lv", H, H, Z, rng)
        self.phi_dec = Linear(st, "dec.phi_tau", 1, H, rng)
        self.phi_dose = Linear(st, "dec.phi_dose", 3, H, rng)
        self.phi_key = FeedForward(st, "dec.phi_key", 2 * Z + H, H, H, rng)
        self.phi_value = FeedForward(st, "dec.phi_value", 2 * Z + H, H, H, rng)
        self.dec_blocks = [TransformerBlock(st, f"dec.block{l}", H, self.cfg.heads, rng, cross=True)
                           for l in range(self.cfg.layers)]
        self.head_dec = FeedForward(st, "dec.head", H, H, 2, rng)
        self.loss_weights = LossWeights(st, "loss", LOSS_COMPONENTS)

    # ------------------------------------------------------------ features

    def _transition_features(self, records: Sequence[IndividualRecord], scalers: Sequence[StudyScaler]):
        n = len(records)
        rows = []
        for d, sc in zip(records, scalers):
            t, y = d.valid()
            if t.size >= 2:
                dt = np.diff(t)
                if np.any(dt <= 0):
                    raise ValueError("transition time gaps must be positive")
                yy = np.log(y[:-1]) - sc.y_shift if self.cfg.log_scale_targets else y[:-1] / math.exp(sc.y_shift)
                rows.append(np.stack([yy, t[:-1] / sc.time_scale, dt / sc.time_scale], axis=-1))
            else:
                rows.append(None)
        L = max([1] + [r.shape[0] for r in rows if r is not None])
        feats = np.zeros((n, L, 3))
        mask = np.zeros((n, L), dtype=bool)
        null = np.zeros((n, L), dtype=bool)
        for i, r in enumerate(rows):
            if r is None:
                null[i, 0] = mask[i, 0] = True
            else:
                feats[i, :r.shape[0]] = r
                mask[i, :r.shape[0]] = True
        return feats, mask, null

    def _embed(self, feats: np.ndarray, null: np.ndarray) -> Tensor:
        e = ad.concat([self.phi_y(feats[..., 0:1]), self.phi_tau(feats[..., 1:2]),
                       self.phi_dtau(feats[..., 2:3])], axis=-1)
        if null.any():
            e = ad.where(null[..., None], self.null_embedding, e)
        return e

    # ------------------------------------------------------------ encoder

    def encode_records(self, records: Sequence[IndividualRecord], scalers: Sequence[StudyScaler]) -> _Encoded:
        """Batched individual encoder: posteriors ``(N, Z_d)`` and summaries ``(N, H)``."""
        if not records:
            raise ValueError("nothing to encode")
        feats, mask, null = self._transition_features(records, scalers)
        h = recurrent_forward(self.rnn, self._embed(feats, null))
        for block in self.enc_blocks:
            h = block(h, mask=mask)
        c = self.pool_individual(h, mask)
        post = GaussianPosterior(self.head_i_mu(c), self.head_i_lv(c))
        return _Encoded(post, c)

    def pool(self, summaries: Tensor, groups: Sequence[Sequence[int]]) -> GaussianPosterior:
        """Study posteriors for groups of rows of ``summaries``; returns ``(B, Z_d)``."""
        if any(len(g) == 0 for g in groups):
            raise ValueError("cannot pool an empty study")
        n, H = summaries.shape
        width = max(len(g) for g in groups)
        idx = np.full((len(groups), width), n, dtype=int)
        mask = np.zeros((len(groups), width), dtype=bool)
        for b, g in enumerate(groups):
            idx[b, :len(g)] = g
            mask[b, :len(g)] = True
        padded = ad.concat([summaries, Tensor(np.zeros((1, H)))], axis=0)[idx]
        cs = self.pool_study(padded, mask)
        return GaussianPosterior(self.head_s_mu(cs), self.head_s_lv(cs))

    def embed_transitions(self, d: IndividualRecord, scaler: StudyScaler | None = None) -> Tensor:
        scaler = scaler or StudyScaler.from_records([d])
        if d.n_valid >= 2 and np.any(np.diff(d.valid()[0]) <= 0):
            raise ValueError("transition time gaps must be positive")
        feats, mask, null = self._transition_features([d], [scaler])
        return self._embed(feats, null)[0]

    def encode_individual(self, d: IndividualRecord, scaler: StudyScaler | None = None) -> GaussianPosterior:
        scaler = scaler or StudyScaler.from_records([d])
        return self.encode_records([d], [scaler]).posterior.row(0)

    def encode_study(self, s: StudyRecord, scaler: StudyScaler | None = None) -> GaussianPosterior:
        if len(s.individuals) == 0:
            raise ValueError("cannot encode an empty study")
        scaler = scaler or StudyScaler.from_study(s)
        enc = self.encode_records(s.individuals, [scaler] * len(s))
        return self.pool(enc.summary, [list(range(len(s)))]).row(0)

    # ------------------------------------------------------------ decoder

    def decode_batch(self, times: Sequence[np.ndarray], z_n, z_s, doses: Sequence[DoseEvent],
                     scalers: Sequence[StudyScaler]) -> tuple[Tensor, Tensor, np.ndarray]:
        """Decode padded query times for ``N`` rows of latents.

        Returns mean and log-variance of log-concentration, both ``(N, T)``, and
        the validity mask of the padded time axis.
        """
        n = len(times)
        T = max(1, max(len(t) for t in times))
        tq = np.zeros((n, T, 1))
        mask = np.zeros((n, T), dtype=bool)
        for i, (t, sc) in enumerate(zip(times, scalers)):
            tq[i, :len(t), 0] = np.asarray(t, dtype=float) / sc.time_scale
            mask[i, :len(t)] = True
        u = np.stack([dose_features(d, sc.y_shift) for d, sc in zip(doses, scalers)])
        ctx = ad.concat([ad.as_tensor(z_n), ad.as_tensor(z_s), self.phi_dose(u)], axis=-1)
        ctx = ad.reshape(ctx, (n, 1, ctx.shape[-1]))
        keys, values = self.phi_key(ctx), self.phi_value(ctx)
        h = self.phi_dec(tq)
        for block in self.dec_blocks:
            h = block(h, keys, values)
        out = self.head_dec(h)
        shift = np.array([sc.y_shift for sc in scalers])[:, None]
        mu = out[..., 0] + shift if self.cfg.log_scale_targets else out[..., 0]
        lo = self.cfg.min_log_var
        log_var = ad.softplus(out[..., 1] - lo) + lo
        return mu, log_var, mask

    def decode_at_times(self, times, z_n, z_s, dose: DoseEvent,
                        scaler: StudyScaler | None = None) -> PredictiveGaussian:
        times = np.asarray(times, dtype=float).reshape(-1)
        if not np.all(np.isfinite(times)) or np.any(times < 0):
            raise ValueError("query times must be finite and non-negative")
        scaler = scaler or StudyScaler()
        zn = z_n.z if isinstance(z_n, LatentSample) else ad.as_tensor(z_n)
        zs = z_s.z if isinstance(z_s, LatentSample) else ad.as_tensor(z_s)
        mu, lv, _ = self.decode_batch([times], ad.reshape(zn, (1, -1)), ad.reshape(zs, (1, -1)),
                                      [dose], [scaler])
        scale = "log-concentration" if self.cfg.log_scale_targets else "concentration"
        return PredictiveGaussian(times, mu.value[0, :times.size].copy(),
                                  lv.value[0, :times.size].copy(), scale)

    # ------------------------------------------------------------ persistence

    def save(self, path, extra: dict | None = None, optimizer: dict | None = None) -> Path:
        save_snapshot(path, self.store, asdict(self.cfg), extra, optimizer)
        return Path(path)

    @classmethod
    def load(cls, path) -> tuple["AICMET", dict]:
        """Rebuild a model from a snapshot; returns it with the raw snapshot document."""
        snap = load_snapshot(path)
        model = cls(ModelConfig(**snap["config"]))
        model.store.load_state_dict(snap["tensors"])
        return model, snap


def _tensor_doc(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "values": [float(v) for v in arr.reshape(-1)]}


def _tensors_from_doc(doc: dict) -> dict[str, np.ndarray]:
    return {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in doc.items()}


def save_snapshot(path, store: ParameterStore | dict, config: dict, extra: dict | None = None,
                  optimizer: dict | None = None) -> None:
    """Write named float64 tensors plus the config echo as deterministic JSON.

    ``optimizer`` is ``{"step": int, "m": {name: array}, "v": {name: array}}``.
    """
    tensors = store.state_dict() if isinstance(store, ParameterStore) else store
    doc = {
        "format_version": SNAPSHOT_FORMAT,
        "config": config,
        "tensors": {k: _tensor_doc(np.asarray(v)) for k, v in tensors.items()},
    }
    if extra:
        doc["extra"] = extra
    if optimizer is not None:
        doc["optimizer"] = {
            "step": int(optimizer["step"]),
            "m": {k: _tensor_doc(v) for k, v in optimizer["m"].items()},
            "v": {k: _tensor_doc(v) for k, v in optimizer["v"].items()},
        }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")), encoding="utf-8")


def load_snapshot(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format_version") != SNAPSHOT_FORMAT:
        raise ValueError(f"unsupported snapshot format {doc.get('format_version')!r}")
    doc["tensors"] = _tensors_from_doc(doc["tensors"])
    if "optimizer" in doc:
        opt = doc["optimizer"]
        opt["m"] = _tensors_from_doc(opt["m"])
        opt["v"] = _tensors_from_doc(opt["v"])
    return doc
