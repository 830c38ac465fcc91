"""Network building blocks on top of :mod:`aicmet.autodiff`.

Every block registers its weights in a shared :class:`ParameterStore` under a
dotted prefix, so a whole model is one flat dictionary of named tensors.
Linear weights are stored input-major, ``(n_in, n_out)``, so ``x @ W + b``
applies them to row vectors.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor


def _init(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out))


class Linear:
    def __init__(self, store: ParameterStore, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator, bias: bool = True):
        self.n_in, self.n_out = n_in, n_out
        self.weight = store.add(f"{name}.weight", _init(rng, n_in, n_out))
        self.bias = store.add(f"{name}.bias", np.zeros(n_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class FeedForward:
    """Two linear layers with a SiLU in between."""

    def __init__(self, store, name, n_in, n_hidden, n_out, rng):
        self.fc1 = Linear(store, f"{name}.fc1", n_in, n_hidden, rng)
        self.fc2 = Linear(store, f"{name}.fc2", n_hidden, n_out, rng)

    def __call__(self, x) -> Tensor:
        return self.fc2(ad.silu(self.fc1(x)))


class LayerNorm:
    def __init__(self, store, name, width):
        self.gain = store.add(f"{name}.gain", np.ones(width))
        self.shift = store.add(f"{name}.shift", np.zeros(width))

    def __call__(self, x) -> Tensor:
        return ad.layer_norm(x) * self.gain + self.shift


class GRUCell:
    """Gated recurrent unit; gates are packed as (update, reset, candidate)."""

    def __init__(self, store, name, n_in, hidden, rng):
        self.hidden = hidden
        self.w_in = store.add(f"{name}.w_in", np.concatenate([_init(rng, n_in, hidden) for _ in range(3)], axis=1))
        self.w_zr = store.add(f"{name}.w_zr", np.concatenate([_init(rng, hidden, hidden) for _ in range(2)], axis=1))
        self.w_n = store.add(f"{name}.w_n", _init(rng, hidden, hidden))
        self.bias = store.add(f"{name}.bias", np.zeros(3 * hidden))

    def step(self, x_proj: Tensor, h: Tensor) -> Tensor:
        """One update given the pre-projected input ``x @ w_in + bias``."""
        H = self.hidden
        zr = ad.sigmoid(x_proj[..., :2 * H] + ad.matmul(h, self.w_zr))
        z, r = zr[..., :H], zr[..., H:]
        n = ad.tanh(x_proj[..., 2 * H:] + ad.matmul(r * h, self.w_n))
        return (1.0 - z) * n + z * h

    def __call__(self, h, x) -> Tensor:
        return self.step(ad.matmul(x, self.w_in) + self.bias, as_state(h))


def as_state(h) -> Tensor:
    return h if isinstance(h, Tensor) else Tensor(h)


def recurrent_forward(cell: GRUCell, inputs, mask=None) -> Tensor:
    """Run ``cell`` over the time axis of ``inputs`` (shape ``(..., L, n_in)``).

    Starts from ``h_0 = 0`` and returns all hidden states, shape ``(..., L, H)``.
    Where ``mask`` (shape ``(..., L)``) is False the previous state is carried.
    """
    inputs = ad.as_tensor(inputs)
    L = inputs.shape[-2]
    if L == 0:
        raise ValueError("recurrent_forward needs a non-empty sequence")
    if inputs.ndim == 2:
        # unbatched sequence: run as a batch of one
        m = None if mask is None else np.asarray(mask, dtype=bool)[None]
        out = recurrent_forward(cell, ad.reshape(inputs, (1,) + inputs.shape), m)
        return ad.reshape(out, out.shape[1:])
    proj = ad.matmul(inputs, cell.w_in) + cell.bias
    h = Tensor(np.zeros(inputs.shape[:-2] + (cell.hidden,)))
    states = []
    for j in range(L):
        h_new = cell.step(proj[..., j, :], h)
        if mask is not None:
            m = np.asarray(mask, dtype=bool)[..., j, None]
            h_new = ad.where(m, h_new, h)
        h = h_new
        states.append(ad.reshape(h, h.shape[:-1] + (1, cell.hidden)))
    return ad.concat(states, axis=-2)


def scaled_dot_product_attention(q, k, v, mask=None, return_weights: bool = False):
    """``softmax(q k^T / sqrt(d)) v`` over the key axis (second to last of ``k``).

    ``mask`` is boolean, broadcastable to ``(..., L_q, L_k)``; False keys get zero weight.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    if k.shape[-2] == 0:
        raise ValueError("attention needs at least one key")
    if k.shape[-2] != v.shape[-2]:
        raise ad.ShapeError("attention", "keys and values differ in length")
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    w = ad.softmax(scores, axis=-1, mask=mask)
    out = ad.matmul(w, v)
    return (out, w) if return_weights else out


class MultiHeadAttention:
    """Multi-head scaled dot-product attention with input and output projections."""

    def __init__(self, store, name, width, heads, rng, kv_width: int | None = None):
        if width % heads:
            raise ValueError(f"width {width} is not divisible by {heads} heads")
        kv_width = kv_width or width
        self.width, self.heads, self.d_k = width, heads, width // heads
        self.q_proj = Linear(store, f"{name}.q", width, width, rng)
        self.k_proj = Linear(store, f"{name}.k", kv_width, width, rng)
        self.v_proj = Linear(store, f"{name}.v", kv_width, width, rng)
        self.o_proj = Linear(store, f"{name}.o", width, width, rng)

    def _split(self, x: Tensor) -> Tensor:
        x = ad.reshape(x, x.shape[:-1] + (self.heads, self.d_k))
        return ad.swapaxes(x, -3, -2)

    def _merge(self, x: Tensor) -> Tensor:
        x = ad.swapaxes(x, -3, -2)
        return ad.reshape(x, x.shape[:-2] + (self.width,))

    def __call__(self, q, k, v, mask=None, return_weights: bool = False):
        if ad.as_tensor(k).shape[-2] == 0:
            raise ValueError("attention needs at least one key")
        Q = self._split(self.q_proj(q))
        K = self._split(self.k_proj(k))
        V = self._split(self.v_proj(v))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)[..., None, None, :]
        heads, w = scaled_dot_product_attention(Q, K, V, mask, return_weights=True)
        out = self.o_proj(self._merge(heads))
        return (out, w) if return_weights else out


class AttentionPool:
    """A single learned query attending over a (masked) set."""

    def __init__(self, store, name, width, heads, rng):
        self.query = store.add(f"{name}.query", rng.normal(0.0, 1.0, size=(1, width)))
        self.attn = MultiHeadAttention(store, f"{name}.attn", width, heads, rng)

    def __call__(self, x, mask=None, return_weights: bool = False):
        x = ad.as_tensor(x)
        q = ad.broadcast_to(self.query, x.shape[:-2] + (1, self.query.shape[-1]))
        out, w = self.attn(q, x, x, mask, return_weights=True)
        out = ad.reshape(out, out.shape[:-2] + (out.shape[-1],))
        return (out, w) if return_weights else out


class TransformerBlock:
    """Pre-norm block: attention with residual, then feed-forward with residual."""

    def __init__(self, store, name, width, heads, rng, ff_hidden: int | None = None,
                 cross: bool = False):
        self.cross = cross
        self.norm_q = LayerNorm(store, f"{name}.norm_q", width)
        self.norm_kv = LayerNorm(store, f"{name}.norm_kv", width) if cross else self.norm_q
        self.attn = MultiHeadAttention(store, f"{name}.attn", width, heads, rng)
        self.norm_ff = LayerNorm(store, f"{name}.norm_ff", width)
        self.ff = FeedForward(store, f"{name}.ff", width, ff_hidden or 2 * width, width, rng)

    def __call__(self, q, k=None, v=None, mask=None) -> Tensor:
        q = ad.as_tensor(q)
        if mask is not None and not np.asarray(mask, dtype=bool).any(axis=-1).all():
            raise ValueError("transformer block: every key set needs an unmasked entry")
        qn = self.norm_q(q)
        kn = qn if k is None else self.norm_kv(k)
        vn = kn if v is None or v is k else self.norm_kv(v)
        x = q + self.attn(qn, kn, vn, mask)
        return x + self.ff(self.norm_ff(x))


def transformer_forward(block: TransformerBlock, Q, K=None, V=None, mask=None) -> Tensor:
    """Apply a block; ``K`` and ``V`` default to ``Q`` (self-attention)."""
    return block(Q, K, V, mask)


class LossWeights:
    """Trainable log-scale nuisance values, one per loss component."""

    def __init__(self, store, name: str, components: Sequence[str]):
        self.components = list(components)
        self.u = store.add(f"{name}.u", np.zeros(len(self.components)))


def weighted_total_loss(components, weights: LossWeights) -> Tensor:
    """``sum_l exp(-U_l) * L_l + U_l``; the optimum over ``U_l`` is ``log L_l``."""
    comps = [ad.as_tensor(c) for c in (components.values() if isinstance(components, dict) else components)]
    if len(comps) != len(weights.components):
        raise ValueError(f"expected {len(weights.components)} loss components, got {len(comps)}")
    total = None
    for l, c in enumerate(comps):
        u = weights.u[l]
        term = ad.exp(-u) * c + u
        total = term if total is None else total + term
    return total
