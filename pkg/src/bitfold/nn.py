"""Shared neural building blocks on top of the autodiff core.

Multi-head attention (optionally with additive logit bias and sigmoid
output gating), the gated transition block, MLP stacks, relative-position
bias tables, sinusoidal embeddings, and differentiable backbone dihedral
helpers used by reconstruction losses.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Affine, Linear, Module, Tensor

REL_POS_CLIP = 32


class MLP(Module):
    """Plain MLP with swish activations between layers."""

    def __init__(self, rng, dims, zero_last=False):
        self.layers = [
            Linear(rng, dims[i], dims[i + 1], zero_init=(zero_last and i == len(dims) - 2))
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.swish(x)
        return x


class Transition(Module):
    """layernorm -> swish-gated expansion by `ratio` -> projection back.

    The output projection is zero-initialized so a fresh transition is the
    identity once the caller adds the residual.
    """

    def __init__(self, rng, d, ratio=4):
        self.norm = Affine(d)
        self.gate = Linear(rng, d, d * ratio)
        self.value = Linear(rng, d, d * ratio)
        self.out = Linear(rng, d * ratio, d, zero_init=True)

    def __call__(self, x):
        h = self.norm(ad.layernorm(x))
        return self.out(ad.swish(self.gate(h)) * self.value(h))


class RelPosBias(Module):
    """Per-head attention bias keyed by clipped index differences, plus
    optional per-head relative value vectors (Shaw-style) so position
    information can flow into representations, not just into logits."""

    def __init__(self, rng, n_heads, clip=REL_POS_CLIP, d_value=0):
        self.clip = clip
        self.n_heads = n_heads
        self.d_value = d_value
        self.table = Tensor(rng.normal(0.0, 0.02, size=(2 * clip + 1, n_heads)), requires_grad=True)
        if d_value:
            self.value_table = Tensor(
                rng.normal(0.0, 0.1, size=(2 * clip + 1, n_heads * d_value)), requires_grad=True
            )

    def _diff(self, position_indices):
        pos = np.asarray(position_indices, dtype=np.int64)
        return np.clip(pos[None, :] - pos[:, None], -self.clip, self.clip) + self.clip

    def __call__(self, position_indices):
        diff = self._diff(position_indices)
        bias = ad.transpose(self.table[diff], (2, 0, 1))  # (H, L, L)
        if not self.d_value:
            return bias
        length = len(position_indices)
        relv = ad.reshape(self.value_table[diff], (length, length, self.n_heads, self.d_value))
        return bias, ad.transpose(relv, (2, 0, 1, 3))  # (H, L, L, dv)


class MultiHeadAttention(Module):
    """Self-attention over residues with optional logit bias and gating.

    `bias` is an (H, L, L) tensor added to the scaled logits; `gated`
    applies a per-head sigmoid gate computed from the input, as in
    pair-biased attention.
    """

    def __init__(self, rng, d_model, n_heads, gated=False, zero_init_out=False):
        assert d_model % n_heads == 0
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = Linear(rng, d_model, d_model)
        self.k = Linear(rng, d_model, d_model)
        self.v = Linear(rng, d_model, d_model)
        self.gate = Linear(rng, d_model, d_model) if gated else None
        self.out = Linear(rng, d_model, d_model, zero_init=zero_init_out)

    def _split(self, x, length):
        return ad.transpose(ad.reshape(x, (length, self.n_heads, self.d_head)), (1, 0, 2))

    def __call__(self, x, bias=None, rel_values=None):
        length = x.shape[0]
        q = self._split(self.q(x), length)
        k = self._split(self.k(x), length)
        v = self._split(self.v(x), length)
        logits = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(self.d_head))
        if bias is not None:
            logits = logits + bias
        attn = ad.softmax(logits, axis=-1)
        ctx = ad.matmul(attn, v)  # (H, L, dh)
        if rel_values is not None:
            # ctx_i += sum_j attn_ij * relvec(i - j)
            ctx = ctx + (ad.reshape(attn, (self.n_heads, length, length, 1)) * rel_values).sum(axis=2)
        merged = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (length, self.n_heads * self.d_head))
        if self.gate is not None:
            merged = merged * ad.sigmoid(self.gate(x))
        return self.out(merged)


def sinusoidal_embedding(positions, dim):
    """Constant sinusoidal embedding of integer positions, shape (L, dim)."""
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = positions[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if emb.shape[1] < dim:
        emb = np.concatenate([emb, np.zeros((len(positions), dim - emb.shape[1]))], axis=1)
    return emb


# -- differentiable backbone angles ----------------------------------------

def cross3(a, b):
    """Cross product along the trailing axis of (L, 3) tensors."""
    ax, ay, az = a[:, 0], a[:, 1], a[:, 2]
    bx, by, bz = b[:, 0], b[:, 1], b[:, 2]
    cx = ay * bz - az * by
    cy = az * bx - ax * bz
    cz = ax * by - ay * bx
    return ad.concat([ad.reshape(c, (-1, 1)) for c in (cx, cy, cz)], axis=1)


def dihedral_sincos(p0, p1, p2, p3, eps=1e-8):
    """(sin, cos) of the dihedral defined by four (L, 3) point tensors."""
    b0 = p1 - p0
    b1 = p2 - p1
    b2 = p3 - p2
    n1 = cross3(b0, b1)
    n2 = cross3(b1, b2)
    b1n = b1 * ad.reshape(1.0 / ad.sqrt((b1 * b1).sum(axis=1) + eps), (-1, 1))
    m1 = cross3(n1, b1n)
    x = (n1 * n2).sum(axis=1)
    y = (m1 * n2).sum(axis=1)
    r = ad.sqrt(x * x + y * y + eps)
    return y / r, x / r


def backbone_dihedral_sincos(coords, chain_ids):
    """phi/psi/omega sin-cos features from a (L, 4, 3) coordinate tensor.

    Returns an (L, 6) tensor; residues lacking a same-chain neighbor get
    zero rows. `coords` may be a Tensor (differentiable path) or ndarray.
    """
    if not isinstance(coords, Tensor):
        coords = Tensor(coords)
    chain_ids = np.asarray(chain_ids)
    length = coords.shape[0]
    prev_ok = np.zeros(length, dtype=bool)
    next_ok = np.zeros(length, dtype=bool)
    prev_ok[1:] = chain_ids[1:] == chain_ids[:-1]
    next_ok[:-1] = chain_ids[:-1] == chain_ids[1:]

    idx = np.arange(length)
    ip = np.where(prev_ok, idx - 1, idx)
    inx = np.where(next_ok, idx + 1, idx)

    n_at = coords[:, 0, :]
    ca_at = coords[:, 1, :]
    c_at = coords[:, 2, :]
    c_prev = coords[ip, 2, :]
    n_next = coords[inx, 0, :]
    ca_next = coords[inx, 1, :]

    phi_s, phi_c = dihedral_sincos(c_prev, n_at, ca_at, c_at)
    psi_s, psi_c = dihedral_sincos(n_at, ca_at, c_at, n_next)
    omg_s, omg_c = dihedral_sincos(ca_at, c_at, n_next, ca_next)

    phi_mask = prev_ok.astype(np.float64)
    nxt_mask = next_ok.astype(np.float64)
    cols = [
        phi_s * phi_mask,
        phi_c * phi_mask,
        psi_s * nxt_mask,
        psi_c * nxt_mask,
        omg_s * nxt_mask,
        omg_c * nxt_mask,
    ]
    return ad.concat([ad.reshape(c, (-1, 1)) for c in cols], axis=1)
