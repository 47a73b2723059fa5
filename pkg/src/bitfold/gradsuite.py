"""Finite-difference gradient suite over every trainable loss.

Each entry builds a tiny instance of one loss (token cross-entropies,
representation alignment, residual diffusion, transitions, pair-biased
attention, triangle operations, SeqStruct attention) and compares
backpropagated gradients against central finite differences.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import diffusion as dfn
from . import geo_arch
from . import nn
from . import repa as repa_mod
from . import resdiff as rd
from .autodiff import Tensor


def _state(rng, length=5, k=3):
    seq = rng.integers(0, 20, size=length)
    bits = np.where(rng.random((length, k)) < 0.5, 1.0, -1.0)
    x0 = dfn.TokenState.observed(seq, bits)
    xt = x0.copy()
    xt.mask_seq = rng.random(length) < 0.6
    xt.mask_struct = rng.random(length) < 0.6
    xt.mask_seq[0] = True  # keep both masked sets non-empty
    xt.mask_struct[0] = True
    return x0, xt


def _loss_index(seed):
    rng = np.random.default_rng(seed)
    x0, xt = _state(rng)
    schedule = dfn.make_schedule(10)
    seq_logits = Tensor(rng.normal(size=(5, 20)), requires_grad=True)
    struct_logits = Tensor(rng.normal(size=(5, 8)), requires_grad=True)

    def fn():
        out = dfn.LMOutput(seq_logits=seq_logits, struct_logits=struct_logits, head="index")
        return dfn.loss_index(out, x0, xt, 4, schedule)

    return fn, {"seq_logits": seq_logits, "struct_logits": struct_logits}


def _loss_bit(seed):
    rng = np.random.default_rng(seed)
    x0, xt = _state(rng)
    schedule = dfn.make_schedule(10)
    seq_logits = Tensor(rng.normal(size=(5, 20)), requires_grad=True)
    struct_logits = Tensor(rng.normal(size=(5, 6)), requires_grad=True)

    def fn():
        out = dfn.LMOutput(seq_logits=seq_logits, struct_logits=struct_logits, head="bit")
        return dfn.loss_bit(out, x0, xt, 4, schedule)

    return fn, {"seq_logits": seq_logits, "struct_logits": struct_logits}


def _loss_repa(seed):
    rng = np.random.default_rng(seed)
    hidden = [Tensor(rng.normal(size=(4, 6)), requires_grad=True) for _ in range(3)]
    head = repa_mod.RepaHead(6, 5, 3, seed=seed)
    head.layer_logits.data[:] = rng.normal(size=3) * 0.3
    targets = rng.normal(size=(4, 5))

    def fn():
        return repa_mod.repa_loss(hidden, head, targets)

    params = {f"hidden.{i}": h for i, h in enumerate(hidden)}
    params.update(head.parameters(prefix="head."))
    return fn, params


def _loss_resdiff(seed):
    rng = np.random.default_rng(seed)
    head = rd.ResDiffHead(k=3, d_hidden=8, n_layers=2, d_lm=6, n_lm_layers=2, t_r=10, seed=seed)
    for layer in head.norms:  # nonzero modulation so adaLN gradients are exercised
        layer.mod.w.data[:] = rng.normal(size=layer.mod.w.data.shape) * 0.1
    hidden = [Tensor(rng.normal(size=(4, 6)), requires_grad=True) for _ in range(2)]
    z_quant = np.where(rng.random((4, 3)) < 0.5, 1.0, -1.0)
    r = rng.normal(size=(4, 3))

    def fn():
        cond = rd.condition(z_quant, hidden, head)
        return rd.resdiff_loss(r, 5, cond, head, np.random.default_rng(seed + 7))

    params = {f"hidden.{i}": h for i, h in enumerate(hidden)}
    params.update(head.parameters(prefix="head."))
    return fn, params


def _loss_transition(seed):
    rng = np.random.default_rng(seed)
    trans = nn.Transition(rng, 6, ratio=2)
    trans.out.w.data[:] = rng.normal(size=trans.out.w.data.shape) * 0.1
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)

    def fn():
        return ((x + trans(x)) ** 2).mean()

    params = {"x": x}
    params.update(trans.parameters(prefix="trans."))
    return fn, params


def _loss_pair_bias_attention(seed):
    rng = np.random.default_rng(seed)
    attn = nn.MultiHeadAttention(rng, 8, 2, gated=True)
    bias_proj = geo_arch.PairBias(rng, 4, 2)
    bias_proj.proj.w.data[:] = rng.normal(size=bias_proj.proj.w.data.shape) * 0.2
    x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    pair = Tensor(rng.normal(size=(4, 4, 4)), requires_grad=True)

    def fn():
        return (attn(x, bias=bias_proj(pair)) ** 2).mean()

    params = {"x": x, "pair": pair}
    params.update(attn.parameters(prefix="attn."))
    params.update(bias_proj.parameters(prefix="bias."))
    return fn, params


def _loss_triangle_update(seed):
    rng = np.random.default_rng(seed)
    losses = {}
    pair = Tensor(rng.normal(size=(4, 4, 5)), requires_grad=True)
    ups = []
    for mode in ("outgoing", "incoming"):
        up = geo_arch.TriangleUpdate(rng, 5, 6, mode)
        up.out.w.data[:] = rng.normal(size=up.out.w.data.shape) * 0.2
        ups.append(up)

    def fn():
        total = Tensor(0.0)
        for up in ups:
            total = total + (up(pair) ** 2).mean()
        return total

    params = {"pair": pair}
    for i, up in enumerate(ups):
        params.update(up.parameters(prefix=f"up.{i}."))
    del losses
    return fn, params


def _loss_triangle_attention(seed):
    rng = np.random.default_rng(seed)
    pair = Tensor(rng.normal(size=(4, 4, 5)), requires_grad=True)
    attns = []
    for mode in ("starting", "ending"):
        ta = geo_arch.TriangleAttention(rng, 5, 3, 2, mode)
        ta.out.w.data[:] = rng.normal(size=ta.out.w.data.shape) * 0.2
        attns.append(ta)

    def fn():
        total = Tensor(0.0)
        for ta in attns:
            total = total + (ta(pair) ** 2).mean()
        return total

    params = {"pair": pair}
    for i, ta in enumerate(attns):
        params.update(ta.parameters(prefix=f"ta.{i}."))
    return fn, params


def _loss_seqstruct(seed):
    rng = np.random.default_rng(seed)
    ss = geo_arch.SeqStructAttention(rng, 6, 4, 2)
    ss.attn.out.w.data[:] = rng.normal(size=ss.attn.out.w.data.shape) * 0.2
    ss.bias.proj.w.data[:] = rng.normal(size=ss.bias.proj.w.data.shape) * 0.2
    h_seq = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    h_struct = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    pair = Tensor(rng.normal(size=(4, 4, 4)), requires_grad=True)

    def fn():
        d_seq, d_struct = ss(h_seq, h_struct, pair)
        return (d_seq ** 2).mean() + (d_struct ** 2).mean()

    params = {"h_seq": h_seq, "h_struct": h_struct, "pair": pair}
    params.update(ss.parameters(prefix="ss."))
    return fn, params


SUITE = {
    "index-ce": _loss_index,
    "bit-ce": _loss_bit,
    "repa": _loss_repa,
    "resdiff": _loss_resdiff,
    "transition": _loss_transition,
    "pair-bias-attention": _loss_pair_bias_attention,
    "triangle-update": _loss_triangle_update,
    "triangle-attention": _loss_triangle_attention,
    "seqstruct-attention": _loss_seqstruct,
}


def run_grad_suite(seeds=(0, 1, 2), tol=1e-4):
    """[(name@seed, GradCheckReport)] for every loss and seed."""
    reports = []
    for name, builder in SUITE.items():
        for seed in seeds:
            fn, params = builder(seed)
            report = ad.grad_check(fn, params, seed=seed, tol=tol)
            reports.append((f"{name}@{seed}", report))
    return reports
