"""Geometry-aware language-model architecture.

The trunk runs a single stream of 2L tokens (structure tokens at
positions 0..L-1, sequence tokens at L..2L-1, sharing residue indices in
the positional encoding). Geometric sub-layers are flag-gated per block:
pair representation with pair-biased attention and pair transition,
structure-track transition, triangle multiplicative updates, triangle
attention, and SeqStruct attention over feature-concatenated tracks.

With every flag off the model reduces exactly to the plain two-modality
transformer; pair-bias projections are zero-initialized so a zeroed pair
representation also reproduces the plain forward bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import diffusion as dfn
from . import nn
from .autodiff import Affine, Linear, Module, Tensor
from .errors import InvalidConfig


@dataclass
class BlockConfig:
    # ablation flags (Table-style axes: P.Bias&Tran / S.Tran / Tri.Up / Tri.Attn / SeqStruct)
    pair_bias: bool = False
    struct_transition: bool = False
    triangle_update: bool = False
    triangle_attention: bool = False
    seqstruct_attention: bool = False
    # dims (desk-scale defaults; paper-scale: d_model 1280, d_pair 128,
    # d_tri_update 128, d_tri_attn_head 32, heads_tri 4, heads 16)
    d_model: int = 64
    d_pair: int = 16
    d_tri_update: int = 16
    d_tri_attn_head: int = 8
    heads_tri: int = 2
    heads: int = 4
    transition_ratio: int = 4
    heads_seqstruct: int = 4

    def validate(self):
        if (self.triangle_update or self.triangle_attention) and not self.pair_bias:
            raise InvalidConfig("triangle operations require the pair representation")
        for name in ("d_model", "d_pair", "d_tri_update", "d_tri_attn_head",
                     "heads_tri", "heads", "transition_ratio", "heads_seqstruct"):
            if getattr(self, name) <= 0:
                raise InvalidConfig(f"{name} must be positive")


# -- pair-representation sub-layers ------------------------------------------

class PairInit(Module):
    """pair[i][j] = MLP3(concat(h[i], h[j]))."""

    def __init__(self, rng, d_model, d_pair):
        self.mlp = nn.MLP(rng, (2 * d_model, d_pair, d_pair, d_pair))

    def __call__(self, h):
        length = h.shape[0]
        rows = h[np.repeat(np.arange(length), length)]
        cols = h[np.tile(np.arange(length), length)]
        flat = ad.concat([rows, cols], axis=1)
        return ad.reshape(self.mlp(flat), (length, length, -1))


class PairBias(Module):
    """Per-head attention logit bias from the pair representation.

    Zero-initialized: a freshly built geometric model reproduces the plain
    transformer forward exactly.
    """

    def __init__(self, rng, d_pair, n_heads):
        self.proj = Linear(rng, d_pair, n_heads, zero_init=True)

    def __call__(self, pair):
        return ad.transpose(self.proj(pair), (2, 0, 1))  # (H, L, L)


class TriangleUpdate(Module):
    """Multiplicative triangle update (outgoing or incoming edges)."""

    def __init__(self, rng, d_pair, d_hidden, mode):
        self.mode = mode
        self.norm = Affine(d_pair)
        self.gate_a = Linear(rng, d_pair, d_hidden)
        self.val_a = Linear(rng, d_pair, d_hidden)
        self.gate_b = Linear(rng, d_pair, d_hidden)
        self.val_b = Linear(rng, d_pair, d_hidden)
        self.out_gate = Linear(rng, d_pair, d_pair)
        self.out_norm = Affine(d_hidden)
        self.out = Linear(rng, d_hidden, d_pair, zero_init=True)

    def __call__(self, pair):
        z = self.norm(ad.layernorm(pair))
        a = ad.sigmoid(self.gate_a(z)) * self.val_a(z)
        b = ad.sigmoid(self.gate_b(z)) * self.val_b(z)
        mixed = ad.tri_contract(a, b, self.mode)
        delta = self.out(self.out_norm(ad.layernorm(mixed)))
        return ad.sigmoid(self.out_gate(z)) * delta


class TriangleAttention(Module):
    """Row-wise (starting) or column-wise (ending) attention over the pair
    map with logits biased by the pair representation itself."""

    def __init__(self, rng, d_pair, d_head, n_heads, mode):
        self.mode = mode
        self.n_heads = n_heads
        self.d_head = d_head
        d_inner = d_head * n_heads
        self.norm = Affine(d_pair)
        self.q = Linear(rng, d_pair, d_inner)
        self.k = Linear(rng, d_pair, d_inner)
        self.v = Linear(rng, d_pair, d_inner)
        self.bias = Linear(rng, d_pair, n_heads)
        self.gate = Linear(rng, d_pair, d_inner)
        self.out = Linear(rng, d_inner, d_pair, zero_init=True)

    def __call__(self, pair):
        if self.mode == "ending":
            pair_in = ad.transpose(pair, (1, 0, 2))
        else:
            pair_in = pair
        length = pair_in.shape[0]
        z = self.norm(ad.layernorm(pair_in))

        def split(x):  # (L, L, H*dh) -> (L, H, L, dh)
            return ad.transpose(ad.reshape(x, (length, length, self.n_heads, self.d_head)), (0, 2, 1, 3))

        q, k, v = split(self.q(z)), split(self.k(z)), split(self.v(z))
        logits = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.d_head))
        bias = ad.transpose(self.bias(z), (2, 0, 1))  # (H, j, k) from pair[j][k]
        logits = logits + ad.reshape(bias, (1, self.n_heads, length, length))
        attn = ad.softmax(logits, axis=-1)
        ctx = ad.matmul(attn, v)  # (L, H, L, dh)
        merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (length, length, -1))
        delta = self.out(merged * ad.sigmoid(self.gate(z)))
        if self.mode == "ending":
            delta = ad.transpose(delta, (1, 0, 2))
        return delta


class SeqStructAttention(Module):
    """Pair-biased gated attention over residues on the feature-wise
    concatenation of the two tracks, split back afterwards."""

    def __init__(self, rng, d_model, d_pair, n_heads):
        self.norm = Affine(2 * d_model)
        self.attn = nn.MultiHeadAttention(rng, 2 * d_model, n_heads, gated=True, zero_init_out=True)
        self.bias = PairBias(rng, d_pair, n_heads)

    def __call__(self, h_seq, h_struct, pair):
        d = h_seq.shape[1]
        joint = ad.concat([h_seq, h_struct], axis=1)
        out = self.attn(self.norm(ad.layernorm(joint)), bias=self.bias(pair))
        return out[:, :d], out[:, d:]


# -- trunk block -------------------------------------------------------------

class EncoderBlock(Module):
    def __init__(self, rng, cfg: BlockConfig):
        d = cfg.d_model
        self.cfg = cfg
        self.attn_norm = Affine(d)
        self.attn = nn.MultiHeadAttention(rng, d, cfg.heads, gated=True)
        self.rel = nn.RelPosBias(rng, cfg.heads)
        self.transition = nn.Transition(rng, d, cfg.transition_ratio)
        if cfg.pair_bias:
            self.pair_bias = PairBias(rng, cfg.d_pair, cfg.heads)
            self.pair_transition = nn.Transition(rng, cfg.d_pair, cfg.transition_ratio)
        if cfg.struct_transition:
            self.struct_trans = nn.Transition(rng, d, cfg.transition_ratio)
        if cfg.triangle_update:
            self.tri_out = TriangleUpdate(rng, cfg.d_pair, cfg.d_tri_update, "outgoing")
            self.tri_in = TriangleUpdate(rng, cfg.d_pair, cfg.d_tri_update, "incoming")
        if cfg.triangle_attention:
            self.tri_start = TriangleAttention(rng, cfg.d_pair, cfg.d_tri_attn_head, cfg.heads_tri, "starting")
            self.tri_end = TriangleAttention(rng, cfg.d_pair, cfg.d_tri_attn_head, cfg.heads_tri, "ending")
        if cfg.seqstruct_attention:
            self.seqstruct = SeqStructAttention(rng, d, cfg.d_pair, cfg.heads_seqstruct)

    def __call__(self, h, pair, positions):
        cfg = self.cfg
        length = len(positions)
        joint_pos = np.concatenate([positions, positions])
        bias = self.rel(joint_pos)
        if cfg.pair_bias:
            pb = self.pair_bias(pair)  # (H, L, L) on the struct-struct quadrant
            zeros_r = Tensor(np.zeros((cfg.heads, length, length)))
            zeros_b = Tensor(np.zeros((cfg.heads, length, 2 * length)))
            bias = bias + ad.concat([ad.concat([pb, zeros_r], axis=2), zeros_b], axis=1)
        h = h + self.attn(self.attn_norm(ad.layernorm(h)), bias=bias)
        if cfg.seqstruct_attention:
            h_struct, h_seq = h[:length], h[length:]
            d_seq, d_struct = self.seqstruct(h_seq, h_struct, pair)
            h = h + ad.concat([d_struct, d_seq], axis=0)
        if cfg.struct_transition:
            delta = self.struct_trans(h[:length])
            h = h + ad.concat([delta, Tensor(np.zeros((length, cfg.d_model)))], axis=0)
        h = h + self.transition(h)
        if cfg.pair_bias:
            if cfg.triangle_update:
                pair = pair + self.tri_out(pair)
                pair = pair + self.tri_in(pair)
            if cfg.triangle_attention:
                pair = pair + self.tri_start(pair)
                pair = pair + self.tri_end(pair)
            pair = pair + self.pair_transition(pair)
        return h, pair


# -- full language model -----------------------------------------------------

class ProteinLM(Module):
    """Joint masked language model over sequence and structure tokens."""

    def __init__(self, cfg: BlockConfig, n_blocks, k, head="bit", T=100,
                 weighting="uniform", seed=0):
        cfg.validate()
        if head not in ("bit", "index"):
            raise InvalidConfig(f"head must be 'bit' or 'index', got {head!r}")
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.cfg = cfg
        self.n_blocks = n_blocks
        self.k = k
        self.head = head
        self.schedule = dfn.make_schedule(T, weighting=weighting)
        self.seq_embed = Tensor(rng.normal(0.0, 0.5, size=(dfn.PAD_AA + 1, d)), requires_grad=True)
        if head == "bit":
            self.struct_in = Linear(rng, k, d)
            self.absorbing = Tensor(rng.normal(0.0, 0.5, size=(d,)), requires_grad=True)
            self.struct_out = Linear(rng, d, 2 * k)
        else:
            self.struct_embed = Tensor(rng.normal(0.0, 0.5, size=(2**k + 2, d)), requires_grad=True)
            self.struct_out = Linear(rng, d, 2**k)
        self.modality = Tensor(rng.normal(0.0, 0.5, size=(2, d)), requires_grad=True)
        if cfg.pair_bias:
            self.pair_init = PairInit(rng, d, cfg.d_pair)
        self.blocks = [EncoderBlock(rng, cfg) for _ in range(n_blocks)]
        self.final_norm = Affine(d)
        self.seq_out = Linear(rng, d, dfn.N_AA)

    def _embed_struct(self, state):
        length = len(state)
        if self.head == "bit":
            emb = self.struct_in(Tensor(state.struct_bits))
            gate = (~(state.mask_struct | state.pad)).astype(np.float64)[:, None]
            absorbed = ad.reshape(self.absorbing, (1, -1)) * (1.0 - gate)
            return emb * gate + absorbed
        return self.struct_embed[state.struct_index_view()]

    def forward(self, state: dfn.TokenState, position_indices=None):
        length = len(state)
        positions = np.arange(length) if position_indices is None else np.asarray(position_indices)
        pos_emb = nn.sinusoidal_embedding(positions, self.cfg.d_model)
        h_struct = self._embed_struct(state) + pos_emb + self.modality[np.zeros(length, dtype=int)]
        h_seq = self.seq_embed[state.seq_view()] + pos_emb + self.modality[np.ones(length, dtype=int)]
        h = ad.concat([h_struct, h_seq], axis=0)
        pair = self.pair_init(h[:length]) if self.cfg.pair_bias else None
        hidden_layers = []
        for block in self.blocks:
            h, pair = block(h, pair, positions)
            hidden_layers.append(h[:length])
        h = self.final_norm(ad.layernorm(h))
        return dfn.LMOutput(
            seq_logits=self.seq_out(h[length:]),
            struct_logits=self.struct_out(h[:length]),
            hidden_layers=hidden_layers,
            head=self.head,
        )

    def parameter_count(self):
        return sum(p.size for p in self.parameters().values())


def assemble_model(cfg: BlockConfig, n_blocks, k=8, head="bit", T=100, seed=0,
                   weighting="uniform"):
    return ProteinLM(cfg, n_blocks, k, head=head, T=T, weighting=weighting, seed=seed)
