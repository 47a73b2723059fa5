"""Absorbing discrete diffusion over the joint (sequence, structure-token)
state: noise schedule, forward corruption, index- and bit-based losses,
absorbing posterior, and mask-predict generation.

Sequence vocabulary: amino-acid ids 0..19 plus MASK (20) and PAD (21).
Structure tokens travel as bit rows in {-1,+1}^K with per-position mask
flags; masked rows are replaced inside the model by a learnable absorbing
embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import BadT, HeadMismatch, ModeInputMissing
from .tokenizer import bits_to_index, index_to_bits, mask_id, pad_id

N_AA = 20
MASK_AA = 20
PAD_AA = 21


@dataclass
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray  # (T+1,), alpha_bar[0] = 1 .. alpha_bar[T] = 0
    beta: np.ndarray  # (T+1,), beta[t] = alpha_bar[t] / alpha_bar[t-1]
    lambda_w: np.ndarray  # (T+1,) per-step loss weights


def make_schedule(T, kind="linear-mask", weighting="uniform"):
    """Linear absorbing schedule: survival alpha_bar_t = 1 - t/T."""
    if T < 2:
        raise BadT(f"T must be >= 2, got {T}")
    if kind != "linear-mask":
        raise ValueError(f"unknown schedule kind {kind!r}")
    t = np.arange(T + 1, dtype=np.float64)
    alpha_bar = 1.0 - t / T
    beta = np.ones(T + 1)
    beta[1:] = alpha_bar[1:] / alpha_bar[:-1]
    if weighting == "uniform":
        lam = np.ones(T + 1)
    elif weighting == "inv-t":
        lam = np.ones(T + 1)
        lam[1:] = 1.0 / t[1:]
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    return NoiseSchedule(T=T, alpha_bar=alpha_bar, beta=beta, lambda_w=lam)


@dataclass
class TokenState:
    """Joint token state; masked flags are True where the track is hidden."""

    seq: np.ndarray  # (L,) int
    struct_bits: np.ndarray  # (L, K) float in {-1,+1}; rows under mask are ignored
    mask_seq: np.ndarray  # (L,) bool
    mask_struct: np.ndarray  # (L,) bool
    pad: np.ndarray  # (L,) bool
    k: int

    @classmethod
    def observed(cls, seq, struct_bits, pad=None):
        seq = np.asarray(seq, dtype=np.int64)
        struct_bits = np.asarray(struct_bits, dtype=np.float64)
        length = len(seq)
        pad = np.zeros(length, dtype=bool) if pad is None else np.asarray(pad, dtype=bool)
        return cls(
            seq=seq.copy(),
            struct_bits=struct_bits.copy(),
            mask_seq=np.zeros(length, dtype=bool),
            mask_struct=np.zeros(length, dtype=bool),
            pad=pad,
            k=struct_bits.shape[1],
        )

    @classmethod
    def all_masked(cls, length, k, pad=None):
        pad = np.zeros(length, dtype=bool) if pad is None else np.asarray(pad, dtype=bool)
        return cls(
            seq=np.full(length, MASK_AA, dtype=np.int64),
            struct_bits=np.zeros((length, k)),
            mask_seq=~pad,
            mask_struct=~pad,
            pad=pad,
            k=k,
        )

    def __len__(self):
        return len(self.seq)

    def copy(self):
        return TokenState(
            self.seq.copy(), self.struct_bits.copy(), self.mask_seq.copy(),
            self.mask_struct.copy(), self.pad.copy(), self.k,
        )

    def seq_view(self):
        """Sequence ids with MASK_AA at masked positions, PAD_AA at pads."""
        out = self.seq.copy()
        out[self.mask_seq] = MASK_AA
        out[self.pad] = PAD_AA
        return out

    def struct_index_view(self):
        """Index tokens with MASK/PAD ids at masked and pad positions."""
        out = bits_to_index(self.struct_bits)
        out[self.mask_struct] = mask_id(self.k)
        out[self.pad] = pad_id(self.k)
        return out

    def fully_unmasked(self):
        return not (self.mask_seq.any() or self.mask_struct.any())


@dataclass
class LMOutput:
    seq_logits: object  # Tensor (L, 20)
    struct_logits: object  # Tensor (L, 2^K) for index head or (L, 2K) for bit head
    hidden_layers: list = field(default_factory=list)  # per-layer (L, D) Tensors
    head: str = "bit"


# -- forward corruption ------------------------------------------------------

def forward_mask(x0: TokenState, schedule: NoiseSchedule, t, rng,
                 corrupt_seq=True, corrupt_struct=True):
    """Independently mask each non-PAD position with probability 1 - alpha_bar_t.

    Conditioning regimes exempt a track by passing corrupt_* = False.
    """
    if not 0 <= t <= schedule.T:
        raise BadT(f"t={t} outside [0, {schedule.T}]")
    out = x0.copy()
    p_mask = 1.0 - schedule.alpha_bar[t]
    maskable = ~x0.pad
    if corrupt_seq:
        out.mask_seq = maskable & (rng.random(len(x0)) < p_mask)
    if corrupt_struct:
        out.mask_struct = maskable & (rng.random(len(x0)) < p_mask)
    return out


# -- losses ------------------------------------------------------------------

def _masked_ce(log_probs, targets, mask):
    """Mean negative log-likelihood over masked positions (0 if none)."""
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        return ad.Tensor(0.0)
    picked = log_probs[idx, targets[idx]]
    return -picked.mean()


def seq_ce(output: LMOutput, x0: TokenState, xt: TokenState):
    return _masked_ce(ad.log_softmax(output.seq_logits, axis=-1), x0.seq, xt.mask_seq & ~xt.pad)


def loss_index(output: LMOutput, x0: TokenState, xt: TokenState, t, schedule: NoiseSchedule):
    """lambda_t * (seq CE + index CE), each averaged over its masked set."""
    if output.head != "index":
        raise HeadMismatch(f"index loss on head {output.head!r}")
    lam = schedule.lambda_w[t]
    struct_targets = bits_to_index(x0.struct_bits)
    struct = _masked_ce(
        ad.log_softmax(output.struct_logits, axis=-1), struct_targets, xt.mask_struct & ~xt.pad
    )
    return (seq_ce(output, x0, xt) + struct) * lam


def loss_bit(output: LMOutput, x0: TokenState, xt: TokenState, t, schedule: NoiseSchedule):
    """lambda_t * (seq CE + sum_k per-bit CE via the (L, K, 2) softmax)."""
    if output.head != "bit":
        raise HeadMismatch(f"bit loss on head {output.head!r}")
    lam = schedule.lambda_w[t]
    k = x0.k
    length = len(x0)
    mask = xt.mask_struct & ~xt.pad
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        struct = ad.Tensor(0.0)
    else:
        lp = ad.log_softmax(ad.reshape(output.struct_logits, (length, k, 2)), axis=-1)
        bit_targets = (x0.struct_bits > 0).astype(np.int64)  # (L, K) in {0, 1}
        rows = np.repeat(idx, k)
        cols = np.tile(np.arange(k), len(idx))
        picked = lp[rows, cols, bit_targets[idx].reshape(-1)]
        struct = -picked.sum() * (1.0 / len(idx))  # sum over bits, mean over positions
    return (seq_ce(output, x0, xt) + struct) * lam


# -- reverse process ---------------------------------------------------------

def unmask_probability(schedule: NoiseSchedule, t, s=None):
    """Absorbing-posterior unmask probability going from step t to step s < t."""
    s = t - 1 if s is None else s
    a_t, a_s = schedule.alpha_bar[t], schedule.alpha_bar[s]
    return (a_s - a_t) / (1.0 - a_t) if a_t < 1.0 else 1.0


def posterior_step(xt: TokenState, x0_pred: TokenState, t, rng, schedule: NoiseSchedule, s=None):
    """Sample x_{t-1}: masked positions unmask to their predicted token with
    probability (alpha_bar_s - alpha_bar_t)/(1 - alpha_bar_t); unmasked
    positions are kept (absorbing posterior)."""
    p_unmask = unmask_probability(schedule, t, s)
    out = xt.copy()
    for mask_attr, value_copy in (
        ("mask_seq", lambda i: out.seq.__setitem__(i, x0_pred.seq[i])),
        ("mask_struct", lambda i: out.struct_bits.__setitem__(i, x0_pred.struct_bits[i])),
    ):
        mask = getattr(xt, mask_attr)
        reveal = mask & (rng.random(len(xt)) < p_unmask)
        for i in np.flatnonzero(reveal):
            value_copy(i)
        getattr(out, mask_attr)[reveal] = False
    return out


# -- prediction sampling -----------------------------------------------------

@dataclass
class Prediction:
    """Sampled x0 guess plus per-position confidence per track."""

    state: TokenState
    conf_seq: np.ndarray
    conf_struct: np.ndarray


def sample_prediction(output: LMOutput, xt: TokenState, temperature, rng, greedy=False):
    """Draw a full x0 candidate at masked positions from the model output."""
    length = len(xt)
    state = xt.copy()
    state.mask_seq = np.zeros(length, dtype=bool)
    state.mask_struct = np.zeros(length, dtype=bool)
    seq_p = _temperature_softmax(output.seq_logits.data, temperature)
    conf_seq = np.zeros(length)
    for i in np.flatnonzero(xt.mask_seq):
        choice = int(np.argmax(seq_p[i])) if greedy else int(rng.choice(N_AA, p=seq_p[i]))
        state.seq[i] = choice
        conf_seq[i] = seq_p[i, choice]
    conf_struct = np.zeros(length)
    if output.head == "bit":
        probs = _temperature_softmax(
            output.struct_logits.data.reshape(length, xt.k, 2), temperature
        )
        for i in np.flatnonzero(xt.mask_struct):
            p_one = probs[i, :, 1]
            ones = (p_one >= 0.5) if greedy else (rng.random(xt.k) < p_one)
            state.struct_bits[i] = np.where(ones, 1.0, -1.0)
            conf_struct[i] = float(np.prod(np.where(ones, p_one, 1.0 - p_one)))
    else:
        probs = _temperature_softmax(output.struct_logits.data, temperature)
        for i in np.flatnonzero(xt.mask_struct):
            if greedy:
                choice = int(np.argmax(probs[i]))
            else:
                choice = int(rng.choice(probs.shape[1], p=probs[i]))
            state.struct_bits[i] = index_to_bits(np.array([choice]), xt.k)[0]
            conf_struct[i] = probs[i, choice]
    return Prediction(state=state, conf_seq=conf_seq, conf_struct=conf_struct)


def _temperature_softmax(logits, temperature):
    x = logits / max(temperature, 1e-8)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


# -- generation --------------------------------------------------------------

def generate(model, length, mode="unconditional", steps=25, strategy="stochastic",
             temperature=1.0, rng=None, seq=None, struct_bits=None, pad=None,
             position_indices=None):
    """Iterative mask-predict generation.

    mode: 'unconditional' | 'folding' (seq given, struct generated) |
    'inverse_folding' (struct given, seq generated). `model` exposes
    .forward(TokenState) -> LMOutput, .schedule, .k.
    """
    rng = np.random.default_rng() if rng is None else rng
    schedule = model.schedule
    if steps > schedule.T:
        raise BadT(f"steps={steps} exceeds T={schedule.T}")
    k = model.k
    state = TokenState.all_masked(length, k, pad=pad)
    if mode == "folding":
        if seq is None:
            raise ModeInputMissing("folding mode requires seq")
        state.seq = np.asarray(seq, dtype=np.int64).copy()
        state.mask_seq[:] = False
    elif mode == "inverse_folding":
        if struct_bits is None:
            raise ModeInputMissing("inverse_folding mode requires struct_bits")
        state.struct_bits = np.asarray(struct_bits, dtype=np.float64).copy()
        state.mask_struct[:] = False
    elif mode != "unconditional":
        raise ValueError(f"unknown mode {mode!r}")

    grid = np.unique(np.round(np.linspace(0, schedule.T, steps + 1)).astype(int))[::-1]
    for t, s in zip(grid[:-1], grid[1:]):
        if state.fully_unmasked():
            break
        with ad.no_grad():
            output = model.forward(state, position_indices=position_indices)
        pred = sample_prediction(output, state, temperature, rng)
        if strategy == "stochastic":
            state = posterior_step(state, pred.state, t, rng, schedule, s=s)
        elif strategy == "confidence":
            state = _confidence_step(state, pred, schedule, s)
        else:
            raise ValueError(f"unknown strategy {strategy!r}")
    assert state.fully_unmasked()
    return state


def _confidence_step(xt: TokenState, pred: Prediction, schedule: NoiseSchedule, s):
    """Unmask the highest-confidence masked positions; the number revealed
    follows the alpha_bar schedule. Ties break toward lower position index."""
    out = xt.copy()
    keep_frac = schedule.alpha_bar[s]
    for mask_attr, conf, reveal_value in (
        ("mask_seq", pred.conf_seq, lambda i: out.seq.__setitem__(i, pred.state.seq[i])),
        ("mask_struct", pred.conf_struct, lambda i: out.struct_bits.__setitem__(i, pred.state.struct_bits[i])),
    ):
        mask = getattr(xt, mask_attr)
        maskable = (~xt.pad).sum()
        if maskable == 0 or not mask.any():
            continue
        target_unmasked = int(round(maskable * keep_frac)) if s > 0 else maskable
        currently = maskable - mask.sum()
        n_reveal = max(target_unmasked - currently, 0)
        n_reveal = min(n_reveal, mask.sum())
        if s == 0:
            n_reveal = mask.sum()
        if n_reveal == 0:
            continue
        cand = np.flatnonzero(mask)
        order = cand[np.lexsort((cand, -conf[cand]))]
        for i in order[:n_reveal]:
            reveal_value(i)
            getattr(out, mask_attr)[i] = False
    return out
