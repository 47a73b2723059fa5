"""Hybrid data-space generation: the composed denoiser
decoder(LM(encoder(x_t))) driven by a flow-matching Euler sampler.

Corruption follows a linear interpolant between an isotropic Gaussian
prior (sigma 10 A per coordinate) and the centered data; each Euler step
Kabsch-aligns the denoised structure onto the current state before the
linear update. The language model itself is time-unaware: corruption level
reaches it only through the encoder features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import diffusion as dfn
from . import geometry as geo
from . import tokenizer as tok
from .errors import NonFiniteLoss, NonFiniteValue, TimeOrder
from .optim import Adam, warmup_linear_decay

PRIOR_SIGMA = 10.0
FM_STEPS_DEFAULT = 10


@dataclass
class FlowState:
    """Centered backbone coordinates at flow time t in [0, 1]."""

    structure: geo.BackboneStructure
    t: float
    conditioning: np.ndarray | None = None  # amino-acid ids for folding


def _centered(coords):
    return coords - coords[:, 1, :].mean(axis=0)


def corrupt(x1: geo.BackboneStructure, t, rng, sigma=PRIOR_SIGMA, conditioning=None):
    """x_t = t*x1 + (1-t)*x0 with x0 a centered Gaussian prior draw."""
    if not 0.0 <= t <= 1.0:
        raise TimeOrder(f"t must be in [0, 1], got {t}")
    x0 = rng.normal(0.0, sigma, size=x1.coords.shape)
    x0 = _centered(x0)
    coords = t * _centered(x1.coords) + (1.0 - t) * x0
    structure = geo.BackboneStructure(coords, x1.chain_ids, x1.source_id)
    return FlowState(structure=structure, t=float(t), conditioning=conditioning)


@dataclass
class HybridModels:
    tokenizer: tok.TokenizerParams
    lm: object  # ProteinLM
    resdiff_head: object = None


def denoise(state: FlowState, models: HybridModels, rng=None, position_indices=None):
    """The composed denoiser decoder(LM(encoder(x_t))): encode and quantize
    the noisy structure, one LM forward with the corrupted bits observed
    (sequence clamped to the conditioning if present, masked otherwise),
    greedy bit readout, decode to centered coordinates."""
    rng = np.random.default_rng(0) if rng is None else rng
    structure = state.structure
    with ad.no_grad():
        z = tok.encode(structure, models.tokenizer)
    bits_t = np.where(z.data >= 0.0, 1.0, -1.0)
    if state.conditioning is not None:
        seq = np.asarray(state.conditioning)
    else:
        seq = np.full(len(structure), dfn.MASK_AA)
    lm_state = dfn.TokenState.observed(seq, bits_t)
    lm_state.mask_seq = np.full(len(structure), state.conditioning is None)
    with ad.no_grad():
        out = models.lm.forward(lm_state, position_indices=position_indices)
    length, k = bits_t.shape
    bit_logits = out.struct_logits.data.reshape(length, k, 2)
    pred_bits = np.where(bit_logits[:, :, 1] >= bit_logits[:, :, 0], 1.0, -1.0)
    if models.resdiff_head is not None:
        from . import resdiff as rd

        hidden = [h.data for h in out.hidden_layers]
        with ad.no_grad():
            cond = rd.condition(pred_bits, hidden, models.resdiff_head)
        pred_bits = pred_bits + rd.resdiff_sample(cond.data, models.resdiff_head, rng)
    with ad.no_grad():
        coords = tok.decode(tok.Tensor(pred_bits), models.tokenizer, position_indices).data
    return geo.BackboneStructure(_centered(coords), structure.chain_ids, structure.source_id)


def euler_step(state: FlowState, x_hat: geo.BackboneStructure, s):
    """x_s = ((s-t)/(1-t)) * aligned(x_hat) + ((1-s)/(1-t)) * x_t."""
    t = state.t
    if not t < s <= 1.0:
        raise TimeOrder(f"need t < s <= 1, got t={t}, s={s}")
    res = geo.kabsch_align(x_hat, state.structure)
    aligned = x_hat.coords @ res.rotation.T + res.translation
    coef_hat = (s - t) / (1.0 - t)
    coords = coef_hat * aligned + (1.0 - coef_hat) * state.structure.coords
    structure = geo.BackboneStructure(coords, state.structure.chain_ids, state.structure.source_id)
    return FlowState(structure=structure, t=float(s), conditioning=state.conditioning)


def fm_generate(models, length, rng, conditioning=None, n_steps=FM_STEPS_DEFAULT,
                chain_ids=None, denoiser=None, position_indices=None):
    """Euler-integrate the flow from the Gaussian prior at t=0 to t=1.

    `denoiser` overrides the composed model (used by exactness checks with
    an oracle that always returns the target)."""
    if n_steps < 1:
        raise TimeOrder(f"n_steps must be >= 1, got {n_steps}")
    chain_ids = np.zeros(length, dtype=int) if chain_ids is None else np.asarray(chain_ids)
    x0 = _centered(rng.normal(0.0, PRIOR_SIGMA, size=(length, 4, 3)))
    state = FlowState(geo.BackboneStructure(x0, chain_ids), 0.0, conditioning)
    for k in range(n_steps):
        if denoiser is not None:
            x_hat = denoiser(state)
        else:
            x_hat = denoise(state, models, rng=rng, position_indices=position_indices)
        state = euler_step(state, x_hat, (k + 1) / n_steps)
    coords = _centered(state.structure.coords)
    return geo.BackboneStructure(coords, chain_ids, state.structure.source_id)


def fm_finetune(models: HybridModels, dataset, steps, seed=0, peak=1e-4, warmup=2000,
                log_every=0):
    """Fine-tune the LM to predict clean bit tokens from encoder features of
    flow-corrupted structures (bit cross-entropy; decoder untouched).

    `dataset` is a list of (structure, sequence) pairs."""
    lm = models.lm
    opt = Adam(lm.parameters())
    rng = np.random.default_rng(seed)
    clean_bits = []
    for structure, _ in dataset:
        with ad.no_grad():
            z = tok.encode(structure, models.tokenizer)
        clean_bits.append(np.where(z.data >= 0.0, 1.0, -1.0))
    for step in range(steps):
        i = int(rng.integers(len(dataset)))
        structure, seq = dataset[i]
        t = rng.uniform()
        noisy = corrupt(structure, t, rng)
        with ad.no_grad():
            z_t = tok.encode(noisy.structure, models.tokenizer)
        bits_t = np.where(z_t.data >= 0.0, 1.0, -1.0)
        state = dfn.TokenState.observed(np.asarray(seq), bits_t)
        out = lm.forward(state)
        target = dfn.TokenState.observed(np.asarray(seq), clean_bits[i])
        supervised = target.copy()
        supervised.mask_struct[:] = True  # bit CE at every structure position
        try:
            loss = dfn.loss_bit(out, target, supervised, 1, lm.schedule)
            opt.zero_grad()
            loss.backward()
        except NonFiniteValue as exc:
            raise NonFiniteLoss(f"non-finite fine-tune loss at step {step}: {exc}")
        opt.step(lr=warmup_linear_decay(step, steps, peak=peak, warmup=warmup))
        if log_every and step % log_every == 0:
            print(f"fm-finetune step {step}: loss {loss.item():.4f}")
    return lm
