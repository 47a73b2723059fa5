"""Residual diffusion head: a small conditional DDPM over quantization
residuals r = z_cont - z_quant.

The epsilon network is an MLP stack with adaptive-layernorm conditioning on
(token projection + ensembled LM hidden states, sinusoidal timestep
embedding). Strictly post-hoc: it never touches language-model parameters.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Linear, Module, Tensor
from .errors import BadT, InvalidConfig, ShapeMismatch
from .optim import Adam, warmup_linear_decay

T_R_DEFAULT = 100
BETA_START = 1e-4
BETA_END = 0.02


class AdaLN(Module):
    """Layernorm whose scale/shift are generated from a conditioning vector;
    the modulation map is zero-initialized so a fresh layer is plain LN."""

    def __init__(self, rng, d, d_cond):
        self.mod = Linear(rng, d_cond, 2 * d, zero_init=True)

    def __call__(self, x, cond):
        mod = self.mod(cond)
        d = x.shape[-1]
        scale, shift = mod[:, :d], mod[:, d:]
        return ad.layernorm(x) * (1.0 + scale) + shift


class ResDiffHead(Module):
    """fields: eps_net MLP stack with per-layer adaLN; cond_proj; ensemble
    logits over LM hidden layers; DDPM schedule (T_r, linear beta range)."""

    def __init__(self, k, d_hidden=128, n_layers=4, d_lm=64, n_lm_layers=1,
                 t_r=T_R_DEFAULT, beta_start=BETA_START, beta_end=BETA_END, seed=0):
        if t_r < 2:
            raise BadT(f"T_r must be >= 2, got {t_r}")
        if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
            raise InvalidConfig("beta range must lie in (0, 1)")
        rng = np.random.default_rng(seed)
        self.k = k
        self.t_r = t_r
        self.d_hidden = d_hidden
        self.beta = np.linspace(beta_start, beta_end, t_r)
        self.alpha_bar = np.cumprod(1.0 - self.beta)
        self.cond_proj = Linear(rng, k, d_lm)
        self.layer_logits = Tensor(np.zeros(n_lm_layers), requires_grad=True)
        d_cond = d_lm + d_hidden  # condition vector + timestep embedding
        self.inp = Linear(rng, k, d_hidden)
        self.norms = [AdaLN(rng, d_hidden, d_cond) for _ in range(n_layers)]
        self.layers = [Linear(rng, d_hidden, d_hidden) for _ in range(n_layers)]
        self.out = Linear(rng, d_hidden, k)

    def eps_net(self, r_t, t, cond):
        """Predicted noise (L, K) given noisy residuals, step t, and the
        per-residue conditioning matrix."""
        length = r_t.shape[0]
        t_emb = nn.sinusoidal_embedding(np.full(length, t), self.d_hidden)
        full_cond = ad.concat([cond if isinstance(cond, Tensor) else Tensor(cond),
                               Tensor(t_emb)], axis=1)
        x = self.inp(r_t if isinstance(r_t, Tensor) else Tensor(r_t))
        for norm, layer in zip(self.norms, self.layers):
            x = x + ad.swish(layer(norm(x, full_cond)))
        return self.out(x)


def residual(z_cont, z_quant):
    """Quantization residual r = z_cont - z_quant."""
    a = z_cont.data if isinstance(z_cont, Tensor) else np.asarray(z_cont)
    b = z_quant.data if isinstance(z_quant, Tensor) else np.asarray(z_quant)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return a - b


def condition(z_quant, hidden_layers, head: ResDiffHead):
    """Per-residue conditioning c = z_quant @ W_quant + sum_i softmax(w)_i h_i."""
    z_quant = z_quant if isinstance(z_quant, Tensor) else Tensor(np.asarray(z_quant, dtype=np.float64))
    weights = ad.softmax(ad.reshape(head.layer_logits, (-1, 1, 1)), axis=0)
    stacked = ad.concat(
        [ad.reshape(h if isinstance(h, Tensor) else Tensor(h), (1,) + tuple(h.shape))
         for h in hidden_layers],
        axis=0,
    )
    return head.cond_proj(z_quant) + (weights * stacked).sum(axis=0)


def resdiff_loss(r, t, cond, head: ResDiffHead, rng):
    """DDPM epsilon-prediction MSE at step t (1-based, t in [1, T_r])."""
    if not 1 <= t <= head.t_r:
        raise BadT(f"t must be in [1, {head.t_r}], got {t}")
    r = np.asarray(r, dtype=np.float64)
    eps = rng.standard_normal(r.shape)
    ab = head.alpha_bar[t - 1]
    r_t = np.sqrt(ab) * r + np.sqrt(1.0 - ab) * eps
    pred = head.eps_net(r_t, t, cond)
    return ((pred - eps) ** 2).mean()


def resdiff_sample(cond, head: ResDiffHead, rng):
    """Ancestral DDPM sampling of residuals from pure noise; (L, K)."""
    length = cond.shape[0]
    r = rng.standard_normal((length, head.k))
    with ad.no_grad():
        for t in range(head.t_r, 0, -1):
            eps_hat = head.eps_net(r, t, cond).data
            beta = head.beta[t - 1]
            ab = head.alpha_bar[t - 1]
            mean = (r - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
            if t > 1:
                ab_prev = head.alpha_bar[t - 2]
                var = beta * (1.0 - ab_prev) / (1.0 - ab)
                r = mean + np.sqrt(var) * rng.standard_normal(r.shape)
            else:
                r = mean
    return r


def train_resdiff(samples, head: ResDiffHead, steps, seed=0, peak=1e-4, warmup=2000,
                  log_every=0):
    """Train the epsilon net on (residual, z_quant, hidden_layers) triples;
    the conditioning vector is recomputed each step so its projection and
    ensemble logits train too."""
    opt = Adam(head.parameters())
    rng = np.random.default_rng(seed)
    for step in range(steps):
        r, z_quant, hidden_layers = samples[int(rng.integers(len(samples)))]
        cond = condition(z_quant, hidden_layers, head)
        loss = resdiff_loss(r, int(rng.integers(1, head.t_r + 1)), cond, head, rng)
        opt.zero_grad()
        loss.backward()
        opt.step(lr=warmup_linear_decay(step, steps, peak=peak, warmup=warmup))
        if log_every and step % log_every == 0:
            print(f"resdiff step {step}: loss {loss.item():.4f}")
    return head
