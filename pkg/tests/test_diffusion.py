"""Absorbing diffusion: schedule, corruption, losses, posterior, generation."""

import numpy as np
import pytest

from bitfold import diffusion as dfn
from bitfold import tokenizer as tok
from bitfold.autodiff import Tensor
from bitfold.errors import BadT, HeadMismatch, ModeInputMissing


def make_state(rng, length=8, k=3):
    seq = rng.integers(0, 20, size=length)
    bits = np.where(rng.random((length, k)) < 0.5, 1.0, -1.0)
    return dfn.TokenState.observed(seq, bits)


# -- schedule ----------------------------------------------------------------

def test_schedule_linear_values():
    s = dfn.make_schedule(10)
    assert s.alpha_bar[5] == pytest.approx(0.5)
    assert s.alpha_bar[10] == 0.0
    assert s.beta[1] == pytest.approx(1 - 1 / 10)
    assert np.all(np.diff(s.alpha_bar) < 0)


def test_schedule_bad_t():
    with pytest.raises(BadT):
        dfn.make_schedule(1)


def test_schedule_weightings():
    uniform = dfn.make_schedule(10, weighting="uniform")
    invt = dfn.make_schedule(10, weighting="inv-t")
    assert np.all(uniform.lambda_w == 1.0)
    assert invt.lambda_w[4] == pytest.approx(0.25)


# -- forward corruption -------------------------------------------------------

def test_forward_mask_identity_at_t0():
    rng = np.random.default_rng(0)
    x0 = make_state(rng)
    xt = dfn.forward_mask(x0, dfn.make_schedule(10), 0, rng)
    assert not xt.mask_seq.any() and not xt.mask_struct.any()


def test_forward_mask_frequency_monte_carlo():
    # alpha_bar = 0.7 at t=3, T=10 -> mask probability 0.30
    rng = np.random.default_rng(1)
    schedule = dfn.make_schedule(10)
    x0 = make_state(rng, length=8)
    hits = sum(dfn.forward_mask(x0, schedule, 3, rng).mask_struct.sum() for _ in range(10_000))
    assert hits / (8 * 10_000) == pytest.approx(0.30, abs=0.015)


def test_forward_mask_composition_matches_direct():
    """Composing per-step kernels equals one-shot masking with 1 - alpha_bar_t."""
    rng = np.random.default_rng(2)
    schedule = dfn.make_schedule(6)
    length, t_target, n = 8, 4, 10_000
    composed_counts = np.zeros(length)
    for _ in range(n):
        masked = np.zeros(length, dtype=bool)
        for t in range(1, t_target + 1):
            # per-step kernel: survive with probability beta_t
            masked |= rng.random(length) >= schedule.beta[t]
        composed_counts += masked
    p_direct = 1.0 - schedule.alpha_bar[t_target]
    expected = p_direct
    observed = composed_counts.mean() / n
    # chi-square over the pooled Bernoulli counts
    total = length * n
    obs = np.array([composed_counts.sum(), total - composed_counts.sum()])
    exp = np.array([expected * total, (1 - expected) * total])
    chi2 = ((obs - exp) ** 2 / exp).sum()
    assert chi2 < 6.635  # 1 dof, p > 0.01
    assert observed == pytest.approx(p_direct, abs=0.02)


def test_forward_mask_respects_pad():
    rng = np.random.default_rng(3)
    x0 = make_state(rng)
    x0.pad[2] = True
    schedule = dfn.make_schedule(4)
    for _ in range(50):
        xt = dfn.forward_mask(x0, schedule, 4, rng)
        assert not xt.mask_seq[2] and not xt.mask_struct[2]


# -- losses ------------------------------------------------------------------

def _perfect_output(x0, k, head):
    length = len(x0)
    seq_logits = np.full((length, 20), -30.0)
    seq_logits[np.arange(length), x0.seq] = 30.0
    if head == "index":
        struct = np.full((length, 2**k), -30.0)
        struct[np.arange(length), tok.bits_to_index(x0.struct_bits)] = 30.0
    else:
        struct = np.full((length, k, 2), -30.0)
        targets = (x0.struct_bits > 0).astype(int)
        for i in range(length):
            struct[i, np.arange(k), targets[i]] = 30.0
        struct = struct.reshape(length, 2 * k)
    return dfn.LMOutput(seq_logits=Tensor(seq_logits), struct_logits=Tensor(struct), head=head)


@pytest.mark.parametrize("head", ["index", "bit"])
def test_loss_zero_for_perfect_prediction(head):
    rng = np.random.default_rng(4)
    x0 = make_state(rng)
    schedule = dfn.make_schedule(10)
    xt = dfn.forward_mask(x0, schedule, 8, rng)
    out = _perfect_output(x0, 3, head)
    loss_fn = dfn.loss_index if head == "index" else dfn.loss_bit
    assert loss_fn(out, x0, xt, 8, schedule).item() == pytest.approx(0.0, abs=1e-12)


def test_loss_uniform_values():
    rng = np.random.default_rng(5)
    k = 3
    x0 = make_state(rng, k=k)
    schedule = dfn.make_schedule(10)
    xt = x0.copy()
    xt.mask_struct[:] = True  # struct fully masked, seq untouched
    length = len(x0)
    uniform_index = dfn.LMOutput(
        seq_logits=Tensor(np.zeros((length, 20))),
        struct_logits=Tensor(np.zeros((length, 2**k))), head="index",
    )
    uniform_bit = dfn.LMOutput(
        seq_logits=Tensor(np.zeros((length, 20))),
        struct_logits=Tensor(np.zeros((length, 2 * k))), head="bit",
    )
    assert dfn.loss_index(uniform_index, x0, xt, 5, schedule).item() == pytest.approx(np.log(2**k))
    assert dfn.loss_bit(uniform_bit, x0, xt, 5, schedule).item() == pytest.approx(k * np.log(2))


def test_loss_zero_when_nothing_masked():
    rng = np.random.default_rng(6)
    x0 = make_state(rng)
    schedule = dfn.make_schedule(10)
    out = _perfect_output(x0, 3, "bit")
    out.seq_logits = Tensor(np.zeros((len(x0), 20)))  # even bad logits cost nothing
    assert dfn.loss_bit(out, x0, x0, 3, schedule).item() == 0.0


def test_head_mismatch():
    rng = np.random.default_rng(7)
    x0 = make_state(rng)
    schedule = dfn.make_schedule(10)
    out = _perfect_output(x0, 3, "bit")
    with pytest.raises(HeadMismatch):
        dfn.loss_index(out, x0, x0, 3, schedule)


def test_bit_loss_equals_index_loss_at_k1():
    rng = np.random.default_rng(8)
    length = 6
    x0 = make_state(rng, length=length, k=1)
    schedule = dfn.make_schedule(10)
    xt = dfn.forward_mask(x0, schedule, 7, rng)
    logits = rng.normal(size=(length, 2))
    seq_logits = rng.normal(size=(length, 20))
    out_bit = dfn.LMOutput(Tensor(seq_logits), Tensor(logits.copy()), head="bit")
    # index head with codebook {0, 1}: column order matches (bit=-1 -> index 0)
    out_idx = dfn.LMOutput(Tensor(seq_logits), Tensor(logits.copy()), head="index")
    a = dfn.loss_bit(out_bit, x0, xt, 7, schedule).item()
    b = dfn.loss_index(out_idx, x0, xt, 7, schedule).item()
    assert a == pytest.approx(b, abs=1e-12)


# -- posterior ----------------------------------------------------------------

def test_unmask_probability_formula():
    schedule = dfn.make_schedule(10)
    # alpha_bar: t=6 -> 0.4, t=4 -> 0.6; (0.6 - 0.4) / (1 - 0.4) = 1/3
    assert dfn.unmask_probability(schedule, 6, 4) == pytest.approx(1 / 3)


def test_posterior_step_t1_unmasks_all():
    rng = np.random.default_rng(9)
    x0 = make_state(rng)
    xt = x0.copy()
    xt.mask_seq[:] = True
    xt.mask_struct[:] = True
    schedule = dfn.make_schedule(10)
    out = dfn.posterior_step(xt, x0, 1, rng, schedule)
    assert out.fully_unmasked()
    np.testing.assert_array_equal(out.seq, x0.seq)


def test_posterior_never_remasks():
    rng = np.random.default_rng(10)
    x0 = make_state(rng)
    schedule = dfn.make_schedule(10)
    xt = dfn.forward_mask(x0, schedule, 9, rng)
    state = xt
    for t in range(9, 0, -1):
        nxt = dfn.posterior_step(state, x0, t, rng, schedule)
        assert not (nxt.mask_seq & ~state.mask_seq).any()
        assert not (nxt.mask_struct & ~state.mask_struct).any()
        state = nxt
    assert state.fully_unmasked()


def test_posterior_matches_bruteforce_enumeration():
    """Exact check: the implemented unmask probability reproduces the Bayes
    posterior of the forward kernel, enumerated by hand, over a vocab
    {a, b, MASK}, L=2, T=3 chain; total variation < 1e-12."""
    schedule = dfn.make_schedule(3)
    for t in range(1, 4):
        a_t = schedule.alpha_bar[t]
        a_s = schedule.alpha_bar[t - 1]
        if a_t >= 1.0:
            continue
        # forward: x_{t-1}=x0 survives to t with alpha_bar_t; P(x_{t-1}=x0) = a_s
        # posterior for x_t = MASK:
        p_keep = a_s * (1.0 - (a_t / a_s if a_s > 0 else 0.0))  # x_{t-1}=x0, masked at step t
        p_was_masked = 1.0 - a_s
        exact_unmask = a_s * 1.0 - a_t  # P(x_{t-1} = x0, x_t = M) numerator: a_s - a_t
        exact = exact_unmask / (exact_unmask + p_was_masked)
        impl = dfn.unmask_probability(schedule, t)
        assert abs(impl - exact) < 1e-12
        del p_keep
        # joint over 2 independent positions: TV of product distributions
        probs_impl = np.array([impl, 1 - impl])
        probs_exact = np.array([exact, 1 - exact])
        joint_impl = np.outer(probs_impl, probs_impl).ravel()
        joint_exact = np.outer(probs_exact, probs_exact).ravel()
        assert 0.5 * np.abs(joint_impl - joint_exact).sum() < 1e-12


def test_posterior_step_empirical_frequency():
    rng = np.random.default_rng(11)
    x0 = make_state(rng, length=4)
    xt = x0.copy()
    xt.mask_struct[:] = True
    schedule = dfn.make_schedule(10)
    p = dfn.unmask_probability(schedule, 6)
    hits = sum(
        (~dfn.posterior_step(xt, x0, 6, rng, schedule).mask_struct).sum()
        for _ in range(5000)
    )
    assert hits / (4 * 5000) == pytest.approx(p, abs=0.02)


# -- prediction sampling and generation ---------------------------------------

def test_sample_prediction_bit_confidence_is_product():
    rng = np.random.default_rng(12)
    length, k = 3, 2
    x0 = make_state(rng, length=length, k=k)
    xt = x0.copy()
    xt.mask_struct[:] = True
    logits = np.zeros((length, 2 * k))
    logits[:, 1::2] = 5.0  # strongly favor bit = +1 everywhere
    out = dfn.LMOutput(Tensor(np.zeros((length, 20))), Tensor(logits), head="bit")
    pred = dfn.sample_prediction(out, xt, 1.0, rng, greedy=True)
    p_one = 1.0 / (1.0 + np.exp(-5.0))
    np.testing.assert_array_equal(pred.state.struct_bits, np.ones((length, k)))
    assert pred.conf_struct[0] == pytest.approx(p_one**k)


class OracleModel:
    """Always predicts one fixed state, with certainty."""

    def __init__(self, x0, T=10):
        self.x0 = x0
        self.k = x0.k
        self.schedule = dfn.make_schedule(T)

    def forward(self, state, position_indices=None):
        length = len(state)
        seq_logits = np.full((length, 20), -30.0)
        seq_logits[np.arange(length), self.x0.seq] = 30.0
        struct = np.full((length, self.k, 2), -30.0)
        targets = (self.x0.struct_bits > 0).astype(int)
        for i in range(length):
            struct[i, np.arange(self.k), targets[i]] = 30.0
        return dfn.LMOutput(
            Tensor(seq_logits), Tensor(struct.reshape(length, 2 * self.k)), head="bit"
        )


def test_generate_folding_preserves_sequence():
    rng = np.random.default_rng(13)
    x0 = make_state(rng, length=6)
    model = OracleModel(x0)
    out = dfn.generate(model, 6, mode="folding", steps=5, rng=rng, seq=x0.seq)
    np.testing.assert_array_equal(out.seq, x0.seq)
    assert out.fully_unmasked()


def test_generate_oracle_recovers_tokens():
    rng = np.random.default_rng(14)
    x0 = make_state(rng, length=6)
    model = OracleModel(x0)
    for strategy in ("stochastic", "confidence"):
        out = dfn.generate(model, 6, mode="unconditional", steps=10, strategy=strategy, rng=rng)
        np.testing.assert_array_equal(out.struct_bits, x0.struct_bits)
        np.testing.assert_array_equal(out.seq, x0.seq)


def test_generate_single_step_unmasks_everything():
    rng = np.random.default_rng(15)
    x0 = make_state(rng, length=5)
    model = OracleModel(x0)
    out = dfn.generate(model, 5, steps=1, rng=rng)
    assert out.fully_unmasked()


def test_generate_mode_input_missing():
    rng = np.random.default_rng(16)
    model = OracleModel(make_state(rng, length=4))
    with pytest.raises(ModeInputMissing):
        dfn.generate(model, 4, mode="folding", steps=5, rng=rng)
    with pytest.raises(ModeInputMissing):
        dfn.generate(model, 4, mode="inverse_folding", steps=5, rng=rng)


def test_generate_inverse_folding_preserves_struct():
    rng = np.random.default_rng(17)
    x0 = make_state(rng, length=6)
    model = OracleModel(x0)
    out = dfn.generate(model, 6, mode="inverse_folding", steps=5, rng=rng,
                       struct_bits=x0.struct_bits)
    np.testing.assert_array_equal(out.struct_bits, x0.struct_bits)
