"""Tokenizer: invariant features, LFQ, bit/index codec, token files,
reconstruction loss, short training runs."""

import numpy as np
import pytest

import bitfold.autodiff as ad
from bitfold import geometry as geo
from bitfold import tokenizer as tok
from bitfold.autodiff import Tensor
from bitfold.errors import IndexOutOfRange, ParseError


def make_structure(seed=0, length=16, chains=1):
    s, _ = geo.synth_backbone(geo.SynthSpec(length=length, chains=chains), seed=seed)
    return s


def test_mask_pad_ids():
    assert tok.mask_id(8) == 256
    assert tok.pad_id(8) == 257
    assert tok.mask_id(4) == 16


def test_bits_to_index_lsb_convention():
    # bit k=1 is the least significant bit
    assert tok.bits_to_index(np.array([[1.0, -1.0, -1.0]]))[0] == 1
    assert tok.bits_to_index(np.array([[-1.0, 1.0, -1.0]]))[0] == 2
    assert tok.bits_to_index(np.array([[1.0, 1.0, 1.0]]))[0] == 7


@pytest.mark.parametrize("k", [4, 8, 12])
def test_codec_bijection_exhaustive(k):
    indices = np.arange(2**k)
    bits = tok.index_to_bits(indices, k)
    assert bits.shape == (2**k, k)
    np.testing.assert_array_equal(tok.bits_to_index(bits), indices)


def test_index_out_of_range():
    with pytest.raises(IndexOutOfRange):
        tok.index_to_bits(np.array([16]), 4)
    with pytest.raises(IndexOutOfRange):
        tok.index_to_bits(np.array([-1]), 4)


def test_invariant_features_rigid_invariance():
    rng = np.random.default_rng(0)
    s = make_structure(0)
    moved = s.transformed(geo.random_rotation(rng), rng.normal(size=3) * 30)
    np.testing.assert_allclose(
        tok.invariant_features(moved), tok.invariant_features(s), atol=1e-9
    )


def test_encoder_tokens_rigid_invariant():
    rng = np.random.default_rng(1)
    s = make_structure(1)
    params = tok.TokenizerParams(tok.TokenizerConfig(k=4, width=32, blocks=1), seed=0)
    moved = s.transformed(geo.random_rotation(rng), rng.normal(size=3) * 30)
    with ad.no_grad():
        z_a = tok.encode(s, params).data
        z_b = tok.encode(moved, params).data
    np.testing.assert_allclose(z_a, z_b, atol=1e-9)


def test_lfq_sign_and_zero_convention():
    z = Tensor(np.array([[0.3, -0.7, 0.0]]))
    bits, _ = tok.lfq_quantize(z)
    np.testing.assert_array_equal(bits.data, [[1.0, -1.0, 1.0]])  # sign(0) = +1


def test_lfq_commitment_zero_at_unit_codes():
    z = Tensor(np.array([[1.0, -1.0], [-1.0, 1.0]]))
    _, losses = tok.lfq_quantize(z)
    assert losses["commitment"].item() == 0.0


def test_lfq_commitment_value():
    z = Tensor(np.array([[0.5, -0.5]]))
    _, losses = tok.lfq_quantize(z)
    assert losses["commitment"].item() == pytest.approx(0.25)


def test_lfq_entropy_prefers_balanced_bits():
    balanced = Tensor(np.array([[2.0], [-2.0]]))
    collapsed = Tensor(np.array([[2.0], [2.0]]))
    _, l_bal = tok.lfq_quantize(balanced)
    _, l_col = tok.lfq_quantize(collapsed)
    assert l_bal["entropy"].item() < l_col["entropy"].item()


def test_lfq_straight_through_gradient():
    z = Tensor(np.array([[0.3, -0.7]]), requires_grad=True)
    bits, _ = tok.lfq_quantize(z)
    (bits * np.array([[2.0, 3.0]])).sum().backward()
    np.testing.assert_array_equal(z.grad, [[2.0, 3.0]])  # identity surrogate


def test_token_file_roundtrip_indices():
    indices = np.array([0, 5, 255, tok.mask_id(8), tok.pad_id(8)])
    text = tok.format_token_file(8, indices=indices)
    k, again = tok.parse_token_file(text)
    assert k == 8
    np.testing.assert_array_equal(again, indices)


def test_token_file_bits_parse_to_indices():
    bits = tok.index_to_bits(np.array([3, 9]), 4)
    text = tok.format_token_file(4, bits=bits)
    _, indices = tok.parse_token_file(text)
    np.testing.assert_array_equal(indices, [3, 9])


def test_token_file_errors():
    with pytest.raises(ParseError):
        tok.parse_token_file("nope\n")
    with pytest.raises(ParseError) as exc:
        tok.parse_token_file("TOK v1 K=4 L=1\n99\n")
    assert exc.value.line_no == 2
    with pytest.raises(ParseError):
        tok.parse_token_file("TOK v1 K=4 L=3\n1\n2\n")


def test_decode_centered_on_ca_centroid():
    params = tok.TokenizerParams(tok.TokenizerConfig(k=4, width=32, blocks=1), seed=0)
    bits = tok.index_to_bits(np.arange(6) % 16, 4)
    with ad.no_grad():
        coords = tok.decode(Tensor(bits), params).data
    np.testing.assert_allclose(coords[:, 1, :].mean(axis=0), 0.0, atol=1e-9)


def test_reconstruction_loss_zero_on_rigid_copy():
    rng = np.random.default_rng(2)
    s = make_structure(2)
    moved = s.transformed(geo.random_rotation(rng), rng.normal(size=3) * 10)
    loss = tok.reconstruction_loss(Tensor(moved.coords), s)
    assert loss.item() < 1e-18


def test_reconstruction_loss_penalizes_mirror():
    s = make_structure(3, length=20)
    mirror = geo.BackboneStructure(s.coords * np.array([1.0, 1.0, -1.0]), s.chain_ids)
    loss_mirror = tok.reconstruction_loss(Tensor(mirror.coords), s)
    loss_self = tok.reconstruction_loss(Tensor(s.coords), s)
    assert loss_mirror.item() > loss_self.item() + 1.0


def test_short_training_reduces_loss():
    s = make_structure(4, length=12)
    cfg = tok.TokenizerConfig(k=4, width=32, blocks=1, lr_peak=1e-3, warmup=10)
    params, report = tok.train_tokenizer([s], cfg, seed=0, steps=120)
    del params
    # untrained params for comparison
    fresh = tok.TokenizerParams(cfg, seed=0)
    fresh_report = tok.reconstruction_report(fresh, [s])
    assert report.summary()["cont_rmsd"] < fresh_report.summary()["cont_rmsd"]


def test_reconstruction_report_shapes():
    s = make_structure(5, length=10)
    params = tok.TokenizerParams(tok.TokenizerConfig(k=4, width=32, blocks=1), seed=1)
    report = tok.reconstruction_report(params, [s, s])
    assert len(report.cont_rmsd) == 2
    assert all(0.0 <= t <= 1.0 for t in report.cont_tm + report.quant_tm)
