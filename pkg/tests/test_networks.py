import numpy as np
import pytest
import torch
from conftest import tiny_net
from hypothesis import given, settings, strategies as st

from cdgan.ct_ingest import PhaseLabel, phase_code
from cdgan.errors import ConfigurationError, FormatError, InvalidInputError
from cdgan.networks import (
    NetConfig,
    argmax_phase,
    build_cdgan,
    decode,
    discriminate,
    encode,
    load_checkpoint,
    predict_one,
    predict_phase,
    save_checkpoint,
    synthesize,
)


def _conv_params(cin, cout, k):
    return cin * cout * k * k + cout


def _bn(c):
    return 2 * c


def _count_cdgan(cfg: NetConfig):
    """Layer-by-layer parameter count, written independently of the modules."""
    w = cfg.width
    s = cfg.stages
    enc = _conv_params(1, w(0), 3) + _bn(w(0))
    for i in range(s):
        enc += _conv_params(w(i), w(i + 1), 4) + _bn(w(i + 1))
    enc += _conv_params(w(s), cfg.rep_dim, 3) + _bn(cfg.rep_dim)
    dec = _conv_params(cfg.rep_dim + 3, w(s), 3) + _bn(w(s))
    for i in range(s, 0, -1):
        dec += _conv_params(w(i), w(i - 1), 4) + _bn(w(i - 1))
    dec += _conv_params(w(0), 1, 3)
    d, ch = 0, 1
    for i in range(s):
        d += _conv_params(ch, w(i), 4)
        ch = w(i)
    d += 2 * _conv_params(ch, ch, 3) + _conv_params(ch, 1, 3)
    sh, sw = cfg.seed_size
    d += ch * sh * sw * 3 + 3
    return enc, dec, d


@pytest.mark.parametrize("cfg", [NetConfig(), tiny_net(), tiny_net(image_size=(32, 16), stages=3)])
def test_parameter_counts_match_oracle(cfg):
    b = build_cdgan(cfg)
    enc, dec, d = _count_cdgan(cfg)
    counts = {k: sum(p.numel() for p in m.parameters()) for k, m in b.modules.items()}
    assert counts == {"G_enc": enc, "G_dec": dec, "D": d}


def test_default_shapes():
    b = build_cdgan(NetConfig(), seed=0)
    x = torch.zeros(2, 1, 64, 64)
    rep = encode(b, x)
    assert rep.shape == (2, 128)
    assert b.modules["G_dec"].input_channels == 131
    out = discriminate(b, x)
    assert out.src_logits.shape == (2, 4, 4)
    assert out.cls_logits.shape == (2, 3)
    assert b.modules["D"].src.kernel_size == (3, 3)
    y = synthesize(b, x, phase_code([0, 2]))
    assert y.shape == (2, 64, 64)


def test_encoder_ends_relu_pool():
    rep = encode(build_cdgan(tiny_net(), seed=3), torch.randn(4, 1, 16, 16))
    assert torch.all(rep >= 0)


def test_decoder_output_is_bounded_and_code_sensitive():
    b = build_cdgan(tiny_net(init_std=0.3), seed=1)
    rep = torch.rand(2, 8) * 5
    outs = [decode(b, rep, phase_code([k, k])) for k in range(3)]
    for o in outs:
        assert o.shape == (2, 16, 16)
        assert float(o.detach().abs().max()) <= 1.0
    assert not torch.allclose(outs[0], outs[1])


def test_decoder_rejects_mismatched_batch():
    b = build_cdgan(tiny_net())
    with pytest.raises(InvalidInputError):
        decode(b, torch.zeros(2, 8), phase_code([0]))


def test_skip_variant():
    cfg = tiny_net(decoder_skips=True)
    b = build_cdgan(cfg)
    assert synthesize(b, torch.zeros(3, 16, 16), phase_code([0, 1, 2])).shape == (3, 16, 16)
    with pytest.raises(InvalidInputError):
        decode(b, torch.zeros(1, 8), phase_code([0]))


@pytest.mark.parametrize("kw", [dict(image_size=(18, 16)), dict(num_phases=4), dict(disc_norm="group")])
def test_invalid_config(kw):
    with pytest.raises(ConfigurationError):
        build_cdgan(tiny_net(**kw))


def test_wrong_image_size_rejected():
    with pytest.raises(ConfigurationError):
        discriminate(build_cdgan(tiny_net()), torch.zeros(1, 1, 32, 32))


def test_seeded_build_is_reproducible():
    a = build_cdgan(tiny_net(), seed=5).named_arrays()
    b = build_cdgan(tiny_net(), seed=5).named_arrays()
    c = build_cdgan(tiny_net(), seed=6).named_arrays()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-50, 50), min_size=3, max_size=3), min_size=1, max_size=10))
def test_cls_probs_on_simplex(rows):
    from cdgan.networks import DiscriminatorOutput
    p = DiscriminatorOutput(None, torch.tensor(rows, dtype=torch.float64)).cls_probs
    assert torch.all(p >= 0)
    assert torch.allclose(p.sum(1), torch.ones(len(rows), dtype=torch.float64), atol=1e-12)


def test_argmax_ties_go_to_lowest_index():
    assert argmax_phase([1 / 3, 1 / 3, 1 / 3]).tolist() == [0]
    assert argmax_phase([[0.2, 0.4, 0.4], [0.1, 0.1, 0.8]]).tolist() == [1, 2]


def test_predict_phase_is_batch_invariant():
    b = build_cdgan(tiny_net(init_std=0.2), seed=2)
    x = torch.randn(10, 16, 16)
    full = predict_phase(b, x, batch_size=64)
    chunked = predict_phase(b, x, batch_size=3)
    np.testing.assert_array_equal(full, chunked)
    assert isinstance(predict_one(b, x[0]), PhaseLabel)


def test_inference_does_not_touch_bn_statistics():
    b = build_cdgan(tiny_net())
    before = {k: v.clone() for k, v in b.named_arrays().items()}
    synthesize(b, torch.randn(4, 16, 16), phase_code([0, 1, 2, 0]))
    after = b.named_arrays()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    b = build_cdgan(tiny_net(), seed=9)
    p1 = save_checkpoint(tmp_path / "a.ckpt", b, iteration=7)
    back = load_checkpoint(p1)
    assert back.config == b.config
    a0, a1 = b.named_arrays(), back.named_arrays()
    assert all(torch.equal(a0[k], a1[k]) for k in a0)
    p2 = save_checkpoint(tmp_path / "b.ckpt", back, iteration=7)
    assert p1.read_bytes() == p2.read_bytes()
    x = torch.randn(3, 16, 16)
    assert torch.equal(synthesize(b, x, phase_code([0, 1, 2])), synthesize(back, x, phase_code([0, 1, 2])))


def test_corrupt_checkpoint(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"not a zip")
    with pytest.raises(FormatError):
        load_checkpoint(p)
