import itertools

import pytest
import torch

from codeprior_sr.networks import (
    AlignAttention,
    ConcatFusion,
    Decoder,
    Encoder,
    NetConfig,
    PatchDiscriminator,
    SRModel,
    VQAutoencoder,
    align_attention,
    bicubic_up,
    sr_forward,
)
from codeprior_sr.metrics import bicubic_baseline


def seeded_stage1(cfg=NetConfig(), seed=0):
    torch.manual_seed(seed)
    m = SRModel(cfg, stage=1)
    with torch.no_grad():
        m.codebook.normal_()
    return m


def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig(r_e=3)
    with pytest.raises(ValueError):
        NetConfig(scale=8)


# -- encoder ---------------------------------------------------------------


def test_encoder_shape():
    assert Encoder(4, 16, 8)(torch.rand(2, 3, 64, 64)).shape == (2, 8, 16, 16)


def test_encoder_zero_weights_give_zero_latents():
    enc = Encoder(4, 16, 8)
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
    assert torch.count_nonzero(enc(torch.rand(1, 3, 32, 32))) == 0


def test_encoder_deterministic():
    def run():
        torch.manual_seed(3)
        return Encoder(4, 16, 8)(torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(1)))

    assert torch.equal(run(), run())


def test_encoder_rejects_indivisible_input():
    with pytest.raises(ValueError, match="divisible"):
        Encoder(4, 8, 4)(torch.rand(1, 3, 30, 32))


SHAPES = [(r, s, n) for r, s, n in itertools.product((2, 4, 8), (1, 2, 4), (16, 32)) if r % s == 0]


@pytest.mark.parametrize("r_e,scale,size", SHAPES)
def test_shape_algebra(r_e, scale, size):
    cfg = NetConfig(n_z=4, K=8, width=8, lq_width=8, r_e=r_e, scale=scale, k=2)
    m = seeded_stage1(cfg)
    lr = torch.rand(1, 3, size, size)
    out = m(lr)
    hr = size * scale
    assert out.sr.shape == (1, 3, hr, hr)
    assert out.s.shape == (1, 1, hr, hr)
    assert out.lq_latents.shape == (1, 4, hr // r_e, hr // r_e)
    assert out.match.indices.shape == (1, hr // r_e, hr // r_e)
    rec, z, _, _ = VQAutoencoder(cfg)(torch.rand(1, 3, hr, hr))
    assert rec.shape == (1, 3, hr, hr) and z.shape[-1] == hr // r_e


# -- align attention -------------------------------------------------------


def test_single_key_collapse():
    aa = AlignAttention(6, 4)
    with torch.no_grad():
        aa.W_V.normal_()
    v = torch.randn(1, 1, 6)
    out = align_attention(torch.randn(1, 9, 6), v, aa)
    torch.testing.assert_close(out, (v @ aa.W_V).expand(1, 9, 6), rtol=1e-6, atol=1e-6)


def test_identical_keys_collapse():
    aa = AlignAttention(6, 4)
    with torch.no_grad():
        aa.W_V.normal_()
    v = torch.randn(6)
    out = aa(torch.randn(2, 7, 6), v.expand(2, 5, 6))
    torch.testing.assert_close(out, (v @ aa.W_V).expand(2, 7, 6), rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("n_lq,n_hq", [(1, 1), (16, 16), (64, 7), (256, 256)])
def test_attention_rows_sum_to_one(n_lq, n_hq):
    aa = AlignAttention(16, 32)
    a = aa.attention(torch.randn(2, n_lq, 16), torch.randn(2, n_hq, 16))
    assert (a.sum(-1) - 1).abs().max() < 1e-6


def test_attention_permutation_equivariance():
    aa = AlignAttention(8, 4)
    with torch.no_grad():
        aa.W_V.normal_()
    q, hq = torch.randn(1, 10, 8), torch.randn(1, 12, 8)
    perm = torch.randperm(12)
    torch.testing.assert_close(aa(q, hq), aa(q, hq[:, perm]), rtol=1e-6, atol=1e-6)


def test_attention_fresh_block_contributes_nothing():
    aa = AlignAttention(8)
    assert torch.count_nonzero(aa(torch.randn(1, 4, 8), torch.randn(1, 4, 8))) == 0


def test_attention_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        AlignAttention(8)(torch.randn(1, 4, 7), torch.randn(1, 4, 8))


# -- SR model --------------------------------------------------------------


def test_sr_shapes_32_to_64():
    out = sr_forward(torch.rand(1, 3, 32, 32), 1, seeded_stage1())
    assert out.sr.shape == (1, 3, 64, 64) and out.s.shape == (1, 1, 64, 64)


def test_constant_gray_smoke():
    out = seeded_stage1()(torch.full((2, 3, 16, 16), 0.5))
    assert torch.isfinite(out.sr).all() and torch.isfinite(out.s).all()


def test_untrained_model_output_is_bicubic():
    lr = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    out = seeded_stage1().double()(lr).sr
    ref = bicubic_baseline(lr[0].permute(1, 2, 0).numpy(), 2)
    unclipped = bicubic_up(lr, 2)[0].permute(1, 2, 0).numpy()
    assert abs(out[0].permute(1, 2, 0).detach().numpy() - unclipped).max() < 1e-12
    assert abs(unclipped.clip(0, 1) - ref).max() < 1e-12


def test_stage2_pass_through_equals_stage1():
    m1 = seeded_stage1()
    m2 = SRModel.from_stage1(m1)
    lr = torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(1))
    o1, o2 = m1(lr), m2(lr)
    assert torch.equal(o1.sr, o2.sr) and torch.equal(o1.s, o2.s)
    assert torch.equal(o1.match.indices, o2.match.indices)


def test_stage_separation_counters():
    m1 = seeded_stage1()
    lr = torch.rand(1, 3, 16, 16)
    m1(lr)
    m2 = SRModel.from_stage1(m1)
    m2(lr)
    m2(lr)
    # the guide is a copy, so m1 only counts its own call
    assert dict(m1.match_counts) == {"nearest": 1}
    assert dict(m2.guide.match_counts) == {"nearest": 3}
    assert dict(m2.match_counts) == {"topk": 2}


def test_stage_guards():
    m1 = seeded_stage1()
    with pytest.raises(ValueError, match="stage-1"):
        m1(torch.rand(1, 3, 16, 16), stage=2)
    with pytest.raises(ValueError, match="guide"):
        SRModel(NetConfig(), stage=2)(torch.rand(1, 3, 16, 16))
    with pytest.raises(ValueError):
        SRModel(NetConfig(), stage=3)
    with pytest.raises(ValueError, match="stage-1"):
        SRModel.from_stage1(SRModel.from_stage1(m1))


def test_uncertainty_does_not_backprop_into_decoder_path():
    m = seeded_stage1()
    out = m(torch.rand(1, 3, 16, 16))
    out.s.sum().backward()
    assert all(p.grad is None for p in m.lq_encoder.parameters())
    assert any(p.grad is not None for p in m.uncertainty.parameters())


def test_gradient_flows_to_encoder_through_quantizer():
    m = seeded_stage1()
    # close the concat fusion's lq branch, so the lq latents reach the output
    # only through the straight-through path; open the zero-initialised head
    with torch.no_grad():
        m.fusion.conv.weight[:, : m.cfg.n_z].zero_()
        m.head.net[-1].weight.normal_()
    out = m(torch.rand(1, 3, 16, 16))
    out.sr.pow(2).mean().backward()
    grads = [p.grad for p in m.lq_encoder.parameters()]
    assert any(g is not None and g.abs().sum() > 0 for g in grads)


def test_vq_straight_through_reaches_encoder():
    torch.manual_seed(0)
    vq = VQAutoencoder(NetConfig())
    rec, z, zq, _ = vq(torch.rand(1, 3, 32, 32))
    rec.mean().backward()
    assert vq.encoder.net[0].weight.grad.abs().sum() > 0


def test_concat_fusion_initial_pass_through():
    f = ConcatFusion(4)
    z_lq, z_q = torch.randn(1, 4, 3, 3), torch.randn(1, 4, 3, 3)
    torch.testing.assert_close(f(z_lq, z_q), z_q)


def test_discriminator_and_decoder_shapes():
    assert PatchDiscriminator()(torch.rand(2, 3, 32, 32)).shape == (2, 1, 8, 8)
    rgb, feats = Decoder(4, 8, 4)(torch.rand(1, 4, 4, 4))
    assert rgb.shape == (1, 3, 16, 16) and feats.shape == (1, 8, 16, 16)
