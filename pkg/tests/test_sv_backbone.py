import pytest
import torch
import torch.nn as nn

from paranoise_sv.dual_unet import ContractViolation, Variant
from paranoise_sv.model import ModelConfig, ParaNoiseSV
from paranoise_sv.sv_backbone import (AFF, AttentiveStatsPool, BottomUpFusion, ChannelAdapt,
                                      ERes2NetV2Block, Res2NetBlock, SVConfig)
from conftest import perturb_, tiny


class TestChannelAdapt:
    def test_d2_feature_into_s2(self):
        ca = ChannelAdapt(32, 32)
        out = ca(torch.randn(1, 32, 32, 100))
        assert out.shape == (1, 32, 32, 100)
        assert sum(p.numel() for p in ca.parameters()) > 0

    def test_zero_bias_zero_input(self):
        ca = ChannelAdapt(16, 64)
        with torch.no_grad():
            for m in ca.modules():
                if isinstance(m, nn.Conv2d):
                    m.bias.zero_()
        assert torch.count_nonzero(ca(torch.zeros(2, 16, 8, 8))) == 0

    def test_finite(self):
        assert torch.isfinite(ChannelAdapt(64, 128)(torch.randn(1, 64, 16, 20))).all()

    def test_misaligned(self):
        with pytest.raises(ContractViolation):
            ChannelAdapt(16, 32)(torch.randn(1, 16, 32, 40), reference=torch.randn(1, 32, 64, 80))


class TestRes2Net:
    def test_scale_one_is_plain_residual(self):
        block = Res2NetBlock(32, 32, scale=1).eval()
        x = torch.relu(torch.randn(2, 32, 8, 10))
        out = torch.relu(block.bn1(block.conv1(x)))
        out = torch.relu(block.bns[0](block.convs[0](out)))
        out = block.bn3(block.conv3(out))
        torch.testing.assert_close(block(x), torch.relu(out + x))
        assert len(block.convs) == 1

    @pytest.mark.parametrize("cls", [Res2NetBlock, ERes2NetV2Block])
    def test_shape_preserved(self, cls):
        x = torch.randn(2, 64, 16, 12)
        assert cls(64, 64).eval()(x).shape == x.shape

    @pytest.mark.parametrize("cls", [Res2NetBlock, ERes2NetV2Block])
    def test_zeroed_internals_are_identity(self, cls):
        block = cls(32, 32).eval()
        with torch.no_grad():
            for m in block.modules():
                if isinstance(m, nn.Conv2d):
                    m.weight.zero_()
        x = torch.relu(torch.randn(1, 32, 8, 8))  # block inputs are post-ReLU
        torch.testing.assert_close(block(x), x)

    def test_hierarchical_dependency(self):
        # group 1's output depends on group 0's input slice
        block = Res2NetBlock(32, 32, scale=2).eval()
        x = torch.randn(1, 32, 8, 8)
        feats = {}
        block.convs[1].register_forward_hook(lambda m, i, o: feats.__setitem__("g1", i[0]))
        block(x)
        ref = feats["g1"].clone()
        with torch.no_grad():
            block.convs[0].weight.mul_(2.0)
        block(x)
        assert not torch.equal(feats["g1"], ref)

    def test_v2_is_wider(self):
        r2 = Res2NetBlock(64, 128)
        v2 = ERes2NetV2Block(64, 128)
        assert v2.width * v2.scale > r2.width * r2.scale
        assert v2.fuse is not None and r2.fuse is None

    def test_bad_split(self):
        with pytest.raises(ValueError):
            Res2NetBlock(3, 3)


class TestAFF:
    def _saturate(self, aff, value):
        with torch.no_grad():
            last = aff.attention[-1]
            last.weight.zero_()
            last.bias.fill_(value)

    def test_gate_one_gives_first_branch(self):
        aff = AFF(32).eval()
        self._saturate(aff, 50.0)
        a, b = torch.randn(1, 32, 4, 4), torch.randn(1, 32, 4, 4)
        torch.testing.assert_close(aff(a, b), a)

    def test_gate_one_with_projection(self):
        aff = AFF(64, shallow_channels=32, stride=2).eval()
        self._saturate(aff, 50.0)
        a, b = torch.randn(1, 32, 8, 8), torch.randn(1, 64, 4, 4)
        torch.testing.assert_close(aff(a, b), aff.restructure(a))

    def test_half_gate_identical_branches(self):
        aff = AFF(16).eval()
        self._saturate(aff, 0.0)
        a = torch.randn(1, 16, 4, 4)
        torch.testing.assert_close(aff(a, a.clone()), a)

    def test_shape_and_finite(self):
        out = AFF(64, shallow_channels=32, stride=2)(torch.randn(2, 32, 16, 10),
                                                     torch.randn(2, 64, 8, 5))
        assert out.shape == (2, 64, 8, 5)
        assert torch.isfinite(out).all()

    def test_incompatible(self):
        with pytest.raises(ContractViolation):
            AFF(16)(torch.randn(1, 16, 4, 4), torch.randn(1, 16, 2, 2))


class TestBottomUpFusion:
    def test_s3_gated_out(self):
        fuse = BottomUpFusion(128, 256).eval()
        with torch.no_grad():
            fuse.attention[-1].weight.zero_()
            fuse.attention[-1].bias.fill_(-50.0)
        s3, s4 = torch.randn(1, 128, 16, 10), torch.randn(1, 256, 8, 5)
        torch.testing.assert_close(fuse(s3, s4), s4)

    def test_shape(self):
        out = BottomUpFusion(128, 256)(torch.randn(2, 128, 16, 10), torch.randn(2, 256, 8, 5))
        assert out.shape == (2, 256, 8, 5)
        assert torch.isfinite(out).all()

    def test_mismatch(self):
        with pytest.raises(ContractViolation):
            BottomUpFusion(128, 256)(torch.randn(1, 128, 8, 5), torch.randn(1, 256, 8, 5))


class TestASP:
    def test_uniform_attention_is_plain_stats(self):
        asp = AttentiveStatsPool(12, hidden=4)
        with torch.no_grad():
            asp.attention[-1].weight.zero_()
        x = torch.randn(3, 12, 40)
        out = asp(x)
        torch.testing.assert_close(out[:, :12], x.mean(-1))
        torch.testing.assert_close(out[:, 12:], x.std(-1, unbiased=False), atol=1e-5, rtol=1e-4)

    def test_single_frame_std_is_zero(self):
        out = AttentiveStatsPool(8)(torch.randn(2, 8, 1))
        assert torch.all(out[:, 8:] == 0)

    def test_std_non_negative_and_finite_grad(self):
        asp = AttentiveStatsPool(6)
        x = torch.randn(4, 6, 9, requires_grad=True)
        out = asp(x)
        assert torch.all(out[:, 6:] >= 0)
        out.sum().backward()
        assert torch.isfinite(x.grad).all()

    def test_flattens_channel_frequency(self):
        out = AttentiveStatsPool(4 * 8)(torch.randn(2, 4, 8, 10))
        assert out.shape == (2, 64)

    def test_valid_frames_crop(self):
        asp = AttentiveStatsPool(5)
        x = torch.randn(1, 5, 12)
        torch.testing.assert_close(asp(x, valid_frames=7), asp(x[..., :7]))


class TestExtractEmbeddings:
    def test_stage_channels(self):
        cfg = SVConfig()
        assert [c[1] for c in cfg.stage_channels] == [32, 64, 128, 256]
        assert cfg.embedding_dim == 192
        with pytest.raises(ValueError):
            SVConfig(stage_channels=[(16, 48), (48, 96), (96, 192), (192, 384)])

    def test_full_model_stage_outputs(self):
        model = ParaNoiseSV(ModelConfig()).eval()
        outs = []
        for s in model.sv.stages:
            s.register_forward_hook(lambda m, i, o: outs.append(o.shape[1]))
        with torch.no_grad():
            emb = model(torch.randn(1, 64, 24)).embedding
        assert outs == [32, 64, 128, 256]
        assert emb.final.shape == (1, 192)
        assert emb.initial.shape == (1, 192)
        assert emb.pooled_initial.shape == (1, 2 * 128 * 8)

    def test_initial_embedding_ignores_sv_stages(self):
        model = tiny().eval()
        x = torch.randn(2, 64, 40)
        with torch.no_grad():
            e0 = model(x).embedding
            perturb_(model.sv.stages[1:])
            perturb_(model.sv.fc_final)
            e1 = model(x).embedding
        assert torch.equal(e0.initial, e1.initial)
        assert not torch.equal(e0.final, e1.final)

    def test_deterministic_cosine_one(self):
        model = tiny().eval()
        x = torch.randn(1, 64, 50)
        with torch.no_grad():
            a, b = model.embed(x), model.embed(x.clone())
        assert torch.equal(a, b)
        cos = torch.nn.functional.cosine_similarity(a, b)
        torch.testing.assert_close(cos, torch.ones(1))

    def test_final_path_reads_se_decoder(self):
        model = tiny().eval()
        x = torch.randn(1, 64, 32)
        with torch.no_grad():
            ref = model(x).embedding.final
            perturb_(model.sv.stages[2].adapt)
            assert not torch.equal(ref, model(x).embedding.final)

    def test_gradient_reaches_se_encoder(self):
        model = tiny(Variant.ENC_ONLY).train()
        model(torch.randn(4, 64, 32)).embedding.final.square().sum().backward()
        params = list(model.se.stem.parameters()) + list(model.se.encoder.parameters())
        total = sum(p.numel() for p in params)
        hit = sum(int(torch.count_nonzero(p.grad)) for p in params if p.grad is not None)
        assert hit / total >= 0.99
