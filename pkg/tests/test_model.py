import dataclasses

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from pedfusion.model import (
    AudioNet,
    DetectHead,
    ModelConfig,
    RegressHead,
    SegDecoder,
    StudentNet,
    VisualNet,
    box_activation,
    canonical_gating,
    full_axis_conv,
    fuse,
)

SMALL = ModelConfig(input_size=64, seg_grid=8, feature_dim=32, audio_channels=6, visual_channels=5,
                    head_sizes=(24, 16), detect_hidden=8, kernels_per_scale=3)


def inputs(cfg, b=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    n = cfg.input_size
    return torch.rand(b, 4, n, n, generator=g) * 5, torch.rand(b, 3, n, n, generator=g)


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.feature_dim, cfg.audio_channels, cfg.visual_channels) == (512, 64, 64)
        assert cfg.time_widths == (3, 5, 7) and cfg.freq_heights == (3, 5, 7)
        assert cfg.head_sizes == (512, 256) and cfg.box_dim == 7
        assert cfg.gating_mode == "paper-literal"

    @pytest.mark.parametrize("bad", [dict(feature_dim=0), dict(gating_mode="both"),
                                     dict(box_dim=6), dict(seg_grid=16), dict(visual_backbone="vgg")])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            ModelConfig(**bad)

    def test_gating_aliases(self):
        assert canonical_gating("literal") == "paper-literal"
        assert canonical_gating("visual_only") == "visual-only"

    def test_roundtrip(self):
        assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL


class TestAudioNet:
    def test_default_shape(self):
        net = AudioNet(ModelConfig())
        out = net(torch.rand(2, 4, 256, 256))
        assert out.shape == (2, 64, 512)

    def test_kernel_extents(self):
        net = AudioNet(ModelConfig())
        assert [tuple(c.weight.shape[2:]) for c in net.time_convs] == [(256, 3), (256, 5), (256, 7)]
        assert [tuple(c.weight.shape[2:]) for c in net.freq_convs] == [(3, 256), (5, 256), (7, 256)]

    def test_shape_error(self):
        with pytest.raises(ValueError):
            AudioNet(SMALL)(torch.rand(1, 3, 64, 64))

    def test_zero_input_is_bias_image(self):
        torch.manual_seed(0)
        net = AudioNet(SMALL).eval()
        z = torch.zeros(3, 4, 64, 64)
        out = net(z)
        assert torch.equal(out[0], out[1]) and torch.equal(out[0], out[2])
        # conv outputs reduce to their biases, so everything is an affine image of biases
        bins = SMALL.pooled_bins
        parts = [F.relu(c.bias)[:, None].expand(-1, bins) for c in [*net.time_convs, *net.freq_convs]]
        n_time = len(net.time_convs)
        feat = torch.cat([torch.cat(parts[:n_time]).flatten(), torch.cat(parts[n_time:]).flatten()])
        expected = net.fc(feat).view(SMALL.audio_channels, SMALL.feature_dim)
        torch.testing.assert_close(out[0], expected)

    def test_full_axis_conv_matches_conv2d(self):
        torch.manual_seed(1)
        x = torch.randn(2, 4, 20, 33, dtype=torch.float64)
        for w in (3, 5, 7):
            conv = torch.nn.Conv2d(4, 3, kernel_size=(20, w)).double()
            ref = conv(x)[:, :, 0]
            fast = full_axis_conv(x.reshape(2, -1, 33), conv.weight, conv.bias)
            torch.testing.assert_close(fast, ref, atol=1e-12, rtol=1e-12)

    def test_time_translation_probe(self):
        torch.manual_seed(2)
        net = AudioNet(SMALL).double()
        spec = torch.rand(1, 4, 64, 64, dtype=torch.float64)
        spec[..., 20:23] += 3.0  # a test pattern in time
        base, _ = net.feature_maps(spec, circular=True)
        shifted, _ = net.feature_maps(torch.roll(spec, 1, dims=-1), circular=True)
        for a, b in zip(base, shifted):
            assert a.shape[-1] == 64
            torch.testing.assert_close(b, torch.roll(a, 1, dims=-1))

    def test_input_stats(self):
        net = AudioNet(SMALL)
        spec = torch.rand(1, 4, 64, 64)
        before = net(spec)
        net.set_input_stats(0.5, 2.0)
        torch.testing.assert_close(net(spec), AudioNet.forward(net, spec))
        net2 = AudioNet(SMALL)
        net2.load_state_dict(net.state_dict())
        net2.set_input_stats(0.0, 1.0)
        torch.testing.assert_close(net2(spec), before)
        torch.testing.assert_close(net(spec), net2((spec - 0.5) / 2.0))
        with pytest.raises(ValueError):
            net.set_input_stats(0.0, 0.0)


class TestVisual:
    def test_shape_and_determinism(self):
        net = VisualNet(ModelConfig()).eval()
        img = torch.rand(2, 3, 256, 256)
        out = net(img)
        assert out.shape == (2, 64, 512)
        assert torch.equal(out, net(img.clone()))

    def test_frozen_backbone_unchanged(self):
        pytest.importorskip("torchvision")
        cfg = dataclasses.replace(SMALL, visual_backbone="resnet18", freeze_backbone=True)
        model = StudentNet(cfg)
        before = {k: v.clone() for k, v in model.visual.backbone.state_dict().items()}
        spec, img = inputs(cfg)
        opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=1e-2)
        model.train()
        out = model(spec, img)
        (out.box.sum() + out.d_hat.sum() + out.seg.mean()).backward()
        opt.step()
        assert all(p.grad is None for p in model.visual.backbone.parameters())
        for k, v in model.visual.backbone.state_dict().items():
            assert torch.equal(v, before[k]), k
        assert not model.visual.backbone.training


class TestDetect:
    def test_range(self):
        torch.manual_seed(0)
        head = DetectHead(SMALL)
        x = torch.randn(1000, SMALL.visual_channels, SMALL.feature_dim) * 20
        d = head(x)
        assert d.shape == (1000,) and torch.all((d >= 0) & (d <= 1))

    def test_logit_zero(self):
        head = DetectHead(SMALL)
        torch.nn.init.zeros_(head.fc2.weight)
        torch.nn.init.zeros_(head.fc2.bias)
        assert head(torch.randn(3, SMALL.visual_channels, SMALL.feature_dim)).tolist() == [0.5] * 3


class TestFuse:
    def setup_method(self):
        g = torch.Generator().manual_seed(0)
        self.a = torch.randn(3, 6, 32, generator=g, dtype=torch.float64)
        self.v = torch.randn(3, 5, 32, generator=g, dtype=torch.float64)

    def test_literal_zero_gate(self):
        out = fuse(self.a, self.v, torch.zeros(3), "paper-literal")
        assert out.shape == (3, 32) and torch.count_nonzero(out) == 0

    def test_unit_gate_modes_agree(self):
        one = torch.ones(3)
        torch.testing.assert_close(fuse(self.a, self.v, one, "paper-literal"),
                                   fuse(self.a, self.v, one, "visual-only"))

    def test_visual_only_zero_gate(self):
        out = fuse(self.a, self.v, torch.zeros(3), "visual-only")
        torch.testing.assert_close(out, self.a.sum(dim=1), rtol=0, atol=0)

    def test_general(self):
        d = torch.tensor([0.2, 0.5, 0.9], dtype=torch.float64)
        lit = fuse(self.a, self.v, d, "paper-literal")
        torch.testing.assert_close(lit, d[:, None] * (self.a.sum(1) + self.v.sum(1)))
        vis = fuse(self.a, self.v, d, "visual-only")
        torch.testing.assert_close(vis, self.a.sum(1) + d[:, None] * self.v.sum(1))

    def test_attention_off(self):
        out = fuse(self.a, self.v, torch.zeros(3), "paper-literal", attention=False)
        torch.testing.assert_close(out, self.a.sum(1) + self.v.sum(1))

    def test_unbatched(self):
        out = fuse(self.a[0], self.v[0], 0.5)
        assert out.shape == (32,)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            fuse(self.a, self.v[..., :31], torch.ones(3))


class TestRegress:
    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_activation_contract(self, seed):
        g = torch.Generator().manual_seed(seed)
        raw = torch.randn(50, 7, generator=g) * 30
        out = box_activation(raw)
        assert torch.all(out[:, 3:6] > 0)
        assert torch.all((out[:, 6] > -np.pi) & (out[:, 6] <= np.pi))
        torch.testing.assert_close(out[:, :3], raw[:, :3])

    def test_zero_input_constant(self):
        torch.manual_seed(0)
        head = RegressHead(SMALL)
        out = head(torch.zeros(4, SMALL.feature_dim))
        assert torch.equal(out[0], out[3])
        x = torch.randn(2, SMALL.feature_dim)
        assert torch.equal(head(x), head(x.clone()))

    def test_layer_sizes(self):
        head = RegressHead(ModelConfig())
        dims = [m.out_features for m in head.mlp if isinstance(m, torch.nn.Linear)]
        assert dims == [512, 256, 7]


class TestSegDecoder:
    def test_shape_softmax(self):
        torch.manual_seed(0)
        dec = SegDecoder(ModelConfig())
        out = dec(torch.randn(2, 64, 512))
        assert out.shape == (2, 2, 256, 256)
        assert (out.sum(1) - 1).abs().max() < 1e-6
        assert out.min() >= 0 and out.max() <= 1

    def test_matches_stacked_reference(self):
        torch.manual_seed(1)
        dec = SegDecoder(SMALL).double()
        x = torch.randn(2, SMALL.audio_channels, SMALL.feature_dim, dtype=torch.float64)
        torch.testing.assert_close(dec(x), dec.forward_stacked(x), atol=1e-12, rtol=1e-12)


class TestStudent:
    def test_default_forward_shapes(self):
        model = StudentNet(ModelConfig()).eval()
        spec, img = inputs(ModelConfig(), b=1)
        out = model(spec, img, return_features=True)
        assert out.box.shape == (1, 7) and out.d_hat.shape == (1,) and out.seg.shape == (1, 2, 256, 256)
        assert out.audio_feat.shape == (1, 64, 512) and out.visual_feat.shape == (1, 64, 512)
        assert out.fused.shape == (1, 512)
        assert model(spec, img, with_seg=False).seg is None

    def test_literal_gate_annihilation(self):
        torch.manual_seed(0)
        model = StudentNet(SMALL).eval()
        torch.nn.init.constant_(model.detect.fc2.bias, -1e4)  # D_hat == 0 exactly
        boxes = []
        for seed in range(10):
            spec, img = inputs(SMALL, b=1, seed=seed)
            out = model(spec, img, with_seg=False, return_features=True)
            assert out.d_hat.item() == 0.0
            assert torch.count_nonzero(out.fused) == 0
            boxes.append(out.box)
        assert all(torch.equal(b, boxes[0]) for b in boxes)

    def test_visual_only_image_invariance(self):
        torch.manual_seed(0)
        model = StudentNet(dataclasses.replace(SMALL, gating_mode="visual-only")).eval()
        torch.nn.init.constant_(model.detect.fc2.bias, -1e4)
        for seed in range(10):
            spec, img = inputs(SMALL, b=1, seed=seed)
            other = torch.rand_like(img)
            a = model(spec, img, with_seg=False).box
            b = model(spec, other, with_seg=False).box
            assert torch.equal(a, b)

    def test_parameter_groups(self):
        groups = StudentNet(SMALL).parameter_groups()
        assert set(groups) == {"audio", "visual", "fusion_gate", "regress", "seg"}
