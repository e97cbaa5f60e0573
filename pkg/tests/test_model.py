import math

import numpy as np
import pytest
import torch

from mtaffect.errors import InputShapeError, ValidationError
from mtaffect.model import (
    FeaturePyramid,
    ModelConfig,
    PYRAMID_STRIDES,
    TaskHeads,
    build_model,
    load_backbone_weights,
    pool_and_concat,
)

from conftest import random_images


def expected_level_sizes(h, w):
    """Shape-trace oracle: plain stride arithmetic with ceil at each stage."""
    return [(math.ceil(h / s), math.ceil(w / s)) for s in PYRAMID_STRIDES]


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.concat_dim == 1024
        assert cfg.input_size == (112, 112)

    def test_invalid_sizes_rejected(self):
        with pytest.raises(ValidationError):
            ModelConfig(input_size=(100, 100))
        with pytest.raises(ValidationError):
            ModelConfig(input_size=(0, 32))

    def test_field_ranges(self):
        with pytest.raises(ValidationError):
            ModelConfig(num_expressions=1)
        with pytest.raises(ValidationError):
            ModelConfig(num_aus=0)
        with pytest.raises(ValidationError):
            ModelConfig(pyramid_channels=0)
        with pytest.raises(ValidationError):
            ModelConfig(va_bounding="sigmoid")
        with pytest.raises(ValidationError):
            ModelConfig(backbone_variant="vgg")

    def test_round_trip_dict(self):
        cfg = ModelConfig(backbone_variant="tiny", pyramid_channels=8, input_size=(64, 64), seed=3)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestBackboneShapes:
    @pytest.mark.parametrize("size", [(112, 112), (64, 64), (32, 32)])
    def test_tiny_stage_sizes(self, size):
        cfg = ModelConfig(backbone_variant="tiny", pyramid_channels=8, input_size=size)
        model = build_model(cfg)
        stages = model.backbone_stages(torch.zeros(1, 3, *size))
        assert [tuple(s.shape[-2:]) for s in stages] == expected_level_sizes(*size)
        assert [s.shape[1] for s in stages] == [8, 16, 32, 64]

    @pytest.mark.parametrize("variant,channels", [
        ("resnet18", [64, 128, 256, 512]),
        ("resnet50", [256, 512, 1024, 2048]),
    ])
    def test_resnet_stage_sizes(self, variant, channels):
        cfg = ModelConfig(backbone_variant=variant, pyramid_channels=16, input_size=(64, 64))
        model = build_model(cfg)
        stages = model.backbone_stages(torch.zeros(1, 3, 64, 64))
        assert [tuple(s.shape[-2:]) for s in stages] == expected_level_sizes(64, 64)
        assert [s.shape[1] for s in stages] == channels

    def test_resnet18_ceil_at_112(self):
        cfg = ModelConfig(backbone_variant="resnet18", pyramid_channels=16, input_size=(112, 112))
        model = build_model(cfg)
        stages = model.backbone_stages(torch.zeros(1, 3, 112, 112))
        assert [tuple(s.shape[-2:]) for s in stages] == [(28, 28), (14, 14), (7, 7), (4, 4)]

    def test_wrong_input_shape_rejected(self, tiny_model):
        with pytest.raises(InputShapeError):
            tiny_model.backbone_stages(torch.zeros(1, 3, 64, 64))
        with pytest.raises(InputShapeError):
            tiny_model.backbone_stages(torch.zeros(1, 1, 32, 32))

    def test_non_finite_input_rejected(self, tiny_model):
        bad = torch.full((1, 3, 32, 32), float("nan"), dtype=torch.float64)
        with pytest.raises(ValidationError):
            tiny_model(bad)


def nearest_upsample_oracle(arr: np.ndarray, factor: int) -> np.ndarray:
    """Hand-trace oracle for nearest-neighbor upsampling: repeat each cell."""
    return np.repeat(np.repeat(arr, factor, axis=-2), factor, axis=-1)


class TestFeaturePyramidFusion:
    def make_stages(self, sizes=((16, 16), (8, 8), (4, 4), (2, 2)), channels=(1, 1, 1, 1), fill=0.0):
        return [
            torch.full((1, c, *hw), fill, dtype=torch.float64)
            for c, hw in zip(channels, sizes)
        ]

    def zero_pyramid(self, in_channels=(1, 1, 1, 1), d=1):
        fpn = FeaturePyramid(in_channels, d).double()
        with torch.no_grad():
            for conv in fpn.lateral:
                conv.weight.zero_()
                conv.bias.zero_()
        return fpn

    def test_zero_laterals_give_zero_levels(self):
        fpn = self.zero_pyramid()
        stages = self.make_stages(fill=3.5)
        levels = fpn(stages)
        for lv in levels:
            assert torch.all(lv == 0)

    def test_deepest_lateral_propagates_by_powers_of_two(self):
        fpn = self.zero_pyramid()
        with torch.no_grad():
            fpn.lateral[3].weight.fill_(1.0)  # deepest lateral passes its input through
        stages = self.make_stages()
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        stages[3] = torch.tensor(m, dtype=torch.float64).reshape(1, 1, 2, 2)
        levels = fpn(stages)
        for level_index in range(4):
            expected = nearest_upsample_oracle(m, 2 ** (3 - level_index))
            assert np.array_equal(levels[level_index].detach().squeeze().numpy(), expected)

    def test_identity_lateral_keeps_deepest_level_exact(self):
        d = 4
        fpn = self.zero_pyramid(in_channels=(d, d, d, d), d=d)
        with torch.no_grad():
            fpn.lateral[3].weight.copy_(torch.eye(d).reshape(d, d, 1, 1))
        stages = self.make_stages(channels=(d, d, d, d))
        stages[3] = torch.randn(1, d, 2, 2, dtype=torch.float64)
        levels = fpn(stages)
        assert torch.equal(levels[3], stages[3])

    def test_top_down_path_reaches_shallowest_level(self):
        torch.manual_seed(0)
        fpn = FeaturePyramid((1, 1, 1, 1), 2).double()
        with torch.no_grad():
            for conv in fpn.lateral[:3]:
                conv.bias.zero_()
        stages = self.make_stages()
        stages[3] = torch.randn(1, 1, 2, 2, dtype=torch.float64)
        levels = fpn(stages)
        assert torch.any(levels[0] != 0)

    def test_zeroed_deepest_lateral_zeroes_p5(self):
        torch.manual_seed(0)
        fpn = FeaturePyramid((1, 1, 1, 1), 2).double()
        with torch.no_grad():
            fpn.lateral[3].weight.zero_()
            fpn.lateral[3].bias.zero_()
        stages = self.make_stages(fill=1.0)
        levels = fpn(stages)
        assert torch.all(levels[3] == 0)

    def test_wrong_stage_count_rejected(self):
        fpn = FeaturePyramid((1, 1, 1, 1), 2).double()
        with pytest.raises(ValidationError):
            fpn(self.make_stages()[:3])

    def test_ceil_rounded_deepest_stage_is_cropped(self):
        # 7 -> upsample(4) = 8, cropped to 7: values still exact copies
        fpn = self.zero_pyramid(in_channels=(1, 1), d=1)
        fpn_small = FeaturePyramid((1, 1), 1).double()
        with torch.no_grad():
            fpn_small.lateral[0].weight.zero_()
            fpn_small.lateral[0].bias.zero_()
            fpn_small.lateral[1].weight.fill_(1.0)
            fpn_small.lateral[1].bias.zero_()
        deep = torch.arange(16, dtype=torch.float64).reshape(1, 1, 4, 4)
        shallow = torch.zeros(1, 1, 7, 7, dtype=torch.float64)
        levels = fpn_small([shallow, deep])
        expected = nearest_upsample_oracle(deep.squeeze().numpy(), 2)[:7, :7]
        assert np.array_equal(levels[0].detach().squeeze().numpy(), expected)


class TestPoolAndConcat:
    def test_constant_levels_concatenate_blockwise(self):
        d = 3
        consts = [0.5, -1.0, 2.0, 0.25]
        levels = [
            torch.full((1, d, hw, hw), c, dtype=torch.float64)
            for c, hw in zip(consts, (8, 4, 2, 1))
        ]
        out = pool_and_concat(levels).squeeze(0)
        expected = torch.tensor(sum(([c] * d for c in consts), []), dtype=torch.float64)
        assert torch.equal(out, expected)

    def test_concat_length_is_4d(self):
        d = 256
        levels = [torch.zeros(1, d, s, s) for s in (8, 4, 2, 1)]
        assert pool_and_concat(levels).shape[-1] == 1024

    def test_zero_levels_give_zero_vector(self):
        levels = [torch.zeros(1, 4, s, s) for s in (8, 4, 2, 1)]
        assert torch.all(pool_and_concat(levels) == 0)

    def test_wrong_level_count_rejected(self):
        with pytest.raises(ValidationError):
            pool_and_concat([torch.zeros(1, 4, 8, 8)] * 3)

    def test_pooled_equals_spatial_mean(self, tiny_model, rng):
        feats = tiny_model.pyramid_features(random_images(rng, 2))
        for level, pooled in zip(feats.levels, feats.pooled):
            assert torch.allclose(pooled, level.mean(dim=(-2, -1)), atol=0, rtol=0)
        assert torch.equal(feats.concat, torch.cat(feats.pooled, dim=-1))


class TestHeads:
    def test_zero_weights_give_zero_outputs(self):
        heads = TaskHeads(32, 7, 12, "tanh").double()
        with torch.no_grad():
            for layer in (heads.va, heads.expr, heads.au):
                layer.weight.zero_()
                layer.bias.zero_()
        pred = heads(torch.randn(32, dtype=torch.float64))
        assert torch.all(pred.va == 0)
        assert torch.all(pred.expr_logits == 0)
        assert torch.all(pred.au_logits == 0)

    def test_tanh_bounds_va(self, rng):
        heads = TaskHeads(16, 7, 12, "tanh").double()
        pred = heads(torch.tensor(rng.normal(size=16)))
        assert torch.all(pred.va.abs() < 1.0)
        # saturated pre-activations may round to exactly +-1 in floats
        with torch.no_grad():
            heads.va.weight.fill_(100.0)
        saturated = heads(torch.tensor(rng.normal(size=16)))
        assert torch.all(saturated.va.abs() <= 1.0)

    def test_linear_mode_is_unbounded(self):
        heads = TaskHeads(4, 7, 12, "linear").double()
        with torch.no_grad():
            heads.va.weight.fill_(10.0)
            heads.va.bias.zero_()
        pred = heads(torch.ones(4, dtype=torch.float64))
        assert torch.all(pred.va == 40.0)

    def test_one_hot_rows_select_concat_entries(self):
        heads = TaskHeads(8, 7, 12, "linear").double()
        with torch.no_grad():
            heads.expr.weight.zero_()
            heads.expr.bias.zero_()
            for row in range(7):
                heads.expr.weight[row, row] = 1.0
        concat = torch.arange(8, dtype=torch.float64)
        pred = heads(concat)
        assert torch.equal(pred.expr_logits, concat[:7])

    def test_length_mismatch_rejected(self):
        heads = TaskHeads(8, 7, 12, "tanh")
        with pytest.raises(ValidationError):
            heads(torch.zeros(9))


class TestFullModel:
    def test_deterministic_forward(self, tiny_model, rng):
        x = random_images(rng, 2)
        p1 = tiny_model(x)
        p2 = tiny_model(x)
        assert torch.equal(p1.va, p2.va)
        assert torch.equal(p1.expr_logits, p2.expr_logits)
        assert torch.equal(p1.au_logits, p2.au_logits)

    def test_same_seed_same_weights(self, tiny_config):
        m1 = build_model(tiny_config, "double")
        m2 = build_model(tiny_config, "double")
        for p1, p2 in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(p1, p2)

    def test_different_seed_different_weights(self, tiny_config):
        from dataclasses import replace

        m1 = build_model(tiny_config, "double")
        m2 = build_model(replace(tiny_config, seed=tiny_config.seed + 1), "double")
        assert any(not torch.equal(p1, p2) for p1, p2 in zip(m1.parameters(), m2.parameters()))

    def test_batch_is_order_preserving(self, tiny_model, rng):
        x = random_images(rng, 4)
        batched = tiny_model(x)
        for i in range(4):
            single = tiny_model(x[i])
            assert torch.allclose(batched.va[i], single.va, atol=1e-12, rtol=0)
            assert torch.allclose(batched.expr_logits[i], single.expr_logits, atol=1e-12, rtol=0)

    def test_single_image_api_unbatches(self, tiny_model, rng):
        pred = tiny_model(random_images(rng, 1)[0])
        assert pred.va.shape == (2,)
        assert pred.expr_logits.shape == (7,)
        assert pred.au_logits.shape == (12,)

    def test_head_arities(self, rng):
        cfg = ModelConfig(
            backbone_variant="tiny", pyramid_channels=5, num_expressions=4, num_aus=9,
            input_size=(32, 32),
        )
        model = build_model(cfg)
        pred = model(torch.zeros(2, 3, 32, 32))
        assert pred.va.shape == (2, 2)
        assert pred.expr_logits.shape == (2, 4)
        assert pred.au_logits.shape == (2, 9)
        feats = model.pyramid_features(torch.zeros(2, 3, 32, 32))
        assert feats.concat.shape == (2, 20)

    def test_tanh_bounding_on_model_outputs(self, tiny_model, rng):
        pred = tiny_model(random_images(rng, 3))
        assert torch.all(pred.va.abs() < 1.0)

    def test_backbone_weight_hook(self, tiny_config, tmp_path):
        donor = build_model(tiny_config, "double")
        torch.save(donor.backbone.state_dict(), tmp_path / "backbone.pt")
        from dataclasses import replace

        receiver = build_model(replace(tiny_config, seed=99), "double")
        missing = load_backbone_weights(receiver, tmp_path / "backbone.pt")
        assert missing == []
        for p1, p2 in zip(donor.backbone.parameters(), receiver.backbone.parameters()):
            assert torch.equal(p1, p2)
