"""Pyramid-feature multi-task network.

A backbone exposes four stage maps at strides 4/8/16/32; 1x1 lateral
projections plus top-down nearest x2 fusion build the pyramid; each level
is globally average-pooled and the four vectors are concatenated
shallow-to-deep before three single-layer task heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import InputShapeError, ValidationError

BACKBONE_VARIANTS = ("tiny", "resnet18", "resnet50")
PYRAMID_STRIDES = (4, 8, 16, 32)
# Strides 4/8/16 must divide the input exactly; the stride-32 stage may
# round up (padded stride-2 convs produce ceil sizes), so 112 is valid.
INPUT_DIVISOR = 16


@dataclass(frozen=True)
class ModelConfig:
    """Architecture settings shared by teachers and the student."""

    backbone_variant: str = "resnet18"
    pyramid_channels: int = 256
    num_expressions: int = 7
    num_aus: int = 12
    input_size: tuple[int, int] = (112, 112)
    va_bounding: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if self.backbone_variant not in BACKBONE_VARIANTS:
            raise ValidationError(
                f"unknown backbone variant {self.backbone_variant!r}, expected one of {BACKBONE_VARIANTS}"
            )
        if self.pyramid_channels < 1:
            raise ValidationError("pyramid_channels must be >= 1")
        if self.num_expressions < 2:
            raise ValidationError("num_expressions must be >= 2")
        if self.num_aus < 1:
            raise ValidationError("num_aus must be >= 1")
        if self.va_bounding not in ("tanh", "linear"):
            raise ValidationError(f"va_bounding must be 'tanh' or 'linear', got {self.va_bounding!r}")
        h, w = int(self.input_size[0]), int(self.input_size[1])
        if h <= 0 or w <= 0 or h % INPUT_DIVISOR or w % INPUT_DIVISOR:
            raise ValidationError(
                f"input size must be a positive multiple of {INPUT_DIVISOR}, got {h}x{w}"
            )
        object.__setattr__(self, "input_size", (h, w))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def concat_dim(self) -> int:
        return 4 * self.pyramid_channels

    def level_sizes(self) -> list[tuple[int, int]]:
        """Expected (H, W) of each pyramid level, deepest rounded up."""
        h, w = self.input_size
        return [(math.ceil(h / s), math.ceil(w / s)) for s in PYRAMID_STRIDES]

    def to_dict(self) -> dict:
        return {
            "backbone_variant": self.backbone_variant,
            "pyramid_channels": self.pyramid_channels,
            "num_expressions": self.num_expressions,
            "num_aus": self.num_aus,
            "input_size": list(self.input_size),
            "va_bounding": self.va_bounding,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        return cls(**d)


@dataclass
class MultiTaskPrediction:
    """One forward pass: VA pair, expression logits, AU logits.

    Tensors are (2,) / (C,) / (K,) for a single image or batched with a
    leading dimension. AU logits are raw; the sigmoid lives in the loss
    and the prediction writer.
    """

    va: Tensor
    expr_logits: Tensor
    au_logits: Tensor


@dataclass
class PyramidFeatures:
    """Fused pyramid levels plus their pooled vectors and the concat vector."""

    levels: list[Tensor]
    pooled: list[Tensor]
    concat: Tensor


class TinyBackbone(nn.Module):
    """Desk-scale backbone: a stride-2 stem and four stride-2 stages.

    Mirrors the ResNet stride schedule (4/8/16/32) at a few channels.
    Activations are smooth (SiLU) so finite-difference gradient checks
    are well conditioned.
    """

    channels = (8, 16, 32, 64)

    def __init__(self):
        super().__init__()
        c1, c2, c3, c4 = self.channels
        self.stem = nn.Conv2d(3, c1, 3, stride=2, padding=1)
        self.stage1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.stage2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.stage3 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.stage4 = nn.Conv2d(c3, c4, 3, stride=2, padding=1)
        self.act = nn.SiLU()

    def forward(self, x: Tensor) -> list[Tensor]:
        x = self.act(self.stem(x))
        s1 = self.act(self.stage1(x))
        s2 = self.act(self.stage2(s1))
        s3 = self.act(self.stage3(s2))
        s4 = self.act(self.stage4(s3))
        return [s1, s2, s3, s4]


class ResNetBackbone(nn.Module):
    """ResNet-18/50 trunk rearranged to expose the four stage outputs."""

    def __init__(self, variant: str):
        super().__init__()
        from torchvision.models import resnet18, resnet50

        if variant == "resnet18":
            net = resnet18(weights=None)
            self.channels = (64, 128, 256, 512)
        elif variant == "resnet50":
            net = resnet50(weights=None)
            self.channels = (256, 512, 1024, 2048)
        else:
            raise ValidationError(f"unknown ResNet variant {variant!r}")
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stage1 = net.layer1
        self.stage2 = net.layer2
        self.stage3 = net.layer3
        self.stage4 = net.layer4

    def forward(self, x: Tensor) -> list[Tensor]:
        x = self.stem(x)
        s1 = self.stage1(x)
        s2 = self.stage2(s1)
        s3 = self.stage3(s2)
        s4 = self.stage4(s3)
        return [s1, s2, s3, s4]


def make_backbone(variant: str) -> nn.Module:
    if variant == "tiny":
        return TinyBackbone()
    return ResNetBackbone(variant)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsampling (each value copied to a 2x2 block)."""
    return F.interpolate(x, scale_factor=2, mode="nearest")


class FeaturePyramid(nn.Module):
    """1x1 lateral projections and the top-down x2-upsample-and-add path."""

    def __init__(self, in_channels: Sequence[int], out_channels: int):
        super().__init__()
        self.out_channels = out_channels
        self.lateral = nn.ModuleList(
            [nn.Conv2d(c, out_channels, kernel_size=1) for c in in_channels]
        )

    def forward(self, stages: Sequence[Tensor]) -> list[Tensor]:
        if len(stages) != len(self.lateral):
            raise ValidationError(f"expected {len(self.lateral)} stages, got {len(stages)}")
        laterals = [conv(s) for conv, s in zip(self.lateral, stages)]
        levels: list[Tensor | None] = [None] * len(laterals)
        levels[-1] = laterals[-1]
        for i in range(len(laterals) - 2, -1, -1):
            up = upsample2(levels[i + 1])
            th, tw = laterals[i].shape[-2:]
            if up.shape[-2] < th or up.shape[-1] < tw or up.shape[-3] != laterals[i].shape[-3]:
                raise ValidationError(
                    f"pyramid fusion shape mismatch at level {i}: "
                    f"{tuple(up.shape)} cannot cover {tuple(laterals[i].shape)}"
                )
            # A ceil-rounded deepest stage can overshoot by one row/col.
            levels[i] = laterals[i] + up[..., :th, :tw]
        return levels  # type: ignore[return-value]


def pool_and_concat(levels: Sequence[Tensor]) -> Tensor:
    """Global spatial average per level, concatenated in shallow-to-deep order."""
    if len(levels) != 4:
        raise ValidationError(f"expected 4 pyramid levels, got {len(levels)}")
    channels = levels[0].shape[-3]
    for i, lv in enumerate(levels):
        if lv.shape[-3] != channels:
            raise ValidationError(
                f"level {i} has {lv.shape[-3]} channels, expected {channels}"
            )
    return torch.cat([lv.mean(dim=(-2, -1)) for lv in levels], dim=-1)


class TaskHeads(nn.Module):
    """Three single linear layers over the shared concat vector."""

    def __init__(self, in_dim: int, num_expressions: int, num_aus: int, va_bounding: str):
        super().__init__()
        self.va = nn.Linear(in_dim, 2)
        self.expr = nn.Linear(in_dim, num_expressions)
        self.au = nn.Linear(in_dim, num_aus)
        self.va_bounding = va_bounding

    def forward(self, concat: Tensor) -> MultiTaskPrediction:
        if concat.shape[-1] != self.va.in_features:
            raise ValidationError(
                f"concat vector length {concat.shape[-1]} does not match heads "
                f"(expected {self.va.in_features})"
            )
        va = self.va(concat)
        if self.va_bounding == "tanh":
            va = torch.tanh(va)
        return MultiTaskPrediction(
            va=va, expr_logits=self.expr(concat), au_logits=self.au(concat)
        )


class MultiTaskPyramidNet(nn.Module):
    """Full model: backbone stages -> pyramid fusion -> pooled concat -> heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = make_backbone(config.backbone_variant)
        self.pyramid = FeaturePyramid(self.backbone.channels, config.pyramid_channels)
        self.heads = TaskHeads(
            config.concat_dim, config.num_expressions, config.num_aus, config.va_bounding
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.heads.va.weight.dtype

    def _check_input(self, images) -> tuple[Tensor, bool]:
        x = torch.as_tensor(images, dtype=self.dtype)
        single = x.dim() == 3
        if single:
            x = x.unsqueeze(0)
        h, w = self.config.input_size
        if x.dim() != 4 or x.shape[1] != 3 or (x.shape[2], x.shape[3]) != (h, w):
            raise InputShapeError(
                f"expected images of shape (B, 3, {h}, {w}), got {tuple(images.shape)}"
            )
        if not torch.isfinite(x).all():
            raise ValidationError("input image contains non-finite values")
        return x, single

    def backbone_stages(self, images) -> list[Tensor]:
        """conv2..conv5 stage maps at strides 4/8/16/32."""
        x, single = self._check_input(images)
        stages = self.backbone(x)
        return [s.squeeze(0) for s in stages] if single else stages

    def pyramid_features(self, images) -> PyramidFeatures:
        x, single = self._check_input(images)
        levels = self.pyramid(self.backbone(x))
        pooled = [lv.mean(dim=(-2, -1)) for lv in levels]
        concat = torch.cat(pooled, dim=-1)
        if single:
            levels = [lv.squeeze(0) for lv in levels]
            pooled = [p.squeeze(0) for p in pooled]
            concat = concat.squeeze(0)
        return PyramidFeatures(levels=levels, pooled=pooled, concat=concat)

    def forward(self, images) -> MultiTaskPrediction:
        feats = self.pyramid_features(images)
        return self.heads(feats.concat)


def reset_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic re-initialization of every conv/linear layer.

    Draws from a dedicated generator so model weights depend only on the
    seed, never on global RNG state. Uses the standard fan-in uniform
    bounds; norm layers reset to identity.
    """
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            fan_in = module.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.uniform_(-bound, bound, generator=gen)
        elif isinstance(module, (nn.BatchNorm2d, nn.GroupNorm)):
            with torch.no_grad():
                if module.weight is not None:
                    module.weight.fill_(1.0)
                if module.bias is not None:
                    module.bias.zero_()
            if isinstance(module, nn.BatchNorm2d):
                module.reset_running_stats()


def build_model(config: ModelConfig, precision: str = "single") -> MultiTaskPyramidNet:
    """Construct a model with deterministic, seeded initialization."""
    if precision not in ("single", "double"):
        raise ValidationError(f"precision must be 'single' or 'double', got {precision!r}")
    model = MultiTaskPyramidNet(config)
    if precision == "double":
        model = model.double()
    reset_parameters(model, config.seed)
    return model


def load_backbone_weights(model: MultiTaskPyramidNet, path) -> list[str]:
    """Load pretrained backbone weights from a torch state-dict file.

    Returns the names of parameters the file did not provide; extra keys
    in the file are ignored. Random initialization remains the default
    everywhere; nothing requires this hook.
    """
    state = torch.load(path, map_location="cpu", weights_only=True)
    result = model.backbone.load_state_dict(state, strict=False)
    return list(result.missing_keys)
