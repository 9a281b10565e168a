"""Feature extractors and the block-level trainability machinery.

Two toy backbones stand in for the heavy pretrained models: a pre-activation
residual network and a small patch-attention transformer. Both expose their
parameters as an ordered ``blocks`` ModuleDict; adaptation policies freeze or
unfreeze whole blocks. Adapters for torchvision's ResNet-18 and ViT follow the
same block contract so real pretrained weights can be plugged in.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping

import torch
from einops import rearrange
from torch import nn


class NonFiniteError(FloatingPointError):
    """A forward pass or loss produced NaN or Inf."""


def check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


class AdaptationPolicy(str, Enum):
    LP = "LP"
    PT = "PT"
    FFT = "FFT"

    @classmethod
    def _missing_(cls, value: object) -> "AdaptationPolicy | None":
        if isinstance(value, str) and value.upper() in cls.__members__:
            return cls[value.upper()]
        return None


@dataclass(frozen=True)
class BackboneSpec:
    """Description of a feature extractor.

    ``kind`` is ``residual`` or ``transformer`` for the toy backbones, or
    ``resnet18`` / ``vit`` for the torchvision adapters.
    """

    kind: str = "residual"
    input_size: int = 32
    channels: tuple[int, ...] = (16, 32, 64, 64)
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    mlp_dim: int = 128
    patch_size: int = 8
    pooling: str = "mean"
    zero_init_residual: bool = False
    weights: str | None = None
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.kind not in ("residual", "transformer", "resnet18", "vit"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if self.kind in ("transformer", "vit") and self.input_size % self.patch_size:
            raise ValueError(
                f"input size {self.input_size} not divisible by patch size {self.patch_size}")
        if self.pooling not in ("mean", "cls"):
            raise ValueError("pooling must be 'mean' or 'cls'")

    @property
    def feature_dim(self) -> int:
        if self.kind == "residual":
            return self.channels[-1]
        if self.kind == "resnet18":
            return 512
        return self.embed_dim

    @property
    def blocks(self) -> tuple[str, ...]:
        if self.kind == "residual":
            return tuple(f"block{i}" for i in range(len(self.channels)))
        if self.kind == "transformer":
            return ("patch_embed", *(f"encoder{i}" for i in range(self.depth)))
        if self.kind == "resnet18":
            return ("stem", *(f"layer{i}_{j}" for i in range(1, 5) for j in range(2)))
        return ("patch_embed", *(f"encoder{i}" for i in range(self.depth)))

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind, "input_size": self.input_size, "channels": list(self.channels),
            "embed_dim": self.embed_dim, "depth": self.depth, "num_heads": self.num_heads,
            "mlp_dim": self.mlp_dim, "patch_size": self.patch_size, "pooling": self.pooling,
            "zero_init_residual": self.zero_init_residual, "weights": self.weights,
            "extra": dict(self.extra),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BackboneSpec":
        data = dict(data)
        if "channels" in data:
            data["channels"] = tuple(data["channels"])
        return cls(**data)


# ---------------------------------------------------------------------------
# residual backbone

class ResidualBlock(nn.Module):
    """Pre-activation residual unit: ``out = F(x) + x``.

    ``F`` is norm -> relu -> conv -> norm -> relu -> conv. With ``zero_init``
    the last conv starts at zero so the unit is exactly the identity.
    """

    def __init__(self, channels: int, zero_init: bool = False) -> None:
        super().__init__()
        groups = min(8, channels)
        self.residual = nn.Sequential(
            nn.GroupNorm(groups, channels),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1, bias=False),
            nn.GroupNorm(groups, channels),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1, bias=False),
        )
        if zero_init:
            nn.init.zeros_(self.residual[-1].weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.residual(x) + x


def residual_block_forward(x: torch.Tensor, block: ResidualBlock) -> torch.Tensor:
    conv = block.residual[2]
    if x.dim() != 4 or x.shape[1] != conv.in_channels:
        raise ValueError(
            f"residual block expects N x {conv.in_channels} x H x W input, got {tuple(x.shape)}")
    return block(x)


class ResidualStage(nn.Module):
    """Strided transition conv followed by one residual unit."""

    def __init__(self, c_in: int, c_out: int, stride: int, zero_init: bool,
                 final: bool = False) -> None:
        super().__init__()
        self.transition = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.unit = ResidualBlock(c_out, zero_init)
        # pre-activation nets need a closing norm + relu before pooling
        self.head_norm = nn.Sequential(nn.GroupNorm(min(8, c_out), c_out), nn.ReLU()) if final else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.unit(self.transition(x))
        if self.head_norm is not None:
            x = self.head_norm(x)
        return x


class Backbone(nn.Module):
    """Base class: subclasses fill ``self.blocks`` and implement ``features``."""

    spec: BackboneSpec
    blocks: nn.ModuleDict

    def features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)


class ToyResNet(Backbone):
    def __init__(self, spec: BackboneSpec) -> None:
        super().__init__()
        self.spec = spec
        blocks = {}
        c_in = 3
        for i, c in enumerate(spec.channels):
            blocks[f"block{i}"] = ResidualStage(c_in, c, 1 if i == 0 else 2,
                                                spec.zero_init_residual,
                                                final=i == len(spec.channels) - 1)
            c_in = c
        self.blocks = nn.ModuleDict(blocks)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks.values():
            x = block(x)
        return x.mean(dim=(2, 3))


# ---------------------------------------------------------------------------
# transformer backbone

def patchify(img: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Cut ``Bx3xHxW`` (or ``3xHxW``) into row-major flattened patches.

    Each patch vector is laid out channel-major, ``(c, dy, dx)``, which matches
    the weight layout of a ``Conv2d`` with kernel = stride = ``patch_size``.
    """
    squeeze = img.dim() == 3
    if squeeze:
        img = img[None]
    h, w = img.shape[-2:]
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    out = rearrange(img, "b c (h p1) (w p2) -> b (h w) (c p1 p2)", p1=patch_size, p2=patch_size)
    return out[0] if squeeze else out


def unpatchify(patches: torch.Tensor, patch_size: int, height: int, width: int) -> torch.Tensor:
    return rearrange(patches, "b (h w) (c p1 p2) -> b c (h p1) (w p2)",
                     h=height // patch_size, w=width // patch_size, p1=patch_size, p2=patch_size)


class PatchEmbedding(nn.Module):
    """Conv2d patch projection plus learned positional embedding (and cls token)."""

    def __init__(self, input_size: int, patch_size: int, embed_dim: int, cls_token: bool) -> None:
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(3, embed_dim, patch_size, stride=patch_size)
        n = (input_size // patch_size) ** 2
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim)) if cls_token else None
        self.pos_embed = nn.Parameter(torch.randn(1, n + int(cls_token), embed_dim) * 0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % self.patch_size or x.shape[-2] % self.patch_size:
            raise ValueError(f"image {tuple(x.shape[-2:])} not divisible by patch size "
                             f"{self.patch_size}")
        tokens = rearrange(self.proj(x), "b d h w -> b (h w) d")
        if self.cls_token is not None:
            tokens = torch.cat([self.cls_token.expand(len(x), -1, -1), tokens], dim=1)
        return tokens + self.pos_embed


class EncoderBlock(nn.Module):
    def __init__(self, spec: BackboneSpec, final: bool) -> None:
        super().__init__()
        self.layer = nn.TransformerEncoderLayer(
            spec.embed_dim, spec.num_heads, spec.mlp_dim, dropout=0.0,
            activation="gelu", batch_first=True, norm_first=True)
        self.norm = nn.LayerNorm(spec.embed_dim) if final else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.layer(x)
        return self.norm(x) if self.norm is not None else x


class ToyViT(Backbone):
    def __init__(self, spec: BackboneSpec) -> None:
        super().__init__()
        self.spec = spec
        blocks: dict[str, nn.Module] = {
            "patch_embed": PatchEmbedding(spec.input_size, spec.patch_size, spec.embed_dim,
                                          cls_token=spec.pooling == "cls"),
        }
        for i in range(spec.depth):
            blocks[f"encoder{i}"] = EncoderBlock(spec, final=i == spec.depth - 1)
        self.blocks = nn.ModuleDict(blocks)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks.values():
            x = block(x)
        return x[:, 0] if self.spec.pooling == "cls" else x.mean(dim=1)


# ---------------------------------------------------------------------------
# torchvision adapters


class _Stem(nn.Module):
    def __init__(self, *mods: nn.Module) -> None:
        super().__init__()
        self.body = nn.Sequential(*mods)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class TorchvisionResNet18(Backbone):
    """ResNet-18 re-expressed as stem + eight BasicBlocks; the fc layer is dropped."""

    def __init__(self, spec: BackboneSpec) -> None:
        super().__init__()
        from torchvision.models import resnet18

        self.spec = spec
        net = resnet18(weights=None)
        if spec.weights:
            net.load_state_dict(torch.load(spec.weights, map_location="cpu"), strict=False)
        blocks: dict[str, nn.Module] = {"stem": _Stem(net.conv1, net.bn1, net.relu, net.maxpool)}
        for i in range(1, 5):
            layer = getattr(net, f"layer{i}")
            for j, unit in enumerate(layer):
                blocks[f"layer{i}_{j}"] = unit
        self.blocks = nn.ModuleDict(blocks)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks.values():
            x = block(x)
        return x.mean(dim=(2, 3))


class _VitEmbed(nn.Module):
    def __init__(self, vit: nn.Module) -> None:
        super().__init__()
        self.conv_proj = vit.conv_proj
        self.class_token = vit.class_token
        self.pos_embedding = vit.encoder.pos_embedding
        self._vit_process = vit._process_input

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self._vit_process(x)
        cls = self.class_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, x], dim=1) + self.pos_embedding


class _VitLayer(nn.Module):
    def __init__(self, layer: nn.Module, final_norm: nn.Module | None) -> None:
        super().__init__()
        self.layer = layer
        self.norm = final_norm

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.layer(x)
        return self.norm(x) if self.norm is not None else x


class TorchvisionViT(Backbone):
    """torchvision VisionTransformer (b_16 by default) split into embed + encoder layers.

    ``extra`` may override ``hidden_dim`` / ``mlp_dim`` for small test builds.
    """

    def __init__(self, spec: BackboneSpec) -> None:
        super().__init__()
        from torchvision.models.vision_transformer import VisionTransformer

        self.spec = spec
        vit = VisionTransformer(
            image_size=spec.input_size, patch_size=spec.patch_size, num_layers=spec.depth,
            num_heads=spec.num_heads, hidden_dim=spec.embed_dim, mlp_dim=spec.mlp_dim)
        if spec.weights:
            vit.load_state_dict(torch.load(spec.weights, map_location="cpu"), strict=False)
        layers = list(vit.encoder.layers)
        blocks: dict[str, nn.Module] = {"patch_embed": _VitEmbed(vit)}
        for i, layer in enumerate(layers):
            blocks[f"encoder{i}"] = _VitLayer(layer, vit.encoder.ln if i == len(layers) - 1 else None)
        self.blocks = nn.ModuleDict(blocks)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks.values():
            x = block(x)
        return x[:, 0] if self.spec.pooling == "cls" else x[:, 1:].mean(dim=1)


def vit_b16_spec(weights: str | None = None, pooling: str = "cls") -> BackboneSpec:
    return BackboneSpec(kind="vit", input_size=224, patch_size=16, depth=12, num_heads=12,
                        embed_dim=768, mlp_dim=3072, pooling=pooling, weights=weights)


def build_backbone(spec: BackboneSpec) -> Backbone:
    factory = {
        "residual": ToyResNet,
        "transformer": ToyViT,
        "resnet18": TorchvisionResNet18,
        "vit": TorchvisionViT,
    }[spec.kind]
    backbone = factory(spec)
    if tuple(backbone.blocks.keys()) != spec.blocks:
        raise AssertionError("backbone block layout disagrees with its spec")
    return backbone


def forward_features(batch: torch.Tensor, backbone: Backbone) -> torch.Tensor:
    return check_finite(backbone(batch), "backbone features")


# ---------------------------------------------------------------------------
# trainability

@dataclass(frozen=True)
class TrainabilityMask:
    blocks: Mapping[str, bool]
    heads: bool = True

    def __post_init__(self) -> None:
        if not self.heads:
            raise ValueError("task heads are always trainable")
        object.__setattr__(self, "blocks", dict(self.blocks))

    @property
    def trainable_blocks(self) -> list[str]:
        return [name for name, flag in self.blocks.items() if flag]

    def to_dict(self) -> dict[str, Any]:
        return {"blocks": dict(self.blocks), "heads": self.heads}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainabilityMask":
        return cls(dict(data["blocks"]), bool(data.get("heads", True)))


def apply_adaptation_policy(spec: BackboneSpec, policy: AdaptationPolicy | str) -> TrainabilityMask:
    """LP freezes every block, PT unfreezes only the last one, FFT trains everything."""
    policy = AdaptationPolicy(policy)
    names = spec.blocks
    if not names:
        raise ValueError("backbone has no blocks")
    if policy is AdaptationPolicy.LP:
        flags = {n: False for n in names}
    elif policy is AdaptationPolicy.PT:
        flags = {n: n == names[-1] for n in names}
    else:
        flags = {n: True for n in names}
    return TrainabilityMask(flags)


def apply_mask(backbone: Backbone, mask: TrainabilityMask) -> None:
    if set(mask.blocks) != set(backbone.blocks.keys()):
        raise ValueError("mask must cover every backbone block exactly once")
    for name, block in backbone.blocks.items():
        for p in block.parameters():
            p.requires_grad_(mask.blocks[name])


def count_trainable(mask: TrainabilityMask, model: nn.Module) -> int:
    """Scalar parameters that the mask leaves trainable, task heads included.

    ``model`` is anything with ``backbone.blocks`` and ``heads`` attributes,
    or a bare backbone (then no head parameters are counted).
    """
    backbone = getattr(model, "backbone", model)
    total = sum(p.numel() for name, block in backbone.blocks.items() if mask.blocks[name]
                for p in block.parameters())
    heads = getattr(model, "heads", None)
    if heads is not None:
        total += sum(p.numel() for p in heads.parameters())
    return total
