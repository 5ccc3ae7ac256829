"""Dense depthwise-separable block and the ASPP bottleneck."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

from torch import Tensor, nn

from . import diffcore as dc
from .layers import BatchNorm2d, Conv2d, ConvBNReLU, Dropout

ConvKind = Literal["depthwise_separable", "standard"]


@dataclass(frozen=True)
class DenseBlockConfig:
    in_c: int
    out_c: int
    ratio: int = 3
    conv_kind: ConvKind = "depthwise_separable"


@dataclass(frozen=True)
class AsppConfig:
    in_c: int
    out_c: int
    rates: tuple[int, ...] = (1, 6, 12, 18)
    dropout_rate: float = 0.5


def dense_block_channel_plan(cfg: DenseBlockConfig) -> list[tuple[int, int]]:
    """(input, output) channels of each layer; layer ``l`` sees the block input plus all earlier outputs."""
    if cfg.ratio < 1:
        raise dc.ConfigurationError(f"dense block ratio must be >= 1, got {cfg.ratio}")
    if cfg.in_c < 1 or cfg.out_c < 1:
        raise dc.ConfigurationError(f"dense block channels must be positive, got {cfg.in_c}->{cfg.out_c}")
    return [(cfg.in_c + l * cfg.out_c, cfg.out_c) for l in range(cfg.ratio)]


def dense_layer_param_count(in_c: int, out_c: int, conv_kind: ConvKind) -> int:
    if conv_kind == "standard":
        return 9 * in_c * out_c + 2 * out_c
    return 9 * in_c + in_c * out_c + 2 * out_c


def dense_block_param_count(cfg: DenseBlockConfig) -> int:
    return sum(dense_layer_param_count(i, o, cfg.conv_kind) for i, o in dense_block_channel_plan(cfg))


def aspp_param_count(cfg: AsppConfig) -> int:
    c = cfg.in_c
    branches = len(cfg.rates) * (9 * c * c + 2 * c)
    return branches + 2 * c + (len(cfg.rates) + 1) * c * cfg.out_c + 2 * cfg.out_c


class DenseLayer(nn.Sequential):
    def __init__(self, in_c: int, out_c: int, conv_kind: ConvKind):
        if conv_kind == "depthwise_separable":
            convs = [
                Conv2d(in_c, in_c, 3, padding=1, groups=in_c, bias=False),
                Conv2d(in_c, out_c, 1, bias=False),
            ]
        elif conv_kind == "standard":
            convs = [Conv2d(in_c, out_c, 3, padding=1, bias=False)]
        else:
            raise dc.ConfigurationError(f"unknown conv_kind {conv_kind!r}")
        super().__init__(*convs, BatchNorm2d(out_c), nn.ReLU())


class DenseDepthSepBlock(nn.Module):
    """Densely connected stack of separable conv layers returning the last layer's output."""

    def __init__(self, cfg: DenseBlockConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(DenseLayer(i, o, cfg.conv_kind) for i, o in dense_block_channel_plan(cfg))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cfg.in_c:
            raise dc.ConfigurationError(f"dense block expects {self.cfg.in_c} channels, got input {tuple(x.shape)}")
        feats = [x]
        out = x
        for layer in self.layers:
            z = feats[0] if len(feats) == 1 else dc.combine(feats, "concat_channels")
            out = layer(z)
            feats.append(out)
        return out


class GlobalMaxBranch(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.bn = BatchNorm2d(c)

    def forward(self, x: Tensor) -> Tensor:
        g = dc.activate(self.bn(dc.pool(x, "global_max")), "relu")
        # bilinear upsampling of a single pixel is a broadcast; expand keeps it exact
        return g.expand(-1, -1, x.shape[2], x.shape[3])


class ASPP(nn.Module):
    """Four dilated 3x3 branches plus a global-max branch, fused by a 1x1 conv.

    Each branch keeps ``in_c`` channels, so the fusion conv sees
    ``(len(rates) + 1) * in_c`` channels.
    """

    def __init__(self, cfg: AsppConfig):
        super().__init__()
        self.cfg = cfg
        self.branches = nn.ModuleList(ConvBNReLU(cfg.in_c, cfg.in_c, 3, dilation=r) for r in cfg.rates)
        self.global_branch = GlobalMaxBranch(cfg.in_c)
        self.fuse = ConvBNReLU(cfg.in_c * (len(cfg.rates) + 1), cfg.out_c, 1)
        self.dropout = Dropout(cfg.dropout_rate)

    def branch_outputs(self, x: Tensor) -> list[Tensor]:
        if x.shape[1] != self.cfg.in_c:
            raise dc.ConfigurationError(f"ASPP expects {self.cfg.in_c} channels, got input {tuple(x.shape)}")
        if x.shape[2] < 1 or x.shape[3] < 1:
            raise dc.ConfigurationError(f"ASPP input has empty spatial dims {tuple(x.shape)}")
        return [b(x) for b in self.branches] + [self.global_branch(x)]

    def forward(self, x: Tensor) -> Tensor:
        cat = dc.combine(self.branch_outputs(x), "concat_channels")
        return self.dropout(self.fuse(cat))
