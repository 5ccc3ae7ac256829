"""nn.Module shells around the diffcore primitives.

Modules own parameters and buffers; the arithmetic lives in
:mod:`prior_attunet.diffcore`.
"""
from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from . import diffcore as dc

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Conv2d(nn.Module):
    def __init__(self, in_c: int, out_c: int, kernel: int = 3, stride: int = 1, padding: int = 0,
                 dilation: int = 1, groups: int = 1, bias: bool = True):
        super().__init__()
        if in_c % groups or out_c % groups:
            raise dc.ConfigurationError(f"channels {in_c}->{out_c} not divisible by groups={groups}")
        self.in_c, self.out_c = in_c, out_c
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups
        self.weight = nn.Parameter(torch.zeros(out_c, in_c // groups, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_c)) if bias else None

    def params(self) -> dc.ConvParams:
        return dc.ConvParams(self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)

    def forward(self, x: Tensor) -> Tensor:
        if self.groups > 1 and self.groups == self.in_c == self.out_c:
            return dc.depthwise_conv2d(x, self.params())
        return dc.conv2d(x, self.params())


class ConvTranspose2d(nn.Module):
    def __init__(self, in_c: int, out_c: int, kernel: int = 2, stride: int = 2, padding: int = 0, bias: bool = True):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = nn.Parameter(torch.zeros(in_c, out_c, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_c)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return dc.transposed_conv2d(x, dc.ConvParams(self.weight, self.bias, self.stride, self.padding))


class BatchNorm2d(nn.Module):
    def __init__(self, c: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.weight = nn.Parameter(torch.ones(c))
        self.bias = nn.Parameter(torch.zeros(c))
        self.register_buffer("running_mean", torch.zeros(c))
        self.register_buffer("running_var", torch.ones(c))

    def params(self) -> dc.BatchNormParams:
        return dc.BatchNormParams(self.weight, self.bias, self.running_mean, self.running_var, self.eps, self.momentum)

    def forward(self, x: Tensor) -> Tensor:
        return dc.batch_norm(x, self.params(), self.training)


class Dropout(nn.Module):
    """Inverted dropout drawing from an explicit generator when one is attached."""

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise dc.ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.generator: torch.Generator | None = None

    def forward(self, x: Tensor) -> Tensor:
        return dc.dropout(x, self.rate, self.training, self.generator)


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_c: int, out_c: int, kernel: int = 3, stride: int = 1, padding: int | None = None,
                 dilation: int = 1):
        if padding is None:
            padding = dilation * (kernel // 2)
        super().__init__(
            Conv2d(in_c, out_c, kernel, stride, padding, dilation, bias=False),
            BatchNorm2d(out_c),
            nn.ReLU(),
        )


def he_normal_(module: nn.Module, generator: torch.Generator) -> None:
    """He-normal (fan-in, ReLU gain) weights, zero biases, unit-gamma BN.

    Parameters are visited in registration order so a seeded generator gives
    bit-identical weights.
    """
    for m in module.modules():
        if isinstance(m, (Conv2d, ConvTranspose2d, nn.Linear)):
            w = m.weight
            if isinstance(m, ConvTranspose2d):
                # each output pixel sees in_c * (k / stride)^2 taps
                fan_in = max(1, w.shape[0] * w.shape[2] * w.shape[3] // (m.stride * m.stride))
            else:
                fan_in = w[0].numel()
            with torch.no_grad():
                w.copy_(torch.randn(w.shape, generator=generator) * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, BatchNorm2d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.running_mean.zero_()
                m.running_var.fill_(1.0)


def attach_generator(module: nn.Module, generator: torch.Generator | None) -> None:
    for m in module.modules():
        if isinstance(m, Dropout):
            m.generator = generator
