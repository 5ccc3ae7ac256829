"""Attention gates fusing encoder skip features, decoder features and prior features.

The default ``triple`` gate projects each source to ``inter_c`` channels
(1x1 conv + BN), fuses them additively (or subtracts the prior projection),
and reduces the fused map to a single-channel sigmoid attention map that
reweights the chosen target features.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal

import torch
from torch import Tensor, nn

from . import diffcore as dc
from .layers import BatchNorm2d, Conv2d

GateVariant = Literal["triple", "dual_no_prior", "concat_attention", "spatial_only", "channel_only", "cbam_like"]
GATE_VARIANTS: tuple[str, ...] = ("triple", "dual_no_prior", "concat_attention", "spatial_only", "channel_only", "cbam_like")


@dataclass(frozen=True)
class GateConfig:
    enc_c: int
    dec_c: int
    prior_c: int
    inter_c: int = 0  # 0 -> enc_c // 2
    prior_fusion: Literal["add", "subtract"] = "add"
    attend_target: Literal["encoder", "decoder"] = "encoder"
    variant: GateVariant = "triple"

    def resolved(self) -> "GateConfig":
        if self.variant not in GATE_VARIANTS:
            raise dc.ConfigurationError(f"unknown gate variant {self.variant!r}; choose from {GATE_VARIANTS}")
        if self.prior_fusion not in ("add", "subtract"):
            raise dc.ConfigurationError(f"prior_fusion must be 'add' or 'subtract', got {self.prior_fusion!r}")
        if self.attend_target not in ("encoder", "decoder"):
            raise dc.ConfigurationError(f"attend_target must be 'encoder' or 'decoder', got {self.attend_target!r}")
        inter = self.inter_c if self.inter_c > 0 else max(1, self.enc_c // 2)
        return replace(self, inter_c=inter)

    @property
    def uses_prior(self) -> bool:
        return self.variant != "dual_no_prior"

    @property
    def target_c(self) -> int:
        return self.enc_c if self.attend_target == "encoder" else self.dec_c


class Projection(nn.Sequential):
    def __init__(self, in_c: int, out_c: int):
        super().__init__(Conv2d(in_c, out_c, 1, bias=False), BatchNorm2d(out_c))


def gate_param_count(cfg: GateConfig) -> int:
    cfg = cfg.resolved()
    i = cfg.inter_c
    proj = lambda c: c * i + 2 * i  # noqa: E731
    total_c = cfg.enc_c + cfg.dec_c + cfg.prior_c
    if cfg.variant == "triple":
        return proj(cfg.enc_c) + proj(cfg.dec_c) + proj(cfg.prior_c) + i + 1
    if cfg.variant == "dual_no_prior":
        return proj(cfg.enc_c) + proj(cfg.dec_c) + i + 1
    if cfg.variant == "concat_attention":
        return proj(cfg.enc_c) + proj(cfg.dec_c) + proj(cfg.prior_c) + (3 * i * i + i) + (i + 1)
    spatial = 2 * 49 + 1
    hidden = max(1, total_c // 8)
    channel = total_c * hidden + hidden * cfg.target_c
    if cfg.variant == "spatial_only":
        return spatial
    if cfg.variant == "channel_only":
        return channel
    return spatial + channel


class _SpatialAttention(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = Conv2d(2, 1, 7, padding=3, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        pooled = dc.combine([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], "concat_channels")
        return dc.activate(self.conv(pooled), "sigmoid")


class _ChannelAttention(nn.Module):
    def __init__(self, in_c: int, out_c: int):
        super().__init__()
        hidden = max(1, in_c // 8)
        self.fc1 = Conv2d(in_c, hidden, 1, bias=False)
        self.fc2 = Conv2d(hidden, out_c, 1, bias=False)

    def mlp(self, v: Tensor) -> Tensor:
        return self.fc2(dc.activate(self.fc1(v), "relu"))

    def forward(self, x: Tensor) -> Tensor:
        avg = x.mean(dim=(2, 3), keepdim=True)
        mx = dc.pool(x, "global_max")
        return dc.activate(self.mlp(avg) + self.mlp(mx), "sigmoid")


class AttentionGate(nn.Module):
    """All gate variants behind one interface: ``(f_enc, f_dec, prior) -> (attended, alpha)``.

    ``alpha`` is always a ``(n, 1, h, w)`` map in ``[0, 1]``.
    """

    def __init__(self, cfg: GateConfig):
        super().__init__()
        cfg = cfg.resolved()
        self.cfg = cfg
        v, i = cfg.variant, cfg.inter_c
        if v in ("triple", "dual_no_prior", "concat_attention"):
            self.enc_proj = Projection(cfg.enc_c, i)
            self.dec_proj = Projection(cfg.dec_c, i)
            if v != "dual_no_prior":
                self.prior_proj = Projection(cfg.prior_c, i)
        if v in ("triple", "dual_no_prior"):
            self.psi = Conv2d(i, 1, 1, bias=True)
        elif v == "concat_attention":
            self.mix1 = Conv2d(3 * i, i, 1, bias=True)
            self.mix2 = Conv2d(i, 1, 1, bias=True)
        if v in ("channel_only", "cbam_like"):
            self.channel_att = _ChannelAttention(cfg.enc_c + cfg.dec_c + cfg.prior_c, cfg.target_c)
        if v in ("spatial_only", "cbam_like"):
            self.spatial_att = _SpatialAttention()

    def _check(self, f_enc: Tensor, f_dec: Tensor, prior: Tensor | None) -> None:
        shapes = [tuple(f_enc.shape), tuple(f_dec.shape), None if prior is None else tuple(prior.shape)]
        bad = f_enc.shape[2:] != f_dec.shape[2:] or f_enc.shape[0] != f_dec.shape[0]
        if self.cfg.uses_prior:
            bad = bad or prior is None or prior.shape[2:] != f_enc.shape[2:] or prior.shape[0] != f_enc.shape[0]
        if bad:
            raise dc.ConfigurationError(f"gate inputs disagree spatially: enc {shapes[0]}, dec {shapes[1]}, prior {shapes[2]}")

    def fused(self, f_enc: Tensor, f_dec: Tensor, prior: Tensor | None) -> Tensor:
        """psi = ReLU(X1 + X2 +/- X3) for the additive variants."""
        x1, x2 = self.enc_proj(f_enc), self.dec_proj(f_dec)
        if self.cfg.variant == "dual_no_prior":
            return dc.activate(dc.combine([x1, x2], "add"), "relu")
        x3 = self.prior_proj(prior)
        if self.cfg.prior_fusion == "subtract":
            x3 = -x3
        return dc.activate(dc.combine([x1, x2, x3], "add"), "relu")

    def forward(self, f_enc: Tensor, f_dec: Tensor, prior: Tensor | None = None) -> tuple[Tensor, Tensor]:
        self._check(f_enc, f_dec, prior)
        cfg = self.cfg
        target = f_enc if cfg.attend_target == "encoder" else f_dec
        v = cfg.variant
        if v in ("triple", "dual_no_prior"):
            alpha = dc.activate(self.psi(self.fused(f_enc, f_dec, prior)), "sigmoid")
            return dc.combine([target, alpha], "mul_broadcast"), alpha
        if v == "concat_attention":
            cat = dc.combine([self.enc_proj(f_enc), self.dec_proj(f_dec), self.prior_proj(prior)], "concat_channels")
            alpha = dc.activate(self.mix2(dc.activate(self.mix1(cat), "relu")), "sigmoid")
            return dc.combine([target, alpha], "mul_broadcast"), alpha

        sources = dc.combine([f_enc, f_dec, prior], "concat_channels")
        n, _, h, w = target.shape
        if v == "spatial_only":
            alpha = self.spatial_att(sources)
            return dc.combine([target, alpha], "mul_broadcast"), alpha
        channel = self.channel_att(sources)
        refined = dc.combine([target, channel], "mul_broadcast")
        if v == "channel_only":
            alpha = channel.mean(dim=1, keepdim=True).expand(n, 1, h, w)
            return refined, alpha
        others = [f_dec, prior] if cfg.attend_target == "encoder" else [f_enc, prior]
        spatial = self.spatial_att(dc.combine([refined, *others], "concat_channels"))
        alpha = spatial * channel.mean(dim=1, keepdim=True)
        return dc.combine([refined, spatial], "mul_broadcast"), alpha


def negate_prior_projection(gate: AttentionGate) -> None:
    """Flip the sign of the prior projection output in place (conv weights, BN shift and running mean)."""
    conv, bn = gate.prior_proj[0], gate.prior_proj[1]
    with torch.no_grad():
        conv.weight.neg_()
        bn.bias.neg_()
        bn.running_mean.neg_()
