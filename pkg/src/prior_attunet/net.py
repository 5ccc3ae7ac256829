"""Prior-guided attention U-Net assembly, parameter accounting and mask prediction."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Literal

import torch
from torch import Tensor, nn

from . import diffcore as dc
from .blocks import ASPP, AsppConfig, DenseBlockConfig, DenseDepthSepBlock, aspp_param_count, dense_block_param_count
from .gate import GATE_VARIANTS, AttentionGate, GateConfig, gate_param_count
from .layers import Conv2d, ConvBNReLU, ConvTranspose2d, he_normal_
from .priornet import (
    PRIOR_SOURCES,
    PriorModel,
    VAEConfig,
    build_pyramid,
    prior_pyramid,
    pyramid_channels,
    pyramid_param_count,
)

TAP_NAMES = ("ASPP", "up6", "up7", "up8", "up9")


@dataclass(frozen=True)
class ModelConfig:
    base_c: int = 64
    ratio: int = 3
    conv_kind: Literal["depthwise_separable", "standard"] = "depthwise_separable"
    aspp_enabled: bool = True
    aspp_rates: tuple[int, ...] = (1, 6, 12, 18)
    aspp_dropout: float = 0.5
    attention: bool = True
    gate_variant: str = "triple"
    prior_fusion: Literal["add", "subtract"] = "add"
    attend_target: Literal["encoder", "decoder"] = "encoder"
    gate_inter_c: int = 0
    prior_enabled: bool = True
    normnet_source: str = "vae_recon"
    normnet_midc: int = 32
    normnet_fusion: Literal["conv", "convt"] = "conv"
    upsample: Literal["bilinear", "transposed"] = "bilinear"
    num_classes: int = 4
    head: Literal["softmax_multiclass", "sigmoid_binary"] = "softmax_multiclass"
    input_size: tuple[int, int] = (256, 256)
    in_channels: int = 3
    vae_base_c: int = 16
    vae_latent_dim: int = 128
    prior_sample: bool = False

    @classmethod
    def desk(cls, **overrides: Any) -> "ModelConfig":
        return replace(cls(base_c=8, input_size=(64, 64), normnet_midc=8), **overrides)

    @classmethod
    def full(cls, **overrides: Any) -> "ModelConfig":
        return replace(cls(), **overrides)

    @property
    def prior_active(self) -> bool:
        return self.prior_enabled and self.attention and self.gate_variant != "dual_no_prior"

    @property
    def effective_gate_variant(self) -> str:
        return self.gate_variant if self.prior_active else "dual_no_prior"

    @property
    def needs_vae(self) -> bool:
        return self.prior_active and self.normnet_source in ("vae_recon", "resnet_like")

    def vae_config(self) -> VAEConfig:
        return VAEConfig(self.in_channels, tuple(self.input_size), self.vae_base_c, self.vae_latent_dim)

    def level_channels(self) -> list[int]:
        return [self.base_c * 2**k for k in range(4)]

    def validate(self) -> "ModelConfig":
        problems = []
        h, w = self.input_size
        if h % 16 or w % 16 or h < 16 or w < 16:
            problems.append(f"input_size {self.input_size} must be positive multiples of 16")
        if self.base_c < 1:
            problems.append(f"base_c must be >= 1, got {self.base_c}")
        if self.ratio < 1:
            problems.append(f"ratio must be >= 1, got {self.ratio}")
        if self.conv_kind not in ("depthwise_separable", "standard"):
            problems.append(f"unknown conv_kind {self.conv_kind!r}")
        if self.head == "softmax_multiclass" and self.num_classes < 2:
            problems.append("softmax head needs num_classes >= 2")
        elif self.head == "sigmoid_binary" and self.num_classes != 1:
            problems.append("sigmoid head needs num_classes == 1")
        elif self.head not in ("softmax_multiclass", "sigmoid_binary"):
            problems.append(f"unknown head {self.head!r}")
        if self.gate_variant not in GATE_VARIANTS:
            problems.append(f"unknown gate_variant {self.gate_variant!r}")
        elif not self.prior_enabled and self.gate_variant not in ("triple", "dual_no_prior"):
            problems.append(f"gate_variant {self.gate_variant!r} needs prior maps but prior_enabled is false")
        if self.normnet_source not in PRIOR_SOURCES:
            problems.append(f"unknown normnet_source {self.normnet_source!r}")
        if self.normnet_midc < 1:
            problems.append(f"normnet_midc must be >= 1, got {self.normnet_midc}")
        if self.upsample not in ("bilinear", "transposed"):
            problems.append(f"unknown upsample {self.upsample!r}")
        if not 0.0 <= self.aspp_dropout < 1.0:
            problems.append(f"aspp_dropout must lie in [0, 1), got {self.aspp_dropout}")
        if not self.aspp_rates or min(self.aspp_rates) < 1:
            problems.append(f"aspp_rates must be positive, got {self.aspp_rates}")
        if problems:
            raise dc.ConfigurationError("invalid ModelConfig: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["aspp_rates"] = list(self.aspp_rates)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise dc.ConfigurationError(f"unknown ModelConfig keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("aspp_rates", "input_size"):
            if key in d:
                d[key] = tuple(int(v) for v in d[key])
        return cls(**d)


@dataclass
class Tap:
    features: Tensor
    alpha: Tensor | None = None


HeatmapBundle = dict[str, Tap]


class PriorAttUNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.level_channels()
        b = cfg.base_c

        self.stem = ConvBNReLU(cfg.in_channels, b, 3)
        enc_in = [b, ch[0], ch[1], ch[2]]
        self.encoder = nn.ModuleList(
            DenseDepthSepBlock(DenseBlockConfig(enc_in[k], ch[k], cfg.ratio, cfg.conv_kind)) for k in range(4)
        )
        if cfg.aspp_enabled:
            self.bottleneck = ASPP(AsppConfig(ch[3], 16 * b, tuple(cfg.aspp_rates), cfg.aspp_dropout))
        else:
            self.bottleneck = nn.Sequential(ConvBNReLU(ch[3], 16 * b, 3), ConvBNReLU(16 * b, 16 * b, 3))

        dec_c = ch[::-1]
        prev_c = [16 * b] + dec_c[:-1]
        if cfg.upsample == "transposed":
            self.upsamplers = nn.ModuleList(ConvTranspose2d(p, c, 2, 2) for p, c in zip(prev_c, dec_c))
        else:
            self.upsamplers = nn.ModuleList(Conv2d(p, c, 1, bias=True) for p, c in zip(prev_c, dec_c))
        prior_c = pyramid_channels(cfg.normnet_midc)
        if cfg.attention:
            self.gates = nn.ModuleList(
                AttentionGate(GateConfig(c, c, pc if cfg.prior_active else 0, cfg.gate_inter_c, cfg.prior_fusion,
                                         cfg.attend_target, cfg.effective_gate_variant))
                for c, pc in zip(dec_c, prior_c)
            )
        self.decoder = nn.ModuleList(
            DenseDepthSepBlock(DenseBlockConfig(2 * c, c, cfg.ratio, cfg.conv_kind)) for c in dec_c
        )
        self.head = Conv2d(b, cfg.num_classes, 1, bias=True)

        if cfg.prior_active:
            self.prior_pyramid = build_pyramid(cfg.normnet_source, cfg.normnet_midc, cfg.in_channels, cfg.normnet_fusion)
        if cfg.needs_vae:
            self.prior = PriorModel(cfg.vae_config())
            self.prior.requires_grad_(False)
            self.prior.eval()

    def train(self, mode: bool = True) -> "PriorAttUNet":
        super().train(mode)
        if hasattr(self, "prior"):
            self.prior.eval()
        return self

    def trainable_named_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("prior.")]

    def load_prior(self, vae: PriorModel) -> None:
        if not hasattr(self, "prior"):
            raise dc.ConfigurationError("this configuration does not use a VAE prior")
        self.prior.load_state_dict(vae.state_dict())
        self.prior.requires_grad_(False)
        self.prior.eval()

    def _upsample(self, k: int, x: Tensor) -> Tensor:
        if self.cfg.upsample == "transposed":
            return self.upsamplers[k](x)
        return self.upsamplers[k](dc.resize(x, "bilinear_up2"))

    def priors(self, image: Tensor) -> list[Tensor | None]:
        if not self.cfg.prior_active:
            return [None] * 4
        vae = getattr(self, "prior", None)
        return prior_pyramid(image, vae, self.prior_pyramid, self.cfg.normnet_source, self.cfg.prior_sample)

    def forward(self, image: Tensor) -> tuple[Tensor, HeatmapBundle]:
        cfg = self.cfg
        expected = (cfg.in_channels, *cfg.input_size)
        if image.dim() != 4 or tuple(image.shape[1:]) != expected:
            raise dc.ConfigurationError(f"model expects input (n, {expected[0]}, {expected[1]}, {expected[2]}), got {tuple(image.shape)}")
        taps: HeatmapBundle = {}
        x = self.stem(image)
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = dc.pool(x, "maxpool2x2")
        x = self.bottleneck(x)
        taps["ASPP"] = Tap(x)

        priors = self.priors(image)
        for k in range(4):
            up = self._upsample(k, x)
            skip = skips[3 - k]
            prior = priors[k]
            if prior is not None and prior.shape[2:] != skip.shape[2:]:
                prior = dc.resize(prior, "bilinear", tuple(skip.shape[2:]))
            if cfg.attention:
                attended, alpha = self.gates[k](skip, up, prior)
            else:
                attended, alpha = skip, None
            x = self.decoder[k](dc.combine([attended, up], "concat_channels"))
            taps[TAP_NAMES[k + 1]] = Tap(x, alpha)

        logits = self.head(x)
        if cfg.head == "sigmoid_binary":
            return torch.sigmoid(logits), taps
        return torch.softmax(logits, dim=1), taps


def build_network(cfg: ModelConfig, seed: int = 0) -> PriorAttUNet:
    """Construct and He-initialize a network; identical seeds give identical weights."""
    model = PriorAttUNet(cfg)
    gen = torch.Generator().manual_seed(seed)
    he_normal_(model, gen)
    return model


def count_params(model: nn.Module) -> int:
    """Trainable element count; a frozen VAE prior is excluded (see :func:`count_prior_params`)."""
    if isinstance(model, PriorAttUNet):
        return sum(p.numel() for _, p in model.trainable_named_parameters())
    return sum(p.numel() for p in model.parameters())


def count_prior_params(model: PriorAttUNet) -> int:
    return sum(p.numel() for p in model.prior.parameters()) if hasattr(model, "prior") else 0


def param_breakdown(model: PriorAttUNet) -> dict[str, int]:
    out: dict[str, int] = {}
    for name, p in model.trainable_named_parameters():
        top = name.split(".", 1)[0]
        out[top] = out.get(top, 0) + p.numel()
    return out


def analytic_param_breakdown(cfg: ModelConfig) -> dict[str, int]:
    """Closed-form parameter counts per top-level component."""
    cfg.validate()
    b = cfg.base_c
    ch = cfg.level_channels()
    out = {"stem": 9 * cfg.in_channels * b + 2 * b}
    enc_in = [b, ch[0], ch[1], ch[2]]
    out["encoder"] = sum(dense_block_param_count(DenseBlockConfig(enc_in[k], ch[k], cfg.ratio, cfg.conv_kind)) for k in range(4))
    if cfg.aspp_enabled:
        out["bottleneck"] = aspp_param_count(AsppConfig(ch[3], 16 * b, tuple(cfg.aspp_rates), cfg.aspp_dropout))
    else:
        out["bottleneck"] = 9 * ch[3] * 16 * b + 2 * 16 * b + 9 * (16 * b) ** 2 + 2 * 16 * b
    dec_c = ch[::-1]
    prev_c = [16 * b] + dec_c[:-1]
    k2 = 4 if cfg.upsample == "transposed" else 1
    out["upsamplers"] = sum(k2 * p * c + c for p, c in zip(prev_c, dec_c))
    if cfg.attention:
        prior_c = pyramid_channels(cfg.normnet_midc)
        out["gates"] = sum(
            gate_param_count(GateConfig(c, c, pc if cfg.prior_active else 0, cfg.gate_inter_c, cfg.prior_fusion,
                                        cfg.attend_target, cfg.effective_gate_variant))
            for c, pc in zip(dec_c, prior_c)
        )
    out["decoder"] = sum(dense_block_param_count(DenseBlockConfig(2 * c, c, cfg.ratio, cfg.conv_kind)) for c in dec_c)
    out["head"] = b * cfg.num_classes + cfg.num_classes
    if cfg.prior_active:
        out["prior_pyramid"] = pyramid_param_count(cfg.normnet_source, cfg.normnet_midc, cfg.in_channels, cfg.normnet_fusion)
    return out


def analytic_param_count(cfg: ModelConfig) -> int:
    return sum(analytic_param_breakdown(cfg).values())


@torch.no_grad()
def predict_mask(model: PriorAttUNet, image: Tensor) -> Tensor:
    """Integer class mask ``(n, h, w)``; ties go to the lower class index."""
    was_training = model.training
    model.eval()
    probs, _ = model(image)
    model.train(was_training)
    if model.cfg.head == "sigmoid_binary":
        return (probs[:, 0] > 0.5).long()
    return probs.argmax(dim=1)
