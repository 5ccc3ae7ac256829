"""Generative prior path: a VAE reconstructing fluid-free slices and the
feature pyramids that turn a (reconstructed) image into per-level prior maps."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import diffcore as dc
from .layers import BatchNorm2d, Conv2d, ConvBNReLU, ConvTranspose2d

PriorSource = Literal["vae_recon", "raw", "downsample", "resnet_like"]
PRIOR_SOURCES: tuple[str, ...] = ("vae_recon", "raw", "downsample", "resnet_like")


@dataclass(frozen=True)
class VAEConfig:
    in_c: int = 3
    input_size: tuple[int, int] = (64, 64)
    base_c: int = 16
    latent_dim: int = 128


def _check_div16(h: int, w: int) -> None:
    if h % 16 or w % 16 or h < 16 or w < 16:
        raise dc.ConfigurationError(f"spatial dims must be positive multiples of 16, got {(h, w)}")


class PriorModel(nn.Module):
    """Convolutional VAE. The latent comes from global-average-pooled encoder features."""

    def __init__(self, cfg: VAEConfig):
        super().__init__()
        _check_div16(*cfg.input_size)
        self.cfg = cfg
        c = cfg.base_c
        chans = [cfg.in_c, c, 2 * c, 4 * c, 8 * c]
        self.encoder = nn.Sequential(*(ConvBNReLU(chans[k], chans[k + 1], 3, stride=2) for k in range(4)))
        self.mu_head = nn.Linear(8 * c, cfg.latent_dim)
        self.logvar_head = nn.Linear(8 * c, cfg.latent_dim)
        self.seed_hw = (cfg.input_size[0] // 16, cfg.input_size[1] // 16)
        self.from_latent = nn.Linear(cfg.latent_dim, 8 * c * self.seed_hw[0] * self.seed_hw[1])
        up = [8 * c, 4 * c, 2 * c, c, c]
        self.decoder = nn.ModuleList(ConvBNReLU(up[k], up[k + 1], 3) for k in range(4))
        self.to_image = Conv2d(c, cfg.in_c, 3, padding=1, bias=True)

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        expected = (self.cfg.in_c, *self.cfg.input_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise dc.ConfigurationError(f"VAE expects input (n, {expected[0]}, {expected[1]}, {expected[2]}), got {tuple(x.shape)}")
        pooled = self.encoder(x).mean(dim=(2, 3))
        return self.mu_head(pooled), self.logvar_head(pooled)

    def decode(self, z: Tensor) -> Tensor:
        if z.dim() != 2 or z.shape[1] != self.cfg.latent_dim:
            raise dc.ConfigurationError(f"latent must have shape (n, {self.cfg.latent_dim}), got {tuple(z.shape)}")
        h = torch.relu(self.from_latent(z)).view(z.shape[0], 8 * self.cfg.base_c, *self.seed_hw)
        for stage in self.decoder:
            h = stage(dc.resize(h, "bilinear_up2"))
        return dc.activate(self.to_image(h), "sigmoid")

    def reconstruct(self, x: Tensor, sample: bool = False, generator: torch.Generator | None = None) -> Tensor:
        """Decode the posterior mean (or a reparameterized sample when ``sample``)."""
        mu, logvar = self.encode(x)
        z = reparameterize(mu, logvar, generator) if sample else mu
        return self.decode(z)

    def forward(self, x: Tensor, generator: torch.Generator | None = None) -> tuple[Tensor, Tensor, Tensor]:
        mu, logvar = self.encode(x)
        return self.decode(reparameterize(mu, logvar, generator)), mu, logvar


def vae_encode(x: Tensor, m: PriorModel) -> tuple[Tensor, Tensor]:
    return m.encode(x)


def vae_decode(z: Tensor, m: PriorModel) -> Tensor:
    return m.decode(z)


def reparameterize(mu: Tensor, logvar: Tensor, generator: torch.Generator | None = None,
                   eps: Tensor | None = None) -> Tensor:
    """``z = mu + eps * exp(logvar / 2)``; pass ``eps`` to fix the noise."""
    if mu.shape != logvar.shape:
        raise dc.ConfigurationError(f"mu {tuple(mu.shape)} and logvar {tuple(logvar.shape)} differ in shape")
    if eps is None:
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + eps * torch.exp(0.5 * logvar)


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over latent dims, averaged over the batch."""
    return (-0.5 * (1 + logvar - mu.pow(2) - logvar.exp()).sum(dim=-1)).mean()


def reconstruction_error(x: Tensor, x_rec: Tensor, reduction: Literal["sum", "mean"] = "sum") -> Tensor:
    """Squared error summed over pixels per item (``sum``) or averaged over pixels (``mean``), then batch-averaged."""
    if x.shape != x_rec.shape:
        raise dc.ConfigurationError(f"reconstruction shape {tuple(x_rec.shape)} != input shape {tuple(x.shape)}")
    per_item = (x - x_rec).pow(2).flatten(1)
    per_item = per_item.sum(dim=1) if reduction == "sum" else per_item.mean(dim=1)
    return per_item.mean()


def vae_loss(x: Tensor, x_rec: Tensor, mu: Tensor, logvar: Tensor, beta: float = 1.0,
             reduction: Literal["sum", "mean"] = "sum") -> Tensor:
    return reconstruction_error(x, x_rec, reduction) + beta * kl_divergence(mu, logvar)


# ---------------------------------------------------------------------------
# prior feature pyramids


def pyramid_channels(midc: int) -> tuple[int, int, int, int]:
    """Prior channels per segmentation decoder level, deepest first."""
    return (4 * midc, 2 * midc, midc, midc)


def pyramid_scales() -> tuple[int, int, int, int]:
    """Downsampling factor of each prior map, deepest first."""
    return (8, 4, 2, 1)


class NormNet(nn.Module):
    """Four stride-2 conv stages (channels midc * 2^k) mirrored by four fusion stages.

    Each fusion stage brings the deeper map to the skip's resolution (bilinear
    upsampling, or a stride-2 transposed conv with ``fusion='convt'``), concatenates
    the skip and applies a 3x3 Conv-BN-ReLU.  The shallowest skip is the input image.
    """

    def __init__(self, midc: int = 32, in_c: int = 3, fusion: Literal["conv", "convt"] = "conv"):
        super().__init__()
        if midc < 1:
            raise dc.ConfigurationError(f"midc must be positive, got {midc}")
        if fusion not in ("conv", "convt"):
            raise dc.ConfigurationError(f"unknown NormNet fusion {fusion!r}")
        self.midc, self.in_c, self.fusion = midc, in_c, fusion
        m = midc
        enc = [in_c, m, 2 * m, 4 * m, 8 * m]
        self.encoder = nn.ModuleList(ConvBNReLU(enc[k], enc[k + 1], 3, stride=2) for k in range(4))
        # (deeper channels, skip channels, out channels), deepest first
        self.plan = [(8 * m, 4 * m, 4 * m), (4 * m, 2 * m, 2 * m), (2 * m, m, m), (m, in_c, m)]
        self.fuse = nn.ModuleList(ConvBNReLU(d + s, o, 3) for d, s, o in self.plan)
        if fusion == "convt":
            self.up = nn.ModuleList(ConvTranspose2d(d, d, 2, 2) for d, _, _ in self.plan)

    def encode(self, x: Tensor) -> list[Tensor]:
        feats = []
        for stage in self.encoder:
            x = stage(x)
            feats.append(x)
        return feats

    def forward(self, x: Tensor) -> list[Tensor]:
        _check_div16(x.shape[2], x.shape[3])
        enc = self.encode(x)
        skips = [enc[2], enc[1], enc[0], x]
        deeper, outs = enc[3], []
        for k, skip in enumerate(skips):
            if self.fusion == "convt":
                up = self.up[k](deeper)
            else:
                up = dc.resize(deeper, "bilinear", tuple(skip.shape[2:]))
            deeper = self.fuse[k](dc.combine([up, skip], "concat_channels"))
            outs.append(deeper)
        return outs


def normnet_features(x_rec: Tensor, n: NormNet) -> list[Tensor]:
    return n(x_rec)


def normnet_param_count(midc: int, in_c: int = 3, fusion: str = "conv") -> int:
    m = midc
    enc = [in_c, m, 2 * m, 4 * m, 8 * m]
    total = sum(9 * enc[k] * enc[k + 1] + 2 * enc[k + 1] for k in range(4))
    plan = [(8 * m, 4 * m, 4 * m), (4 * m, 2 * m, 2 * m), (2 * m, m, m), (m, in_c, m)]
    total += sum(9 * (d + s) * o + 2 * o for d, s, o in plan)
    if fusion == "convt":
        total += sum(4 * d * d + d for d, _, _ in plan)
    return total


class DownsamplePyramid(nn.Module):
    """Average-pooled copies of the image projected to the prior channel counts."""

    def __init__(self, midc: int = 32, in_c: int = 3):
        super().__init__()
        self.proj = nn.ModuleList(Conv2d(in_c, c, 1, bias=True) for c in pyramid_channels(midc))

    def forward(self, x: Tensor) -> list[Tensor]:
        _check_div16(x.shape[2], x.shape[3])
        outs = []
        for proj, s in zip(self.proj, pyramid_scales()):
            pooled = F.avg_pool2d(x, kernel_size=s, stride=s) if s > 1 else x
            outs.append(proj(pooled))
        return outs


def downsample_param_count(midc: int, in_c: int = 3) -> int:
    return sum(in_c * c + c for c in pyramid_channels(midc))


class ResidualBlock(nn.Module):
    def __init__(self, in_c: int, out_c: int, stride: int):
        super().__init__()
        self.conv1 = ConvBNReLU(in_c, out_c, 3, stride=stride)
        self.conv2 = nn.Sequential(Conv2d(out_c, out_c, 3, padding=1, bias=False), BatchNorm2d(out_c))
        self.shortcut = None
        if in_c != out_c or stride != 1:
            self.shortcut = nn.Sequential(Conv2d(in_c, out_c, 1, stride=stride, bias=False), BatchNorm2d(out_c))

    def forward(self, x: Tensor) -> Tensor:
        skip = x if self.shortcut is None else self.shortcut(x)
        return torch.relu(self.conv2(self.conv1(x)) + skip)


def residual_block_param_count(in_c: int, out_c: int, stride: int) -> int:
    n = 9 * in_c * out_c + 2 * out_c + 9 * out_c * out_c + 2 * out_c
    if in_c != out_c or stride != 1:
        n += in_c * out_c + 2 * out_c
    return n


def _resnet_plan(midc: int, in_c: int) -> list[tuple[int, int, int]]:
    m = midc
    return [(in_c, m, 1), (m, m, 2), (m, 2 * m, 2), (2 * m, 4 * m, 2)]


class ResNetPyramid(nn.Module):
    """Plain residual feature extractor emitting maps at 1/8, 1/4, 1/2 and full resolution."""

    def __init__(self, midc: int = 32, in_c: int = 3):
        super().__init__()
        self.stages = nn.ModuleList(ResidualBlock(i, o, s) for i, o, s in _resnet_plan(midc, in_c))

    def forward(self, x: Tensor) -> list[Tensor]:
        _check_div16(x.shape[2], x.shape[3])
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs[::-1]


def resnet_param_count(midc: int, in_c: int = 3) -> int:
    return sum(residual_block_param_count(i, o, s) for i, o, s in _resnet_plan(midc, in_c))


def build_pyramid(source: str, midc: int, in_c: int = 3, fusion: str = "conv") -> nn.Module:
    if source in ("vae_recon", "raw"):
        return NormNet(midc, in_c, fusion)
    if source == "downsample":
        return DownsamplePyramid(midc, in_c)
    if source == "resnet_like":
        return ResNetPyramid(midc, in_c)
    raise dc.ConfigurationError(f"unknown prior source {source!r}; choose from {PRIOR_SOURCES}")


def pyramid_param_count(source: str, midc: int, in_c: int = 3, fusion: str = "conv") -> int:
    if source in ("vae_recon", "raw"):
        return normnet_param_count(midc, in_c, fusion)
    if source == "downsample":
        return downsample_param_count(midc, in_c)
    if source == "resnet_like":
        return resnet_param_count(midc, in_c)
    raise dc.ConfigurationError(f"unknown prior source {source!r}")


def prior_pyramid(image: Tensor, vae: PriorModel | None, pyramid: nn.Module, source: str,
                  sample: bool = False, generator: torch.Generator | None = None) -> list[Tensor]:
    """Prior maps for each decoder level, deepest first.

    ``vae_recon`` and ``resnet_like`` run the pyramid on the VAE reconstruction;
    ``raw`` and ``downsample`` run it on the image itself.
    """
    if source in ("vae_recon", "resnet_like"):
        if vae is None:
            raise dc.ConfigurationError(f"prior source {source!r} needs VAE weights")
        with torch.no_grad():
            vae_mode = vae.training
            vae.eval()
            x_rec = vae.reconstruct(image, sample=sample, generator=generator)
            vae.train(vae_mode)
        return pyramid(x_rec)
    if source in ("raw", "downsample"):
        return pyramid(image)
    raise dc.ConfigurationError(f"unknown prior source {source!r}; choose from {PRIOR_SOURCES}")
