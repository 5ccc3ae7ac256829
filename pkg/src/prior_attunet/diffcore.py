"""Differentiable tensor primitives used by every block of the network.

All feature maps are rank-4 ``torch.Tensor`` objects laid out as
``(n, c, h, w)``.  Gradients come from torch autograd; :func:`check_gradients`
verifies them independently with central finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor


class ConfigurationError(ValueError):
    """Raised when shapes or hyperparameters do not fit together."""


@dataclass
class ConvParams:
    """Weights and geometry of a (possibly grouped or transposed) convolution.

    For ordinary convolutions ``weight`` has shape ``(out_c, in_c // groups, kh, kw)``;
    for transposed convolutions it follows the torch convention
    ``(in_c, out_c // groups, kh, kw)``.
    """

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self) -> None:
        if self.stride < 1 or self.dilation < 1 or self.padding < 0 or self.groups < 1:
            raise ConfigurationError(
                f"invalid conv geometry: stride={self.stride} padding={self.padding} "
                f"dilation={self.dilation} groups={self.groups}"
            )

    @property
    def kernel_extent(self) -> tuple[int, int]:
        kh, kw = self.weight.shape[-2:]
        return (kh - 1) * self.dilation + 1, (kw - 1) * self.dilation + 1

    @property
    def is_depthwise(self) -> bool:
        return self.weight.shape[1] == 1 and self.groups > 1


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    worst: tuple[int, int] | None = None  # (param index, flat element index)
    failures: list[str] = field(default_factory=list)


def _require_rank4(x: Tensor, name: str = "x") -> None:
    if x.dim() != 4:
        raise ConfigurationError(f"{name} must be rank-4 (n, c, h, w), got shape {tuple(x.shape)}")


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (size + 2 * padding - ((kernel - 1) * dilation + 1)) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    _require_rank4(x)
    in_c = x.shape[1]
    if in_c % p.groups != 0 or p.weight.shape[1] * p.groups != in_c or p.weight.shape[0] % p.groups != 0:
        raise ConfigurationError(
            f"input shape {tuple(x.shape)} incompatible with kernel shape "
            f"{tuple(p.weight.shape)} (groups={p.groups})"
        )
    eh, ew = p.kernel_extent
    if x.shape[2] + 2 * p.padding < eh or x.shape[3] + 2 * p.padding < ew:
        raise ConfigurationError(
            f"input shape {tuple(x.shape)} smaller than kernel extent {(eh, ew)} with padding {p.padding}"
        )
    return F.conv2d(x, p.weight, p.bias, stride=p.stride, padding=p.padding, dilation=p.dilation, groups=p.groups)


def depthwise_conv2d(x: Tensor, p: ConvParams) -> Tensor:
    _require_rank4(x)
    if p.groups != x.shape[1] or p.weight.shape[1] != 1 or p.weight.shape[0] != x.shape[1]:
        raise ConfigurationError(
            f"depthwise conv needs groups == in_c == out_c and one input channel per group; "
            f"got input {tuple(x.shape)}, kernel {tuple(p.weight.shape)}, groups={p.groups}"
        )
    return conv2d(x, p)


def transposed_conv2d(x: Tensor, p: ConvParams) -> Tensor:
    _require_rank4(x)
    if p.weight.shape[0] != x.shape[1]:
        raise ConfigurationError(
            f"transposed conv kernel {tuple(p.weight.shape)} expects {p.weight.shape[0]} input "
            f"channels, got input {tuple(x.shape)}"
        )
    return F.conv_transpose2d(
        x, p.weight, p.bias, stride=p.stride, padding=p.padding, groups=p.groups, dilation=p.dilation
    )


def batch_norm(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    """Per-channel normalization over ``(n, h, w)``.

    In training mode batch statistics are used and the running estimates are
    updated in place (unbiased variance, as is conventional).  A batch with a
    single value per channel normalizes to ``beta`` instead of failing.
    """
    _require_rank4(x)
    c = x.shape[1]
    if p.gamma.shape[0] != c:
        raise ConfigurationError(f"batch norm has {p.gamma.shape[0]} channels, input has {c}")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if not training or count > 1:
        # fused kernel; same formula, running stats updated with the unbiased variance
        return torch.batch_norm(x, p.gamma, p.beta, p.running_mean, p.running_var, training,
                                p.momentum, p.eps, False)
    # one value per channel: batch variance is zero, output collapses to beta
    mean = x.mean(dim=(0, 2, 3))
    var = torch.zeros_like(mean)
    with torch.no_grad():
        p.running_mean.mul_(1 - p.momentum).add_(p.momentum * mean.detach())
        p.running_var.mul_(1 - p.momentum)
    scale = (p.gamma * torch.rsqrt(var + p.eps)).view(1, c, 1, 1)
    return (x - mean.view(1, c, 1, 1)) * scale + p.beta.view(1, c, 1, 1)


def activate(x: Tensor, kind: Literal["relu", "sigmoid"]) -> Tensor:
    if kind == "relu":
        return torch.relu(x)
    if kind == "sigmoid":
        return torch.sigmoid(x)
    raise ConfigurationError(f"unknown activation {kind!r}")


def pool(x: Tensor, kind: Literal["maxpool2x2", "global_max"]) -> Tensor:
    """Max pooling; gradients go to the first maximal element in scan order."""
    _require_rank4(x)
    n, c, h, w = x.shape
    if kind == "maxpool2x2":
        if h % 2 or w % 2:
            raise ConfigurationError(f"maxpool2x2 needs even spatial dims, got {(h, w)}")
        return F.max_pool2d(x, kernel_size=2, stride=2)
    if kind == "global_max":
        flat = x.reshape(n, c, h * w)
        idx = flat.argmax(dim=2, keepdim=True)
        return flat.gather(2, idx).view(n, c, 1, 1)
    raise ConfigurationError(f"unknown pooling {kind!r}")


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    """Source index for each output index under floor mapping: ``floor(i * n_in / n_out)``."""
    return (np.arange(n_out, dtype=np.int64) * n_in) // n_out


def resize(x: Tensor, kind: Literal["bilinear_up2", "bilinear", "nearest"], target: tuple[int, int] | None = None) -> Tensor:
    """Bilinear (half-pixel centers) or nearest-neighbour (floor) resampling.

    ``bilinear_up2`` doubles both spatial dims and ignores ``target``.
    """
    _require_rank4(x)
    if kind == "bilinear_up2":
        target = (x.shape[2] * 2, x.shape[3] * 2)
    if target is None or target[0] < 1 or target[1] < 1:
        raise ConfigurationError(f"invalid resize target {target}")
    if tuple(target) == tuple(x.shape[2:]):
        return x
    if kind in ("bilinear", "bilinear_up2"):
        return F.interpolate(x, size=tuple(target), mode="bilinear", align_corners=False)
    if kind == "nearest":
        rows = torch.from_numpy(nearest_indices(x.shape[2], target[0]))
        cols = torch.from_numpy(nearest_indices(x.shape[3], target[1]))
        return x.detach()[:, :, rows][:, :, :, cols]
    raise ConfigurationError(f"unknown resize kind {kind!r}")


def combine(xs: Sequence[Tensor], kind: Literal["concat_channels", "add", "mul_broadcast"]) -> Tensor:
    if not xs:
        raise ConfigurationError("combine needs at least one tensor")
    for x in xs:
        _require_rank4(x)
    first = xs[0]
    if kind == "concat_channels":
        for i, x in enumerate(xs[1:], start=1):
            if x.shape[0] != first.shape[0] or x.shape[2:] != first.shape[2:]:
                raise ConfigurationError(
                    f"concat input {i} has shape {tuple(x.shape)}, incompatible with {tuple(first.shape)}"
                )
        return torch.cat(list(xs), dim=1)
    if kind == "add":
        out = first
        for i, x in enumerate(xs[1:], start=1):
            if x.shape != first.shape:
                raise ConfigurationError(f"add input {i} has shape {tuple(x.shape)}, expected {tuple(first.shape)}")
            out = out + x
        return out
    if kind == "mul_broadcast":
        if len(xs) != 2:
            raise ConfigurationError("mul_broadcast takes exactly two tensors")
        a, b = xs
        ok_c = b.shape[1] in (1, a.shape[1])
        ok_hw = b.shape[2:] == a.shape[2:] or tuple(b.shape[2:]) == (1, 1)
        if b.shape[0] != a.shape[0] or not ok_c or not ok_hw:
            raise ConfigurationError(
                f"mul_broadcast operand 1 has shape {tuple(b.shape)}, cannot broadcast onto {tuple(a.shape)}"
            )
        return a * b
    raise ConfigurationError(f"unknown combine kind {kind!r}")


def dropout(x: Tensor, rate: float, training: bool, generator: torch.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``; identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


def check_gradients(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-3,
    tol: float = 1e-4,
    max_elements: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``f()`` against central differences.

    ``params`` must be leaf tensors with ``requires_grad=True`` that ``f``
    closes over; they are perturbed in place and restored.  When
    ``max_elements`` is set, a seeded random subsample of that many elements
    (spread over all params proportionally) is checked.  The relative error of
    one element is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if step <= 0:
        raise ConfigurationError("step must be positive")
    for p in params:
        p.grad = None
    value = f()
    if not torch.isfinite(value).all():
        return GradCheckReport(float("inf"), False, 0, None, ["f is not finite at the base point"])
    analytic = torch.autograd.grad(value, list(params), allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, analytic)]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    if max_elements is None or max_elements >= total:
        picks = [(i, j) for i, s in enumerate(sizes) for j in range(s)]
    else:
        rng = np.random.default_rng(seed)
        flat = np.sort(rng.choice(total, size=max_elements, replace=False))
        offsets = np.cumsum([0] + sizes)
        picks = []
        for k in flat:
            i = int(np.searchsorted(offsets, k, side="right") - 1)
            picks.append((i, int(k - offsets[i])))

    worst, worst_err, failures = None, 0.0, []
    with torch.no_grad():
        for i, j in picks:
            view = params[i].view(-1)
            orig = view[j].item()
            view[j] = orig + step
            f_plus = f().item()
            view[j] = orig - step
            f_minus = f().item()
            view[j] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                failures.append(f"non-finite f at param {i} element {j}")
                worst, worst_err = (i, j), float("inf")
                continue
            numeric = (f_plus - f_minus) / (2 * step)
            a = analytic[i].view(-1)[j].item()
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if err > worst_err:
                worst, worst_err = (i, j), err
    passed = not failures and worst_err <= tol
    if not passed and not failures:
        failures.append(f"max relative error {worst_err:.3e} at param {worst[0]} element {worst[1]} exceeds {tol:g}")
    return GradCheckReport(worst_err, passed, len(picks), worst, failures)
