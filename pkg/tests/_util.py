"""Shared test helpers."""
import numpy as np
import torch

from prior_attunet import diffcore as dc
from prior_attunet.diffcore import BatchNormParams, ConvParams


def spread(*shape, seed=0):
    """Distinct values at least 0.01 apart and away from 0, so a 1e-3 step never crosses a kink or tie."""
    n = int(np.prod(shape))
    perm = np.random.default_rng(seed).permutation(n)
    vals = (perm - n / 2 + 0.5) * (4.0 / n) + np.sign(perm - n / 2 + 0.5) * 0.05
    return torch.tensor(vals, dtype=torch.float64).view(*shape)


def rand(*shape, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype)


OPS = {
    "conv2d": lambda x, w: dc.conv2d(x, ConvParams(w["w33"], w["b"], 1, 1, 1)),
    "conv2d_dilated_strided": lambda x, w: dc.conv2d(x, ConvParams(w["w33"], w["b"], 2, 2, 2)),
    "depthwise_conv2d": lambda x, w: dc.depthwise_conv2d(x, ConvParams(w["dw"], None, 1, 1, 1, 3)),
    "transposed_conv2d": lambda x, w: dc.transposed_conv2d(x, ConvParams(w["wt"], w["b"], 2)),
    "batch_norm_train": lambda x, w: dc.batch_norm(x, BatchNormParams(w["g"], w["beta"], torch.zeros(3), torch.ones(3)), True),
    "batch_norm_eval": lambda x, w: dc.batch_norm(x, BatchNormParams(w["g"], w["beta"], torch.full((3,), 0.2), torch.full((3,), 1.5)), False),
    "relu": lambda x, w: dc.activate(x, "relu"),
    "sigmoid": lambda x, w: dc.activate(x, "sigmoid"),
    "maxpool2x2": lambda x, w: dc.pool(x, "maxpool2x2"),
    "global_max": lambda x, w: dc.pool(x, "global_max"),
    "bilinear_up2": lambda x, w: dc.resize(x, "bilinear_up2"),
    "bilinear": lambda x, w: dc.resize(x, "bilinear", (5, 7)),
    "concat": lambda x, w: dc.combine([x, x * w["g"].view(1, 3, 1, 1)], "concat_channels"),
    "add": lambda x, w: dc.combine([x, x * w["g"].view(1, 3, 1, 1)], "add"),
    "mul_broadcast": lambda x, w: dc.combine([x, torch.sigmoid(x[:, :1])], "mul_broadcast"),
    "dropout": lambda x, w: dc.dropout(x, 0.3, True, torch.Generator().manual_seed(5)),
}


def op_params(seed):
    return {
        "w33": rand(4, 3, 3, 3, seed=seed + 10), "b": rand(4, seed=seed + 11), "dw": rand(3, 1, 3, 3, seed=seed + 12),
        "wt": rand(3, 4, 2, 2, seed=seed + 13), "g": rand(3, seed=seed + 14) + 2, "beta": rand(3, seed=seed + 15),
    }


def op_gradient_report(name, seed):
    """Central-difference check of one diffcore op under a random linear readout (call in float64)."""
    x = spread(2, 3, 6, 6, seed=seed).requires_grad_(True)
    w = {k: v.requires_grad_(True) for k, v in op_params(seed).items()}
    u = rand(*OPS[name](x, w).shape, seed=seed + 99)
    f = lambda: (OPS[name](x, w) * u).sum()  # noqa: E731
    used = [x] + [v for v in w.values() if torch.autograd.grad(f(), v, allow_unused=True)[0] is not None]
    return dc.check_gradients(f, used, step=1e-3, tol=1e-4)
