"""AdamW with decoupled weight decay, plus the training hyperparameter bundle."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Literal, Sequence

import torch
from torch import Tensor, nn

from .diffcore import ConfigurationError


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.99)
    eps_opt: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 150
    seed: int = 0
    w_dice: float = 1.0
    w_lovasz: float = 1.0
    dice_eps: float = 1.0
    lovasz_class_mode: Literal["all", "present"] = "all"
    split_ratio: float = 0.8
    selection_split: Literal["test", "val"] = "test"
    val_ratio: float = 0.125
    checkpoint_dir: str = "checkpoints"
    # VAE pretraining
    prior_epochs: int = 40
    prior_lr: float = 1e-3
    prior_batch_size: int = 16
    prior_beta: float = 1.0
    prior_recon_reduction: Literal["sum", "mean"] = "sum"
    prior_val_ratio: float = 0.2

    @classmethod
    def desk(cls, **overrides: Any) -> "TrainConfig":
        return replace(cls(batch_size=4, epochs=30, lr=1e-3, prior_epochs=30), **overrides)

    @classmethod
    def full(cls, **overrides: Any) -> "TrainConfig":
        return replace(cls(), **overrides)

    def validate(self) -> "TrainConfig":
        problems = []
        if self.lr <= 0 or self.prior_lr <= 0:
            problems.append("learning rates must be positive")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            problems.append(f"betas must lie in [0, 1), got {self.betas}")
        if self.eps_opt <= 0:
            problems.append("eps_opt must be positive")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if self.batch_size < 1 or self.prior_batch_size < 1:
            problems.append("batch sizes must be >= 1")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.w_dice < 0 or self.w_lovasz < 0:
            problems.append("loss weights must be >= 0")
        if not 0 < self.split_ratio < 1:
            problems.append("split_ratio must lie in (0, 1)")
        if self.selection_split not in ("test", "val"):
            problems.append(f"selection_split must be test or val, got {self.selection_split!r}")
        if self.lovasz_class_mode not in ("all", "present"):
            problems.append(f"unknown lovasz_class_mode {self.lovasz_class_mode!r}")
        if problems:
            raise ConfigurationError("invalid TrainConfig: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(float(b) for b in d["betas"])
        return cls(**d)


@dataclass
class AdamWState:
    m: list[Tensor] = field(default_factory=list)
    v: list[Tensor] = field(default_factory=list)
    t: int = 0


@torch.no_grad()
def adamw_step(params: Sequence[Tensor], grads: Sequence[Tensor], state: AdamWState, cfg: TrainConfig,
               t: int, lr: float | None = None, names: Sequence[str] | None = None) -> None:
    """One in-place AdamW update at step ``t`` (1-based).

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta, with the
    decay applied to the pre-update theta.  Every gradient is checked before
    anything is modified, so a non-finite gradient leaves params and state untouched.
    """
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"param {k} has shape {tuple(p.shape)} but grad {tuple(g.shape)}")
        if not torch.isfinite(g).all():
            label = names[k] if names else f"#{k}"
            raise NonFiniteGradient(f"non-finite gradient in parameter {label} at step {t}")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    c1, c2 = 1 - b1**t, 1 - b2**t
    step_size = lr / c1
    sqrt_c2 = math.sqrt(c2)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v.sqrt() / sqrt_c2).add_(cfg.eps_opt)
        decay = p * (lr * cfg.weight_decay) if cfg.weight_decay else None
        p.addcdiv_(m, denom, value=-step_size)
        if decay is not None:
            p.sub_(decay)
    state.t = t


class AdamW:
    """Thin stateful wrapper over :func:`adamw_step` for a list of named parameters."""

    def __init__(self, named_params: Sequence[tuple[str, nn.Parameter]], cfg: TrainConfig, lr: float | None = None):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.cfg = cfg
        self.lr = cfg.lr if lr is None else lr
        self.state = AdamWState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        adamw_step(self.params, grads, self.state, self.cfg, self.state.t + 1, self.lr, self.names)
