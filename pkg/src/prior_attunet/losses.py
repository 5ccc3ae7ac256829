"""Dice and Lovasz-Jaccard training losses; DSC / mDSC evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
import torch
from torch import Tensor

CLASS_NAMES = ("bg", "irf", "srf", "ped")
CSV_HEADER = "split,epoch,dsc_bg,dsc_irf,dsc_srf,dsc_ped,mdsc"


def _one_hot_planes(gt: Tensor, num_classes: int, dtype: torch.dtype) -> Tensor:
    """``(n, C, h, w)`` indicator planes; a single-channel prediction is treated as foreground vs rest."""
    if num_classes == 1:
        return (gt > 0).to(dtype).unsqueeze(1)
    classes = torch.arange(num_classes, device=gt.device).view(1, -1, 1, 1)
    return (gt.unsqueeze(1) == classes).to(dtype)


def _check(pred: Tensor, gt: Tensor) -> None:
    if pred.dim() != 4 or gt.dim() != 3 or pred.shape[0] != gt.shape[0] or pred.shape[2:] != gt.shape[1:]:
        raise ValueError(f"prediction {tuple(pred.shape)} and mask {tuple(gt.shape)} are inconsistent")


def dice_loss_per_class(pred: Tensor, gt: Tensor, eps: float = 1.0) -> Tensor:
    _check(pred, gt)
    g = _one_hot_planes(gt, pred.shape[1], pred.dtype)
    dims = (0, 2, 3)
    inter = (pred * g).sum(dims)
    return 1 - (2 * inter + eps) / (pred.sum(dims) + g.sum(dims) + eps)


def dice_loss(pred: Tensor, gt: Tensor, eps: float = 1.0) -> Tensor:
    """Soft Dice loss per class over the whole batch, averaged over classes."""
    return dice_loss_per_class(pred, gt, eps).mean()


def lovasz_grad(fg_sorted: Tensor) -> Tensor:
    """Increments of the Jaccard loss along a sorted error ordering.

    ``J(k)`` is the Jaccard loss when the first ``k`` sorted pixels are the
    mispredicted ones; the result holds ``J(k) - J(k - 1)``.
    """
    gts = fg_sorted.sum()
    intersection = gts - fg_sorted.cumsum(0)
    union = gts + (1 - fg_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if fg_sorted.numel() > 1:
        jaccard = torch.cat([jaccard[:1], jaccard[1:] - jaccard[:-1]])
    return jaccard


def lovasz_per_class(pred: Tensor, gt: Tensor) -> tuple[Tensor, Tensor]:
    """Per-class Lovasz extension of the Jaccard loss and a mask of classes present in ``gt``.

    The sort permutation is treated as a constant, which gives the usual
    subgradient of this piecewise-linear function.
    """
    _check(pred, gt)
    num_classes = pred.shape[1]
    g = _one_hot_planes(gt, num_classes, pred.dtype)
    probs = pred.permute(1, 0, 2, 3).reshape(num_classes, -1)
    fg = g.permute(1, 0, 2, 3).reshape(num_classes, -1)
    losses, present = [], []
    for c in range(num_classes):
        errors = torch.where(fg[c] > 0, 1 - probs[c], probs[c])
        if errors.numel() == 0:
            losses.append(pred.new_zeros(()))
            present.append(False)
            continue
        order = torch.argsort(errors.detach(), descending=True, stable=True)
        losses.append(torch.dot(errors[order], lovasz_grad(fg[c][order])))
        present.append(bool(fg[c].sum() > 0))
    return torch.stack(losses), torch.tensor(present)


def lovasz_loss(pred: Tensor, gt: Tensor, class_mode: Literal["all", "present"] = "all") -> Tensor:
    if pred.shape[2] * pred.shape[3] * pred.shape[0] == 0:
        return pred.new_zeros(())
    per_class, present = lovasz_per_class(pred, gt)
    if class_mode == "all":
        return per_class.mean()
    if class_mode == "present":
        if not present.any():
            return pred.new_zeros(())
        return per_class[present].mean()
    raise ValueError(f"unknown class_mode {class_mode!r}")


def combined_loss(pred: Tensor, gt: Tensor, w_dice: float = 1.0, w_lovasz: float = 1.0, eps: float = 1.0,
                  class_mode: Literal["all", "present"] = "all") -> Tensor:
    if w_dice < 0 or w_lovasz < 0:
        raise ValueError("loss weights must be non-negative")
    loss = w_dice * dice_loss(pred, gt, eps)
    if w_lovasz:
        loss = loss + w_lovasz * lovasz_loss(pred, gt, class_mode)
    return loss


# ---------------------------------------------------------------------------
# metrics


def dsc(pred_mask: np.ndarray | Tensor, gt: np.ndarray | Tensor, class_id: int) -> float:
    """Dice similarity of one class; 1.0 when the class is absent from both masks."""
    x = np.asarray(pred_mask) == class_id
    y = np.asarray(gt) == class_id
    if x.shape != y.shape:
        raise ValueError(f"mask shapes differ: {x.shape} vs {y.shape}")
    denom = int(x.sum()) + int(y.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(x, y).sum()) / denom


@dataclass(frozen=True)
class MetricsRecord:
    per_class_dsc: tuple[float, ...]
    mdsc: float
    class_ids: tuple[int, ...]

    @classmethod
    def from_per_class(cls, values: Sequence[float], class_ids: Sequence[int] | None = None) -> "MetricsRecord":
        values = tuple(float(v) for v in values)
        ids = tuple(range(len(values))) if class_ids is None else tuple(class_ids)
        return cls(values, float(np.mean(values)) if values else float("nan"), ids)

    def dsc_of(self, class_id: int) -> float:
        return self.per_class_dsc[self.class_ids.index(class_id)]

    def csv_row(self, split: str, epoch: int) -> str:
        cells = []
        for c in range(len(CLASS_NAMES)):
            cells.append(f"{self.dsc_of(c):.6f}" if c in self.class_ids else "")
        return ",".join([split, str(epoch), *cells, f"{self.mdsc:.6f}"])


def mdsc(pred_mask: np.ndarray | Tensor, gt: np.ndarray | Tensor, num_classes: int = 4,
         include_background: bool = True) -> MetricsRecord:
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    ids = list(range(num_classes)) if include_background else list(range(1, num_classes))
    return MetricsRecord.from_per_class([dsc(pred_mask, gt, c) for c in ids], ids)
