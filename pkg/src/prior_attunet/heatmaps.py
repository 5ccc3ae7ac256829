"""Attention / feature heatmaps at the bottleneck and each decoder stage."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .net import TAP_NAMES, PriorAttUNet

HEATMAP_FILES = ("gt", "aspp", "up6", "up7", "up8", "up9")


def minmax_u8(a: np.ndarray) -> np.ndarray:
    """Scale to the full 0-255 range; a constant map becomes all zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.rint((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


@torch.no_grad()
def heatmap_arrays(model: PriorAttUNet, image3: Tensor) -> dict[str, np.ndarray]:
    """Raw maps for one ``(3, h, w)`` slice, each at its tap's native resolution.

    The bottleneck map is the channel mean of absolute features; decoder maps are
    the gate's alpha, falling back to feature magnitude when attention is off.
    """
    was = model.training
    model.eval()
    _, taps = model(image3.unsqueeze(0))
    model.train(was)
    out = {"aspp": taps["ASPP"].features[0].abs().mean(dim=0).numpy()}
    for name in TAP_NAMES[1:]:
        tap = taps[name]
        src = tap.alpha[0, 0] if tap.alpha is not None else tap.features[0].abs().mean(dim=0)
        out[name] = src.numpy()
    return out


def export_heatmaps(model: PriorAttUNet, image3: Tensor, gt: Tensor | np.ndarray, out_dir: str | Path,
                    suffix: str = "") -> list[Path]:
    """Write ``gt``, ``aspp`` and ``up6``..``up9`` as 8-bit PGM files; returns the paths in that order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = {"gt": np.asarray(gt)}
    maps.update(heatmap_arrays(model, image3))
    paths = []
    for name in HEATMAP_FILES:
        path = out_dir / f"{name}{suffix}.pgm"
        Image.fromarray(minmax_u8(maps[name]), mode="L").save(path)
        paths.append(path)
    return paths
