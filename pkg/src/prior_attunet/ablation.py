"""Single-axis ablations: every variant trains on the same data with the same seeds."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .data import LabeledSlice
from .diffcore import ConfigurationError
from .gate import GATE_VARIANTS
from .net import ModelConfig, count_params
from .optim import TrainConfig
from .priornet import PRIOR_SOURCES, PriorModel
from .train import train_segmentation

log = logging.getLogger(__name__)

# axis name -> (ModelConfig field, default values)
AXES: dict[str, tuple[str, tuple[Any, ...]]] = {
    "prior": ("prior_enabled", (True, False)),
    "gate_variant": ("gate_variant", GATE_VARIANTS),
    "ratio": ("ratio", (1, 2, 3, 4, 5)),
    "aspp": ("aspp_enabled", (True, False)),
    "conv_kind": ("conv_kind", ("depthwise_separable", "standard")),
    "normnet_source": ("normnet_source", PRIOR_SOURCES),
    "normnet_midc": ("normnet_midc", (8, 16, 32, 64)),
}

ABLATION_HEADER = "axis,variant,seed,params,step_time_rel,dsc_bg,dsc_irf,dsc_srf,dsc_ped,mdsc,note"


def parse_value(axis: str, raw: str) -> Any:
    if axis not in AXES:
        raise ConfigurationError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    default = AXES[axis][1][0]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("on", "true", "1", "yes"):
            return True
        if low in ("off", "false", "0", "no"):
            return False
        raise ConfigurationError(f"cannot read {raw!r} as on/off for axis {axis}")
    if isinstance(default, int):
        return int(raw)
    return raw.strip()


def variant_label(value: Any) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    return str(value)


@dataclass
class AblationRow:
    axis: str
    variant: str
    seed: str
    params: int
    step_time: float
    per_class: tuple[float, ...]
    mdsc: float
    note: str = ""


def _fmt(row: AblationRow, base_time: float) -> str:
    rel = f"{row.step_time / base_time:.3f}" if base_time > 0 and row.step_time > 0 else ""
    cells = [f"{v:.4f}" for v in row.per_class] if row.per_class else [""] * 4
    mdsc = f"{row.mdsc:.4f}" if not np.isnan(row.mdsc) else ""
    params = str(row.params) if row.params >= 0 else ""
    return ",".join([row.axis, row.variant, row.seed, params, rel, *cells, mdsc, row.note])


def format_rows(rows: Sequence[AblationRow]) -> list[str]:
    """CSV lines with step time relative to the first variant's seed mean."""
    timed = [r for r in rows if r.seed == "mean"]
    base_time = timed[0].step_time if timed else 0.0
    return [ABLATION_HEADER] + [_fmt(r, base_time) for r in rows]


def run_ablation(base: ModelConfig, tcfg: TrainConfig, axis: str, values: Sequence[Any] | None,
                 seeds: Sequence[int], slices: Sequence[LabeledSlice],
                 vae_for_seed: Callable[[int], PriorModel] | None = None,
                 out_csv: str | Path | None = None) -> tuple[list[AblationRow], list[str]]:
    """Train each variant for each seed; report peak test mDSC per run and a seed-mean row per variant.

    Rankings are reported, not asserted.  Invalid combinations are skipped with a note.
    """
    if axis not in AXES:
        raise ConfigurationError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    field_name, defaults = AXES[axis]
    values = list(defaults if values is None else values)
    rows: list[AblationRow] = []
    for value in values:
        label = variant_label(value)
        try:
            cfg = replace(base, **{field_name: value}).validate()
        except (ConfigurationError, TypeError) as exc:
            rows.append(AblationRow(axis, label, "-", -1, 0.0, (), float("nan"), f"skipped: {exc}".replace(",", ";")))
            continue
        runs = []
        for seed in seeds:
            vae = vae_for_seed(seed) if cfg.needs_vae and vae_for_seed is not None else None
            res = train_segmentation(slices, cfg, replace(tcfg, seed=seed), vae)
            best = res.best.slice_macro
            runs.append(AblationRow(axis, label, str(seed), count_params(res.model), res.seconds_per_step,
                                    best.per_class_dsc, best.mdsc))
            log.info("ablation %s=%s seed %d: mDSC %.4f", axis, label, seed, best.mdsc)
        rows.extend(runs)
        rows.append(AblationRow(axis, label, "mean", runs[0].params, float(np.mean([r.step_time for r in runs])),
                                tuple(np.mean([r.per_class for r in runs], axis=0)), float(np.mean([r.mdsc for r in runs]))))
    lines = format_rows(rows)
    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        Path(out_csv).write_text("\n".join(lines) + "\n")
    return rows, lines
