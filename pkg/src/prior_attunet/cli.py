"""Command-line entry point: ``prior-attunet <command> ...``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import checkpoint as ck
from .ablation import AXES, parse_value, run_ablation
from .config import describe_defaults, load_config
from .data import (
    PRESETS,
    LabeledSlice,
    generate_corpus,
    get_preset,
    load_dataset,
    preprocess,
    resize_nearest,
    save_dataset,
    spec_manifest,
    to_tensors,
    with_size,
)
from .heatmaps import export_heatmaps
from .net import predict_mask
from .rng import derive_seed
from .train import (
    evaluate,
    model_from_checkpoint,
    pretrain_prior,
    prior_from_checkpoint,
    segmentation_split,
    train_segmentation,
)

log = logging.getLogger("prior_attunet")


def _apply_threads() -> None:
    raw = os.environ.get("PRIOR_ATTUNET_THREADS")
    if raw:
        n = int(raw)
        if n < 1:
            raise SystemExit("PRIOR_ATTUNET_THREADS must be a positive integer")
        torch.set_num_threads(n)


def _gray(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("L") if im.mode not in ("L", "P") else im, dtype=np.uint8)


def cmd_gen_phantoms(a: argparse.Namespace) -> int:
    preset = get_preset(a.preset)
    if a.size:
        preset = with_size(preset, (a.size, a.size))
    slices = generate_corpus(a.count, preset, a.seed, a.fluid_free)
    save_dataset(slices, a.out, a.format, spec_manifest(preset, a.seed, a.count, a.fluid_free))
    print(f"wrote {len(slices)} slices to {a.out}")
    return 0


def cmd_pretrain_prior(a: argparse.Namespace) -> int:
    run = load_config(a.config)
    slices = load_dataset(a.data)
    _, ckpt, hist = pretrain_prior(slices, run.model.vae_config(), run.train, a.out)
    print(f"best epoch {hist.best_epoch}: validation MSE {hist.best_val_mse:.6f} -> {a.out}")
    return 0


def cmd_train(a: argparse.Namespace) -> int:
    run = load_config(a.config)
    slices = load_dataset(a.data)
    vae = prior_from_checkpoint(ck.load(a.prior)) if a.prior else None
    csv = a.metrics or str(Path(a.out).with_suffix(".csv"))
    res = train_segmentation(slices, run.model, run.train, vae, a.out, csv)
    print(f"best epoch {res.best_epoch}: mDSC {res.best_mdsc:.4f}; checkpoint {a.out}; metrics {csv}")
    return 0


def cmd_eval(a: argparse.Namespace) -> int:
    model, mcfg, tcfg = model_from_checkpoint(ck.load(a.model))
    slices = load_dataset(a.data)
    if a.split == "all":
        ids = np.arange(len(slices))
    else:
        tr, sel = segmentation_split(len(slices), tcfg)
        ids = tr if a.split == "train" else sel
    x, y = to_tensors([slices[i] for i in ids], tuple(mcfg.input_size))
    res = evaluate(model, x, y, include_background=not a.no_background)
    print(f"{a.split}: {res.n_slices} slices")
    print("aggregation,dsc per class,mdsc")
    for name, rec in (("slice_macro", res.slice_macro), ("pooled", res.pooled)):
        print(f"{name},{' '.join(f'{v:.4f}' for v in rec.per_class_dsc)},{rec.mdsc:.4f}")
    return 0


def cmd_infer(a: argparse.Namespace) -> int:
    model, mcfg, _ = model_from_checkpoint(ck.load(a.model))
    img = _gray(a.image)
    x, _ = preprocess(LabeledSlice(img, np.zeros_like(img), name=Path(a.image).stem), tuple(mcfg.input_size))
    mask = predict_mask(model, x.unsqueeze(0))[0].numpy().astype(np.uint8)
    mask = resize_nearest(mask, img.shape)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask, mode="L").save(a.out)
    counts = np.bincount(mask.ravel(), minlength=4)
    print(f"wrote {a.out}; class pixel counts {counts.tolist()}")
    return 0


def cmd_heatmaps(a: argparse.Namespace) -> int:
    model, mcfg, _ = model_from_checkpoint(ck.load(a.model))
    img_path = Path(a.image)
    mask_path = Path(a.mask) if a.mask else None
    if mask_path is None:
        candidates = [img_path.parent.parent / "masks" / f"{img_path.stem}{ext}" for ext in (".png", ".pgm")]
        mask_path = next((p for p in candidates if p.exists()), None)
        if mask_path is None:
            raise SystemExit(f"no ground-truth mask found for {img_path}; pass --mask")
    img, gt = _gray(img_path), _gray(mask_path)
    x, y = preprocess(LabeledSlice(img, gt, name=img_path.stem), tuple(mcfg.input_size))
    paths = export_heatmaps(model, x, y.numpy(), a.out)
    print("\n".join(str(p) for p in paths))
    return 0


def cmd_ablate(a: argparse.Namespace) -> int:
    run = load_config(a.config)
    values = [parse_value(a.axis, v) for v in a.values.split(",")] if a.values else None
    seeds = [int(s) for s in a.seeds.split(",")]
    preset = with_size(get_preset(run.phantom_preset), tuple(run.model.input_size))
    slices = load_dataset(a.data) if a.data else generate_corpus(run.phantom_count, preset, run.train.seed)
    cache: dict[int, object] = {}

    def vae_for_seed(seed: int):
        if a.prior:
            return prior_from_checkpoint(ck.load(a.prior))
        if seed not in cache:
            normal = generate_corpus(run.prior_count, preset, derive_seed(seed, "prior-corpus"), fluid_free=True)
            cache[seed] = pretrain_prior(normal, run.model.vae_config(), replace(run.train, seed=seed))[0]
        return cache[seed]

    _, lines = run_ablation(run.model, run.train, a.axis, values, seeds, slices, vae_for_seed, a.out)
    print("\n".join(lines))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="prior-attunet",
        description="Prior-guided attention U-Net for retinal fluid segmentation.",
        epilog="config keys (desk / full defaults):\n" + describe_defaults()
        + "\n\nenvironment: PRIOR_ATTUNET_THREADS caps torch intra-op threads.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-phantoms", help="write a synthetic OCT phantom dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--fluid-free", action="store_true", help="normal slices only (VAE corpus)")
    g.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    g.add_argument("--size", type=int, default=0, help="square size override (default: preset size, 64)")
    g.add_argument("--format", choices=("png", "pgm"), default="png")
    g.set_defaults(fn=cmd_gen_phantoms)

    g = sub.add_parser("pretrain-prior", help="fit the VAE prior on fluid-free slices")
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--config", default=None, help="YAML config (default: desk preset)")
    g.set_defaults(fn=cmd_pretrain_prior)

    g = sub.add_parser("train", help="train the segmentation network")
    g.add_argument("--data", required=True)
    g.add_argument("--prior", default=None, help="prior checkpoint (needed for vae_recon / resnet_like sources)")
    g.add_argument("--out", required=True, help="best-mDSC checkpoint path")
    g.add_argument("--config", default=None)
    g.add_argument("--metrics", default=None, help="per-epoch CSV (default: OUT with .csv suffix)")
    g.set_defaults(fn=cmd_train)

    g = sub.add_parser("eval", help="evaluate a checkpoint")
    g.add_argument("--data", required=True)
    g.add_argument("--model", required=True)
    g.add_argument("--split", choices=("test", "train", "all"), default="test")
    g.add_argument("--no-background", action="store_true", help="exclude background from mDSC")
    g.set_defaults(fn=cmd_eval)

    g = sub.add_parser("infer", help="predict a mask for one image")
    g.add_argument("--model", required=True)
    g.add_argument("--image", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_infer)

    g = sub.add_parser("heatmaps", help="export gt/aspp/up6..up9 maps for one slice")
    g.add_argument("--model", required=True)
    g.add_argument("--image", required=True)
    g.add_argument("--mask", default=None, help="ground truth (default: sibling masks/ directory)")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_heatmaps)

    g = sub.add_parser("ablate", help="single-axis ablation table")
    g.add_argument("--axis", required=True, choices=sorted(AXES))
    g.add_argument("--values", default=None, help="comma list (default: the axis' standard values)")
    g.add_argument("--seeds", default="0,1,2")
    g.add_argument("--config", default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--data", default=None, help="dataset dir (default: generate phantoms)")
    g.add_argument("--prior", default=None, help="shared prior checkpoint (default: pretrain one per seed)")
    g.set_defaults(fn=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    _apply_threads()
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
