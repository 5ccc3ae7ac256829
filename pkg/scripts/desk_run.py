"""Desk-scale pipeline: phantoms, VAE prior, segmentation, evaluation and heatmaps.

    python scripts/desk_run.py --out runs/desk --seed 0
"""
import argparse
import logging
import time
from dataclasses import replace
from pathlib import Path

from prior_attunet import data as D
from prior_attunet.config import load_config
from prior_attunet.heatmaps import export_heatmaps
from prior_attunet.rng import derive_seed
from prior_attunet.train import pretrain_prior, train_segmentation


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", default=None, help="YAML overrides (default: desk preset)")
    ap.add_argument("--corpus-seed", type=int, default=0, help="phantom corpus seed, fixed across training seeds")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    run = load_config(args.config)
    mcfg, tcfg = run.model, replace(run.train, seed=args.seed)
    out = Path(args.out)
    preset = D.with_size(D.get_preset(run.phantom_preset), tuple(mcfg.input_size))
    slices = D.generate_corpus(run.phantom_count, preset, args.corpus_seed)
    normal = D.generate_corpus(run.prior_count, preset, derive_seed(args.seed, "prior-corpus"), fluid_free=True)
    print("class fractions bg/irf/srf/ped:", " ".join(f"{v:.4f}" for v in D.class_stats(slices)))

    t0 = time.perf_counter()
    vae = None
    if mcfg.needs_vae:
        vae, _, hist = pretrain_prior(normal, mcfg.vae_config(), tcfg, out / "prior.ckpt")
        print(f"prior: best epoch {hist.best_epoch}, validation MSE {hist.best_val_mse:.5f}")
    res = train_segmentation(slices, mcfg, tcfg, vae, out / "model.ckpt", out / "metrics.csv")
    elapsed = time.perf_counter() - t0

    fin, best = res.final, res.best
    print(f"final epoch mDSC {fin.mdsc:.4f} (pooled {fin.pooled.mdsc:.4f}); "
          f"best epoch {res.best_epoch} mDSC {best.mdsc:.4f}")
    print("per-class final:", " ".join(f"{v:.4f}" for v in fin.slice_macro.per_class_dsc))
    print(f"{res.seconds_per_step:.3f} s/step, {elapsed / 60:.1f} min total")

    x, y = D.preprocess(slices[res.split_ids[1][0]], tuple(mcfg.input_size))
    export_heatmaps(res.model, x, y.numpy(), out / "heatmaps")
    print(f"artifacts in {out}")


if __name__ == "__main__":
    main()
