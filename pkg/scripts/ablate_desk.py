"""Single-axis ablation on the desk corpus; writes a CSV and prints it.

    python scripts/ablate_desk.py --axis prior --seeds 0,1,2 --out runs/ablate_prior.csv
    python scripts/ablate_desk.py --axis ratio --values 1,3,5 --seeds 0
"""
import argparse
import logging
from dataclasses import replace

from prior_attunet import data as D
from prior_attunet.ablation import AXES, parse_value, run_ablation
from prior_attunet.config import load_config
from prior_attunet.rng import derive_seed
from prior_attunet.train import pretrain_prior


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--axis", required=True, choices=sorted(AXES))
    ap.add_argument("--values", default=None)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    run = load_config(args.config)
    preset = D.with_size(D.get_preset(run.phantom_preset), tuple(run.model.input_size))
    slices = D.generate_corpus(run.phantom_count, preset, 0)
    priors = {}

    def vae_for_seed(seed):
        if seed not in priors:
            normal = D.generate_corpus(run.prior_count, preset, derive_seed(seed, "prior-corpus"), fluid_free=True)
            priors[seed] = pretrain_prior(normal, run.model.vae_config(), replace(run.train, seed=seed))[0]
        return priors[seed]

    values = [parse_value(args.axis, v) for v in args.values.split(",")] if args.values else None
    seeds = [int(s) for s in args.seeds.split(",")]
    _, lines = run_ablation(run.model, run.train, args.axis, values, seeds, slices, vae_for_seed, args.out)
    print("\n".join(lines))


if __name__ == "__main__":
    main()
