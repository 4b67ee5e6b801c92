"""Full model vs. "without DWM" vs. "no reconstruction loss" on one desk-scale dataset."""

import argparse
import json
import logging

from kneerecon.experiments import ablation

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=6)
    p.add_argument("--test", type=int, default=2)
    p.add_argument("--epochs", type=int, default=12)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    print(json.dumps(ablation(args.out, args.seed, args.train, args.test, epochs=args.epochs), indent=1))
