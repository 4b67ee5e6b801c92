"""Overfit 4 phantoms at S=32 and report training-set bone Dice / Chamfer."""

import argparse
import json
import logging

from kneerecon.experiments import overfit

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/overfit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--aug", type=int, default=7, help="rotated copies per phantom")
    p.add_argument("--epochs", type=int, default=20)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    print(json.dumps(overfit(args.out, args.seed, augmentations=args.aug, epochs=args.epochs), indent=1))
