"""Train on 12 phantoms, evaluate 4 unseen ones against the all-background baseline."""

import argparse
import json
import logging

from kneerecon.experiments import generalization

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/generalization")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--aug", type=int, default=1)
    p.add_argument("--epochs", type=int, default=20)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    print(json.dumps(generalization(args.out, args.seed, augmentations=args.aug, epochs=args.epochs), indent=1))
