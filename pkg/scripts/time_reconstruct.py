"""Per-phase reconstruct timing at S=32 and at the S=128 full-scale preset."""

import argparse
import json

from kneerecon.experiments import timing_report

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/timing")
    p.add_argument("--skip-full-scale", action="store_true")
    args = p.parse_args()
    print(json.dumps(timing_report(args.out, not args.skip_full_scale), indent=1))
