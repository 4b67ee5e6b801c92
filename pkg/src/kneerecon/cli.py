"""Command-line entry point: ``kneerecon <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import gradcheck, pipeline
from .grid import GridIOError, read_volume, write_pgm, write_volume
from .phantom import generate_phantom
from .projection import ViewAxis, render_drr


def _phantom_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, spec in enumerate(pipeline.phantom_specs(args.count, args.size, args.seed)):
        intensity, labels = generate_phantom(spec)
        write_volume(intensity, out / f"case_{i:04d}.intensity.json")
        write_volume(labels, out / f"case_{i:04d}.labels.json")
    return 0


def _drr_render(args) -> int:
    vol = read_volume(args.volume)
    img = render_drr(vol, ViewAxis.parse(args.axis), args.mode)
    write_volume(img, args.out)
    if args.pgm:
        write_pgm(img, args.pgm)
    return 0


def _dataset_build(args) -> int:
    specs = pipeline.phantom_specs(args.count, args.size, args.seed)
    manifest = pipeline.dataset_build(specs, args.aug, args.out, drr_mode=args.drr_mode)
    print(f"{len(manifest['cases'])} cases written to {args.out}")
    return 0


def _train(args) -> int:
    config = pipeline.TrainConfig.from_json(args.config)
    if args.seed is not None:
        config.seed = args.seed
    pipeline.train(config)
    return 0


def _reconstruct(args) -> int:
    _, meshes, timing = pipeline.reconstruct(args.model, args.ap, args.lat, args.out)
    print(json.dumps({"timing_s": timing, "triangles": {m.class_id: len(m.triangles) for m in meshes}}))
    return 0


def _eval(args) -> int:
    report = pipeline.evaluate_dirs(args.pred, args.gt, args.report, args.chamfer_samples)
    if not report["cases"]:
        print(f"no reconstructions found under {args.pred}", file=sys.stderr)
        return 1
    print(json.dumps(report["bones_average"]))
    return 0


def _gradcheck(args) -> int:
    report = gradcheck.run(args.seed)
    if args.report:
        gradcheck.write_report(report, args.report)
    for name, entry in report["suites"].items():
        err = entry["max_rel_err"]
        shown = "error" if err is None else f"{err:.2e}"
        print(f"{'PASS' if entry['passed'] else 'FAIL'} {name:<22} max rel err {shown}")
    return 0 if report["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kneerecon", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom").add_subparsers(dest="action", required=True)
    g = ph.add_parser("gen", help="write procedural phantoms (intensity + labels)")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_phantom_gen)

    drr = sub.add_parser("drr").add_subparsers(dest="action", required=True)
    r = drr.add_parser("render", help="render one DRR of a volume")
    r.add_argument("--volume", required=True)
    r.add_argument("--axis", choices=["ap", "lat"], required=True)
    r.add_argument("--mode", choices=["mean", "atten"], default="mean")
    r.add_argument("--out", required=True)
    r.add_argument("--pgm", help="also write an 8-bit PGM preview")
    r.set_defaults(func=_drr_render)

    ds = sub.add_parser("dataset").add_subparsers(dest="action", required=True)
    b = ds.add_parser("build", help="phantoms, augmentations, DWMs and DRR pairs plus a manifest")
    b.add_argument("--count", type=int, default=18)
    b.add_argument("--size", type=int, default=32)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--aug", type=int, default=0, help="rotated copies per phantom")
    b.add_argument("--drr-mode", choices=["mean", "atten"], default="mean")
    b.add_argument("--out", required=True)
    b.set_defaults(func=_dataset_build)

    t = sub.add_parser("train")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, help="overrides the config seed")
    t.set_defaults(func=_train)

    rc = sub.add_parser("reconstruct")
    rc.add_argument("--model", required=True)
    rc.add_argument("--ap", required=True)
    rc.add_argument("--lat", required=True)
    rc.add_argument("--out", required=True)
    rc.set_defaults(func=_reconstruct)

    ev = sub.add_parser("eval", help="score reconstructions in PRED/case_XXXX/ against a dataset")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--report", required=True)
    ev.add_argument("--chamfer-samples", type=int, default=None,
                    help="sample N points per mesh instead of using its vertices")
    ev.set_defaults(func=_eval)

    gc = sub.add_parser("gradcheck")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--report", help="JSON report path")
    gc.set_defaults(func=_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (GridIOError, ValueError, KeyError, OSError, pipeline.TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
