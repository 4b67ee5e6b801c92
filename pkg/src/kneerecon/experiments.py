"""Desk-scale experiment drivers shared by scripts/ and the acceptance tests."""

from __future__ import annotations

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import network
from .grid import BONE_CLASSES, Image2D, LabelVolume
from .metrics import dice
from .network import FULL_PRESET, ArchSpec
from .pipeline import (TrainConfig, cases_for_split, dataset_build, evaluate_model, phantom_specs,
                       reconstruct_arrays, train)


def _dump(result: dict, out_dir) -> dict:
    Path(out_dir, "result.json").write_text(json.dumps(result, indent=1))
    return result


def _train_and_score(config: TrainConfig, split: str) -> tuple[dict, list, float]:
    t0 = time.perf_counter()
    params, history = train(config)
    seconds = time.perf_counter() - t0
    return evaluate_model(config.arch, params, cases_for_split(config, split)), history, seconds


def overfit(out_dir, seed: int = 0, phantoms: int = 4, size: int = 32, augmentations: int = 7,
            epochs: int = 20, arch: ArchSpec | None = None) -> dict:
    """Train on a few phantoms (plus rotated copies) and score the original training cases."""
    out = Path(out_dir)
    t0 = time.perf_counter()
    dataset_build(phantom_specs(phantoms, size, seed), augmentations, out / "data")
    config = TrainConfig(dataset=str(out / "data"), out_dir=str(out / "run"),
                         arch=arch or ArchSpec(input_side=size), epochs=epochs, seed=seed,
                         n_train=phantoms, n_val=0, n_test=0)
    config.to_json(out / "config.json")
    report, history, train_s = _train_and_score(config, "train")
    return _dump({
        "bone_dice": report["bone_dice"],
        "bone_chamfer_mm": report["bone_chamfer_mm"],
        "bone_chamfer_vox": report["bone_chamfer_mm"],  # 1 mm voxels
        "per_class_dice": report["per_class_dice"],
        "initial_loss": history[0]["train_loss"],
        "final_loss": history[-1]["train_loss"],
        "train_seconds": train_s,
        "total_seconds": time.perf_counter() - t0,
        "steps": epochs * phantoms * (augmentations + 1),
    }, out)


def background_baseline(cases) -> float:
    """Mean bone Dice of predicting background everywhere."""
    scores = []
    for c in cases:
        empty = np.zeros_like(c.labels)
        scores.append(np.mean([dice(empty, c.labels, k) for k in BONE_CLASSES]))
    return float(np.mean(scores))


def generalization(out_dir, seed: int = 0, n_train: int = 12, n_test: int = 4, size: int = 32,
                   augmentations: int = 1, epochs: int = 20) -> dict:
    """Train on ``n_train`` phantoms, score ``n_test`` unseen ones against the background baseline."""
    out = Path(out_dir)
    dataset_build(phantom_specs(n_train + n_test, size, seed), augmentations, out / "data")
    config = TrainConfig(dataset=str(out / "data"), out_dir=str(out / "run"), arch=ArchSpec(input_side=size),
                         epochs=epochs, seed=seed, n_train=n_train, n_val=0, n_test=n_test)
    config.to_json(out / "config.json")
    report, _, train_s = _train_and_score(config, "test")
    baseline = background_baseline(cases_for_split(config, "test"))
    return _dump({
        "heldout_bone_dice": report["bone_dice"],
        "background_baseline_dice": baseline,
        "margin": report["bone_dice"] - baseline,
        "heldout_bone_chamfer_mm": report["bone_chamfer_mm"],
        "per_class_dice": report["per_class_dice"],
        "train_seconds": train_s,
    }, out)


ABLATIONS = {
    "full": {},
    "without_dwm": {"use_dwm": False},
    "no_loss_reconst": {"use_reconstruction_loss": False},
}


def ablation(out_dir, seed: int = 0, n_train: int = 6, n_test: int = 2, size: int = 32,
             augmentations: int = 1, epochs: int = 12) -> dict:
    """Train the full model and both ablated variants on one dataset; report held-out deltas."""
    out = Path(out_dir)
    dataset_build(phantom_specs(n_train + n_test, size, seed), augmentations, out / "data")
    base = TrainConfig(dataset=str(out / "data"), arch=ArchSpec(input_side=size), epochs=epochs,
                       seed=seed, n_train=n_train, n_val=0, n_test=n_test)
    results = {}
    for name, toggles in ABLATIONS.items():
        config = replace(base, out_dir=str(out / name), **toggles)
        config.to_json(out / f"{name}.json")
        report, _, seconds = _train_and_score(config, "test")
        results[name] = {"bone_dice": report["bone_dice"], "bone_chamfer_mm": report["bone_chamfer_mm"],
                         "per_class_dice": report["per_class_dice"], "train_seconds": seconds}
    for name in ABLATIONS:
        results[name]["dice_delta_vs_full"] = results[name]["bone_dice"] - results["full"]["bone_dice"]
    return _dump(results, out)


def time_reconstruct(spec: ArchSpec, seed: int = 0, repeats: int = 3) -> dict:
    """Per-phase inference timing with randomly initialized weights (timing does not depend on them)."""
    params = network.init_params(spec, seed)
    rng = np.random.default_rng(seed)
    s = spec.input_side
    ap, lat = Image2D(rng.random((s, s), dtype=np.float32)), Image2D(rng.random((s, s), dtype=np.float32))
    runs = [reconstruct_arrays(spec, params, ap, lat)[2] for _ in range(repeats)]
    best = min(runs, key=lambda t: t["total"])
    return {"input_side": s, "levels": spec.levels, "base_channels": spec.base_channels,
            "repeats": repeats, "best": best, "runs": runs}


def timing_report(out_dir=None, full_scale: bool = True) -> dict:
    specs = {"desk_s32": ArchSpec(input_side=32)}
    if full_scale:
        specs["full_s128"] = FULL_PRESET
    result = {name: time_reconstruct(spec, repeats=3 if spec.input_side <= 32 else 1)
              for name, spec in specs.items()}
    result["reference_seconds"] = 0.5
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _dump(result, out_dir)
    return result
