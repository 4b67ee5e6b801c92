"""Dataset construction, training, inference and evaluation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import network
from .dwm import DwmParams, distance_weight_map
from .grid import (CLASS_NAMES, BONE_CLASSES, Image2D, LabelVolume, read_image, read_labels,
                   read_mesh_obj, read_volume, write_mesh_obj, write_volume)
from .losses import total_loss_logit_grad
from .metrics import dice, evaluate_case
from .network import AdamState, ArchSpec
from .phantom import PhantomSpec, augment_case, generate_phantom
from .projection import ViewAxis, build_epipolar_volume, epipolar_array, render_drr
from .surface import extract_bones

log = logging.getLogger(__name__)

ARTIFACTS = ("intensity", "labels", "dwm", "ap", "lat")


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------- dataset


@dataclass
class CaseRecord:
    case_id: int
    phantom: int
    files: dict
    seed: int
    aug_index: int = 0
    angles: tuple = (0.0, 0.0, 0.0)

    def path(self, root, artifact: str) -> Path:
        return Path(root) / self.files[artifact]


def augmentation_seed(phantom_seed: int, aug_index: int) -> int:
    return int(np.random.SeedSequence([phantom_seed, aug_index]).generate_state(1)[0])


def dataset_build(specs, augmentations: int, out_dir, dwm_params: DwmParams = DwmParams(),
                  drr_mode: str = "mean") -> dict:
    """Render every (phantom, augmentation) pair and write a manifest.

    Each phantom yields its original case plus ``augmentations`` rotated
    copies. Returns the manifest dict (also written to manifest.json).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for p_idx, spec in enumerate(specs):
        intensity0, labels0 = generate_phantom(spec)
        for j in range(augmentations + 1):
            if j == 0:
                intensity, labels, angles, seed = intensity0, labels0, (0.0, 0.0, 0.0), spec.seed
            else:
                seed = augmentation_seed(spec.seed, j)
                intensity, labels, angles = augment_case(intensity0, labels0, seed)
            cid = len(cases)
            stem = f"case_{cid:04d}"
            files = {a: f"{stem}.{a}.json" for a in ARTIFACTS}
            write_volume(intensity, out / files["intensity"])
            write_volume(labels, out / files["labels"])
            write_volume(distance_weight_map(labels, dwm_params), out / files["dwm"])
            write_volume(render_drr(intensity, ViewAxis.AP, drr_mode), out / files["ap"])
            write_volume(render_drr(intensity, ViewAxis.LAT, drr_mode), out / files["lat"])
            cases.append(CaseRecord(cid, p_idx, files, seed, j, tuple(angles)))
    manifest = {
        "size": specs[0].size if specs else 0,
        "dwm": asdict(dwm_params),
        "drr_mode": drr_mode,
        "phantoms": [asdict(s) for s in specs],
        "cases": [asdict(c) for c in cases],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_manifest(path) -> tuple[Path, dict, list[CaseRecord]]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    cases = [CaseRecord(**{**c, "angles": tuple(c["angles"])}) for c in manifest["cases"]]
    return path.parent, manifest, cases


def phantom_specs(count: int, size: int, seed: int) -> list[PhantomSpec]:
    """``count`` phantoms with per-phantom seeds derived from one seed."""
    seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64) if count else []
    return [PhantomSpec(size=size, seed=int(s)) for s in seeds]


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    dataset: str = "data"
    out_dir: str = "run"
    arch: ArchSpec = field(default_factory=ArchSpec)
    epochs: int = 23
    lr0: float = 1e-2
    lr_decay: float = 10.0
    lr_decay_every: int = 10
    dwm: DwmParams = field(default_factory=DwmParams)
    seed: int = 0
    n_train: int = 12
    n_val: int = 2
    n_test: int = 4
    use_dwm: bool = True
    use_reconstruction_loss: bool = True
    shuffle: bool = True

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ArchSpec(**self.arch)
        if isinstance(self.dwm, dict):
            self.dwm = DwmParams(**self.dwm)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_train < 1:
            raise ValueError("need at least one training phantom")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls(**json.loads(Path(path).read_text()))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1))

    def split(self, phantom: int) -> str | None:
        if phantom < self.n_train:
            return "train"
        if phantom < self.n_train + self.n_val:
            return "val"
        if phantom < self.n_train + self.n_val + self.n_test:
            return "test"
        return None


@dataclass
class CaseData:
    record: CaseRecord
    x: np.ndarray  # epipolar input (2, S, S, S)
    ap: np.ndarray
    lat: np.ndarray
    labels: np.ndarray
    dwm: np.ndarray


def load_case(root, rec: CaseRecord, dwm_params: DwmParams | None = None) -> CaseData:
    ap = read_image(rec.path(root, "ap"))
    lat = read_image(rec.path(root, "lat"))
    labels = read_labels(rec.path(root, "labels"))
    if dwm_params is None:
        w = read_volume(rec.path(root, "dwm")).data[0]
    else:
        w = distance_weight_map(labels, dwm_params).data[0]
    return CaseData(rec, network_input(ap.data, lat.data), ap.data, lat.data, labels.data, w)


def standardize(img: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance copy of an input image (constant images map to 0)."""
    img = np.asarray(img, dtype=np.float64)
    sd = img.std()
    out = img - img.mean()
    return (out / sd if sd > 0 else out).astype(np.float32)


def network_input(ap: np.ndarray, lat: np.ndarray) -> np.ndarray:
    return epipolar_array(standardize(ap), standardize(lat))


def predict_labels(spec: ArchSpec, params, x: np.ndarray) -> np.ndarray:
    """Per-voxel argmax class (ties resolve to the lower id)."""
    prob, _ = network.forward(spec, params, x, keep_tape=False)
    return np.argmax(prob, axis=0).astype(np.uint8)


def mean_bone_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    return float(np.mean([dice(pred, gt, c) for c in BONE_CLASSES]))


def train(config: TrainConfig, progress=None) -> tuple[dict, list[dict]]:
    """Train on the configured split; returns (final params, per-epoch log).

    Writes ``model_final.json``, ``model_best.json`` (best validation bone
    Dice, or final when there is no validation split) and ``train_log.json``
    into ``config.out_dir``.
    """
    root, manifest, records = load_manifest(config.dataset)
    spec = config.arch
    if manifest["size"] != spec.input_side:
        raise ValueError(f"dataset side {manifest['size']} != arch input_side {spec.input_side}")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dwm_override = None if manifest["dwm"] == asdict(config.dwm) else config.dwm
    train_cases = [load_case(root, r, dwm_override) for r in records if config.split(r.phantom) == "train"]
    val_cases = [load_case(root, r, dwm_override) for r in records
                 if config.split(r.phantom) == "val" and r.aug_index == 0]
    if not train_cases:
        raise ValueError("no training cases in the dataset")

    params = network.init_params(spec, config.seed)
    state = AdamState(lr0=config.lr0, decay_factor=config.lr_decay, decay_every=config.lr_decay_every)
    rng = np.random.default_rng(config.seed)
    history, best = [], -1.0
    for epoch in range(config.epochs):
        state.epoch = epoch
        t0 = time.perf_counter()
        order = rng.permutation(len(train_cases)) if config.shuffle else np.arange(len(train_cases))
        losses, ces, recs = [], [], []
        for i in order:
            case = train_cases[i]
            prob, tape = network.forward(spec, params, case.x)
            value, g_prob, g_logits, parts = total_loss_logit_grad(
                prob, case.labels, case.dwm, case.ap, case.lat,
                use_dwm=config.use_dwm, use_reconstruction=config.use_reconstruction_loss)
            if not np.isfinite(value):
                network.save_model(out / "model_last_good.json", spec, params)
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, case {case.record.case_id}")
            grads = network.backward(tape, g_prob, grad_logits=g_logits)
            network.adam_step(params, grads, state)
            losses.append(value)
            ces.append(parts["ce"])
            if parts["reconst"] is not None:
                recs.append(parts["reconst"])
        val = [mean_bone_dice(predict_labels(spec, params, c.x), c.labels) for c in val_cases]
        entry = {
            "epoch": epoch,
            "lr": state.learning_rate(epoch),
            "train_loss": float(np.mean(losses)),
            "train_ce": float(np.mean(ces)),
            "train_reconst": float(np.mean(recs)) if recs else None,
            "val_bone_dice": float(np.mean(val)) if val else None,
            "seconds": time.perf_counter() - t0,
        }
        history.append(entry)
        log.info("epoch %d lr %.0e loss %.4f val dice %s", epoch, entry["lr"], entry["train_loss"],
                 entry["val_bone_dice"])
        if progress:
            progress(entry)
        score = entry["val_bone_dice"] if val else epoch
        if score > best:
            best = score
            network.save_model(out / "model_best.json", spec, params)
    network.save_model(out / "model_final.json", spec, params)
    (out / "train_log.json").write_text(json.dumps(history, indent=1))
    return params, history


# ---------------------------------------------------------------- inference


def reconstruct_arrays(spec: ArchSpec, params, ap: Image2D, lat: Image2D) -> tuple[LabelVolume, list, dict]:
    """Epipolar build -> forward -> argmax -> meshes, with per-phase timings (s)."""
    s = spec.input_side
    for name, img in (("AP", ap), ("lateral", lat)):
        if img.dims != (s, s):
            raise ValueError(f"{name} image is {img.dims[0]}x{img.dims[1]}, model expects {s}x{s}")
    timing = {}
    t = time.perf_counter()
    vol = build_epipolar_volume(Image2D(standardize(ap.data), ap.pixel_mm),
                                Image2D(standardize(lat.data), lat.pixel_mm))
    timing["epipolar_build"] = time.perf_counter() - t
    t = time.perf_counter()
    prob, _ = network.forward(spec, params, vol.data, keep_tape=False)
    timing["forward"] = time.perf_counter() - t
    t = time.perf_counter()
    labels = LabelVolume(np.argmax(prob, axis=0).astype(np.uint8), vol.spacing_mm)
    timing["argmax"] = time.perf_counter() - t
    t = time.perf_counter()
    meshes = extract_bones(labels)
    timing["meshing"] = time.perf_counter() - t
    timing["total"] = sum(timing.values())
    return labels, meshes, timing


def reconstruct(model_path, ap_path, lat_path, out_dir) -> tuple[LabelVolume, list, dict]:
    spec, params = network.load_model(model_path)
    ap, lat = read_image(ap_path), read_image(lat_path)
    labels, meshes, timing = reconstruct_arrays(spec, params, ap, lat)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(labels, out / "labels.json")
    for mesh in meshes:
        write_mesh_obj(mesh, out / f"bone_{CLASS_NAMES[mesh.class_id]}.obj")
    (out / "timing.json").write_text(json.dumps(timing, indent=1))
    return labels, meshes, timing


# ---------------------------------------------------------------- evaluation


def evaluate_dirs(pred_dir, gt_dataset, report_path=None, chamfer_samples: int | None = None) -> dict:
    """Score reconstructions in ``pred_dir/case_XXXX/`` against a dataset.

    Cases without a reconstruction directory are skipped.
    """
    root, _, records = load_manifest(gt_dataset)
    pred_dir = Path(pred_dir)
    report = {"cases": {}}
    for rec in records:
        case_dir = pred_dir / f"case_{rec.case_id:04d}"
        if not (case_dir / "labels.json").exists():
            continue
        pred = read_labels(case_dir / "labels.json")
        gt = read_labels(rec.path(root, "labels"))
        meshes = [read_mesh_obj(case_dir / f"bone_{CLASS_NAMES[c]}.obj", c) for c in BONE_CLASSES]
        report["cases"][f"case_{rec.case_id:04d}"] = evaluate_case(pred, gt, meshes, chamfer_samples)
    per_case = list(report["cases"].values())
    if per_case:
        report["mean"] = {
            name: float(np.mean([c[name]["dice3d"] for c in per_case]))
            for name in CLASS_NAMES
        }
        ch = [c["bones_average"]["chamfer_mm"] for c in per_case if c["bones_average"]["chamfer_mm"] is not None]
        report["bones_average"] = {
            "dice3d": float(np.mean([c["bones_average"]["dice3d"] for c in per_case])),
            "chamfer_mm": float(np.mean(ch)) if ch else None,
        }
    if report_path:
        Path(report_path).write_text(json.dumps(report, indent=1))
    return report


def evaluate_model(spec: ArchSpec, params, cases: list[CaseData]) -> dict:
    """In-memory variant of reconstruct + evaluate over loaded cases."""
    per_case = []
    for c in cases:
        ap, lat = Image2D(c.ap), Image2D(c.lat)
        labels, meshes, _ = reconstruct_arrays(spec, params, ap, lat)
        per_case.append(evaluate_case(labels, LabelVolume(c.labels), meshes))
    ch = [r["bones_average"]["chamfer_mm"] for r in per_case if r["bones_average"]["chamfer_mm"] is not None]
    return {
        "cases": per_case,
        "bone_dice": float(np.mean([r["bones_average"]["dice3d"] for r in per_case])),
        "bone_chamfer_mm": float(np.mean(ch)) if ch else None,
        "per_class_dice": {CLASS_NAMES[k]: float(np.mean([r[CLASS_NAMES[k]]["dice3d"] for r in per_case]))
                           for k in BONE_CLASSES},
    }


def cases_for_split(config: TrainConfig, split: str, originals_only: bool = True) -> list[CaseData]:
    root, manifest, records = load_manifest(config.dataset)
    return [load_case(root, r) for r in records
            if config.split(r.phantom) == split and (r.aug_index == 0 or not originals_only)]
