"""Dense grid and mesh containers plus their on-disk formats.

Axis convention used throughout the package: d0 is the cranio-caudal axis
(image rows), d1 is the AP ray axis and d2 is the lateral ray axis, so every
d0-slice of a volume is an epipolar plane for the two orthogonal views.

Volumes are stored as a JSON header plus a little-endian raw blob. Voxel
(i0, i1, i2) of channel c sits at flat index ((c*d0 + i0)*d1 + i1)*d2 + i2,
which is exactly numpy C order for an array of shape (C, d0, d1, d2).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NUM_CLASSES = 5
CLASS_NAMES = ("background", "femur", "patella", "tibia", "fibula")
BONE_CLASSES = (1, 2, 3, 4)

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class GridIOError(Exception):
    """Base class for volume file errors. ``field`` names the offending item."""

    def __init__(self, message: str, field: str):
        super().__init__(message)
        self.field = field


class MissingFileError(GridIOError):
    pass


class LengthMismatchError(GridIOError):
    pass


class MalformedHeaderError(GridIOError):
    pass


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise ValueError(f"spacing_mm must be three positive numbers, got {spacing}")
    return spacing


@dataclass(frozen=True)
class Volume:
    """Multi-channel float32 grid, ``data`` has shape (channels, d0, d1, d2)."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"volume data must be (C, d0, d1, d2), got {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def channel(self, c: int) -> np.ndarray:
        return self.data[c]


@dataclass(frozen=True)
class LabelVolume:
    """uint8 class-id grid of shape (d0, d1, d2), ids follow ``CLASS_NAMES``."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 4 and data.shape[0] == 1:
            data = data[0]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"label data must be (d0, d1, d2), got {data.shape}")
        if data.size and (data.min() < 0 or data.max() >= NUM_CLASSES):
            raise ValueError(f"labels must lie in [0, {NUM_CLASSES})")
        object.__setattr__(self, "data", np.ascontiguousarray(data, dtype=np.uint8))
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class Image2D:
    data: np.ndarray
    pixel_mm: float = 1.0

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2 or min(data.shape) < 1:
            raise ValueError(f"image data must be (rows, cols), got {data.shape}")
        if not self.pixel_mm > 0:
            raise ValueError("pixel_mm must be positive")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "pixel_mm", float(self.pixel_mm))

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class Mesh:
    """Indexed triangle surface in mm.

    ``class_id`` is the bone class (1-4); 0 marks a surface that is not tied
    to a class, e.g. a raw isosurface of an arbitrary field.
    """

    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    class_id: int = 0

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size:
            if t.min() < 0 or t.max() >= len(v):
                raise ValueError("triangle index out of range")
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise ValueError("degenerate triangle (repeated vertex index)")
        if not 0 <= self.class_id < NUM_CLASSES:
            raise ValueError(f"class_id must be in [0, {NUM_CLASSES})")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0


def as_array(x) -> np.ndarray:
    """Unwrap a container to its ndarray; arrays pass through."""
    return np.asarray(getattr(x, "data", x))


def spacing_of(x, default=(1.0, 1.0, 1.0)) -> tuple[float, float, float]:
    return getattr(x, "spacing_mm", default)


# ---------------------------------------------------------------- volume IO


def _raw_path(header_path: Path) -> Path:
    name = header_path.name
    stem = name[: -len(".json")] if name.endswith(".json") else name
    return header_path.with_name(stem + ".raw")


def write_volume(vol, path) -> None:
    """Write a Volume, LabelVolume or Image2D as ``<path>`` (JSON) + ``.raw``."""
    path = Path(path)
    if isinstance(vol, LabelVolume):
        dims, channels, spacing, dtype = vol.dims, 1, vol.spacing_mm, "u8"
    elif isinstance(vol, Image2D):
        dims, channels, spacing, dtype = (*vol.dims, 1), 1, (vol.pixel_mm,) * 3, "f32"
    elif isinstance(vol, Volume):
        dims, channels, spacing, dtype = vol.dims, vol.channels, vol.spacing_mm, "f32"
    else:
        raise TypeError(f"cannot write {type(vol).__name__}")
    raw = _raw_path(path)
    header = {
        "dims": [int(d) for d in dims],
        "channels": int(channels),
        "spacing_mm": [float(s) for s in spacing],
        "dtype": dtype,
        "raw": raw.name,
    }
    if isinstance(vol, Image2D):
        header["kind"] = "image2d"
    raw.write_bytes(np.ascontiguousarray(vol.data, dtype=_DTYPES[dtype]).tobytes())
    path.write_text(json.dumps(header, indent=1))


def _read_header(path: Path) -> dict:
    if not path.exists():
        raise MissingFileError(f"header not found: {path}", "header")
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"{path}: not valid JSON ({exc})", "header") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"{path}: header must be an object", "header")
    dims = header.get("dims")
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) and d >= 1 for d in dims)):
        raise MalformedHeaderError(f"{path}: bad dims {dims!r}", "dims")
    ch = header.get("channels")
    if not (isinstance(ch, int) and ch >= 1):
        raise MalformedHeaderError(f"{path}: bad channels {ch!r}", "channels")
    sp = header.get("spacing_mm")
    if not (isinstance(sp, list) and len(sp) == 3 and all(isinstance(s, (int, float)) and s > 0 for s in sp)):
        raise MalformedHeaderError(f"{path}: bad spacing_mm {sp!r}", "spacing_mm")
    if header.get("dtype") not in _DTYPES:
        raise MalformedHeaderError(f"{path}: bad dtype {header.get('dtype')!r}", "dtype")
    if not isinstance(header.get("raw"), str):
        raise MalformedHeaderError(f"{path}: missing raw filename", "raw")
    return header


def read_volume(header_path):
    """Read a container written by :func:`write_volume`.

    Returns a LabelVolume for ``u8`` payloads, an Image2D for headers tagged
    ``kind: image2d`` and a Volume otherwise.
    """
    header_path = Path(header_path)
    header = _read_header(header_path)
    raw = header_path.parent / header["raw"]
    if not raw.exists():
        raise MissingFileError(f"raw file not found: {raw}", "raw")
    dtype = _DTYPES[header["dtype"]]
    count = header["channels"] * int(np.prod(header["dims"]))
    nbytes = os.path.getsize(raw)
    if nbytes != count * dtype.itemsize:
        raise LengthMismatchError(
            f"{raw}: expected {count} {header['dtype']} values, file holds {nbytes / dtype.itemsize:g}",
            "raw",
        )
    data = np.fromfile(raw, dtype=dtype).reshape(header["channels"], *header["dims"])
    spacing = tuple(header["spacing_mm"])
    if header["dtype"] == "u8":
        if header["channels"] != 1:
            raise MalformedHeaderError("label volumes must have one channel", "channels")
        return LabelVolume(data[0], spacing)
    if header.get("kind") == "image2d":
        return Image2D(data[0, :, :, 0], spacing[0])
    return Volume(data.astype(np.float32), spacing)


def read_labels(path) -> LabelVolume:
    vol = read_volume(path)
    if not isinstance(vol, LabelVolume):
        raise MalformedHeaderError(f"{path}: expected a u8 label volume", "dtype")
    return vol


def read_image(path) -> Image2D:
    vol = read_volume(path)
    if isinstance(vol, Image2D):
        return vol
    if isinstance(vol, Volume) and vol.channels == 1 and vol.dims[2] == 1:
        return Image2D(vol.data[0, :, :, 0], vol.spacing_mm[0])
    raise MalformedHeaderError(f"{path}: expected an image stored as (rows, cols, 1)", "dims")


def write_pgm(img: Image2D, path) -> None:
    """8-bit binary PGM preview, min-max normalized."""
    a = img.data.astype(np.float64)
    lo, hi = a.min(), a.max()
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    rows, cols = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


# ---------------------------------------------------------------- labels


def one_hot(labels, num_classes: int = NUM_CLASSES) -> Volume:
    lab = as_array(labels)
    if lab.size and lab.max() >= num_classes:
        raise ValueError(f"label {int(lab.max())} >= num_classes={num_classes}")
    out = (np.arange(num_classes, dtype=lab.dtype)[:, None, None, None] == lab[None]).astype(np.float32)
    return Volume(out, spacing_of(labels))


# ---------------------------------------------------------------- meshes


def write_mesh_obj(mesh: Mesh, path) -> None:
    lines = [f"# {CLASS_NAMES[mesh.class_id]} mesh: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles"]
    lines += ["v " + " ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh_obj(path, class_id: int = 0) -> Mesh:
    verts, tris = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            tris.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return Mesh(np.array(verts).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3), class_id)
