"""Marching-cubes isosurfaces and per-bone mesh extraction.

The 256-entry triangle table is generated at import time instead of being
typed in. For each corner configuration the surface boundary is traced on
the six cube faces: walking a face counter-clockwise about its outward
normal, every crossing where the walk enters the inside region is joined to
the next crossing. On ambiguous faces (inside corners diagonal) this always
separates the inside corners, and the choice depends on the face alone, so
neighbouring cells agree and the mesh is crack-free. Face segments chain
into closed loops, triangulated without diagonals between two crossings of
the same face; normals point from inside (field > iso) to outside, i.e.
down the field gradient.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .grid import BONE_CLASSES, LabelVolume, Mesh, as_array, spacing_of


def _corner_offset(c: int) -> tuple[int, int, int]:
    return (c >> 2) & 1, (c >> 1) & 1, c & 1


# edge -> (start corner, axis); start corner has a 0 bit on that axis
EDGES = [(c, a) for a in range(3) for c in range(8) if not (_corner_offset(c)[a])]
_EDGE_INDEX = {(c, c | (4 >> a)): i for i, (c, a) in enumerate(EDGES)}


def _edge_between(c1: int, c2: int) -> int:
    return _EDGE_INDEX[(min(c1, c2), max(c1, c2))]


def _faces() -> list[list[int]]:
    """Corner cycles of the six faces, counter-clockwise about the outward normal."""
    faces = []
    for a in range(3):
        u, v = (a + 1) % 3, (a + 2) % 3
        for side in (0, 1):
            cycle = []
            for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                off = [0, 0, 0]
                off[a], off[u], off[v] = side, du, dv
                cycle.append((off[0] << 2) | (off[1] << 1) | off[2])
            faces.append(cycle if side == 1 else cycle[::-1])
    return faces


FACES = _faces()
_EDGE_FACES = [
    np.array([c in cyc and (c | (4 >> a)) in cyc for cyc in FACES]) for c, a in EDGES
]


def _triangles_for(config: int) -> list[tuple[int, int, int]]:
    inside = [(config >> c) & 1 for c in range(8)]
    succ = {}
    for cycle in FACES:
        crossings = []  # (edge, entering_inside) in walk order
        for i in range(4):
            c1, c2 = cycle[i], cycle[(i + 1) % 4]
            if inside[c1] != inside[c2]:
                crossings.append((_edge_between(c1, c2), bool(inside[c2])))
        for i, (edge, entering) in enumerate(crossings):
            if entering:
                succ[edge] = crossings[(i + 1) % len(crossings)][0]
    tris = []
    while succ:
        start = min(succ)
        loop = [start]
        nxt = succ.pop(start)
        while nxt != start:
            loop.append(nxt)
            nxt = succ.pop(nxt)
        tris += _triangulate(loop)
    return tris


def _share_face(e1: int, e2: int) -> bool:
    return any(_EDGE_FACES[e1] & _EDGE_FACES[e2])


def _triangulate(loop: list[int]) -> list[tuple[int, int, int]]:
    """Triangulate a crossing loop without diagonals joining two crossings of
    one cube face; such a diagonal would also be emitted by the neighbouring
    cell and make the edge non-manifold."""
    n = len(loop)

    def ok(i, j):
        return (j - i) % n in (1, n - 1) or not _share_face(loop[i], loop[j])

    def solve(i, j):
        # triangulate the sub-polygon loop[i..j] (indices increasing)
        if j - i < 2:
            return []
        for k in range(i + 1, j):
            if ok(i, k) and ok(k, j):
                left, right = solve(i, k), solve(k, j)
                if left is not None and right is not None:
                    return left + [(loop[i], loop[k], loop[j])] + right
        return None

    tris = solve(0, n - 1)
    if tris is None:
        raise RuntimeError(f"no face-consistent triangulation for loop {loop}")
    return tris


def _build_table() -> tuple[np.ndarray, np.ndarray]:
    rows = [_triangles_for(cfg) for cfg in range(256)]
    width = max(len(r) for r in rows)
    table = np.full((256, width, 3), -1, dtype=np.int64)
    for cfg, r in enumerate(rows):
        if r:
            table[cfg, : len(r)] = r
    return table, np.array([len(r) for r in rows])


TRI_TABLE, TRI_COUNT = _build_table()
_EDGE_START = np.array([_corner_offset(c) for c, _ in EDGES])
_EDGE_AXIS = np.array([a for _, a in EDGES])


def marching_cubes_array(f: np.ndarray, iso: float, spacing_mm=(1.0, 1.0, 1.0),
                         class_id: int = 0) -> Mesh:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3 or min(f.shape) < 2:
        raise ValueError(f"field must be 3D with every side >= 2, got {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("field contains non-finite values")
    inside = f > iso
    d0, d1, d2 = f.shape
    cfg = np.zeros((d0 - 1, d1 - 1, d2 - 1), dtype=np.int64)
    for c in range(8):
        o = _corner_offset(c)
        cfg |= inside[o[0] : o[0] + d0 - 1, o[1] : o[1] + d1 - 1, o[2] : o[2] + d2 - 1].astype(np.int64) << c
    cells = np.flatnonzero(TRI_COUNT[cfg.ravel()])
    if cells.size == 0:
        return Mesh(class_id=class_id)
    cell_cfg = cfg.ravel()[cells]
    counts = TRI_COUNT[cell_cfg]
    cell_rep = np.repeat(cells, counts)
    slot = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tri_edges = TRI_TABLE[cfg.ravel()[cell_rep], slot]  # (T, 3) local edge ids

    cell_pos = np.stack(np.unravel_index(cell_rep, cfg.shape), axis=1)  # (T, 3)
    start = cell_pos[:, None, :] + _EDGE_START[tri_edges]  # (T, 3, 3)
    axis = _EDGE_AXIS[tri_edges]
    keys = (np.ravel_multi_index((start[..., 0], start[..., 1], start[..., 2]), f.shape) * 3 + axis)
    uniq, inverse = np.unique(keys.ravel(), return_inverse=True)

    v_start = np.stack(np.unravel_index(uniq // 3, f.shape), axis=1)
    v_axis = uniq % 3
    v_end = v_start.copy()
    v_end[np.arange(len(uniq)), v_axis] += 1
    f0 = f[v_start[:, 0], v_start[:, 1], v_start[:, 2]]
    f1 = f[v_end[:, 0], v_end[:, 1], v_end[:, 2]]
    t = (iso - f0) / (f1 - f0)
    verts = v_start.astype(np.float64)
    verts[np.arange(len(uniq)), v_axis] += t
    verts *= np.asarray(spacing_mm, dtype=np.float64)
    return Mesh(verts, inverse.reshape(-1, 3), class_id)


def marching_cubes(field, iso: float = 0.5, spacing_mm=None, class_id: int = 0) -> Mesh:
    """Isosurface of a single-channel Volume or 3D array, vertices in mm."""
    a = as_array(field)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ValueError("marching cubes needs a single-channel field")
        a = a[0]
    spacing = spacing_of(field) if spacing_mm is None else spacing_mm
    return marching_cubes_array(a, iso, spacing, class_id)


def _padded_mesh(field: np.ndarray, spacing, class_id: int) -> Mesh:
    """Extract from a zero-padded copy so bones touching the border close up."""
    mesh = marching_cubes_array(np.pad(field, 1), 0.5, (1.0, 1.0, 1.0), class_id)
    if mesh.is_empty:
        return mesh
    return Mesh((mesh.vertices - 1.0) * np.asarray(spacing), mesh.triangles, class_id)


def extract_bones(labels_or_prob) -> list[Mesh]:
    """One mesh per bone class 1-4 at iso 0.5.

    Label volumes are box-smoothed (3x3x3) per class first; probability
    volumes use their class channel as is.
    """
    a = as_array(labels_or_prob)
    spacing = spacing_of(labels_or_prob)
    meshes = []
    for cls in BONE_CLASSES:
        if isinstance(labels_or_prob, LabelVolume) or a.ndim == 3:
            ind = (a == cls).astype(np.float64)
            fld = ndimage.uniform_filter(ind, size=3, mode="constant") if ind.any() else ind
        else:
            if a.shape[0] != 5:
                raise ValueError(f"expected 5 probability channels, got {a.shape[0]}")
            fld = a[cls].astype(np.float64)
        meshes.append(_padded_mesh(fld, spacing, cls))
    return meshes
