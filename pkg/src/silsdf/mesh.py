"""Isosurface extraction, surface sampling and ASCII PLY I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage import measure


@dataclass
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @classmethod
    def empty(cls) -> "Mesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self):
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def edges(self) -> np.ndarray:
        """Undirected edges (sorted vertex pairs), one row per triangle side."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.sort(e, axis=1)

    def is_closed(self) -> bool:
        """Every edge is shared by exactly two triangles."""
        if not len(self):
            return False
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        n_edges = len(np.unique(self.edges(), axis=0))
        return int(len(used) - n_edges + len(self.triangles))

    def components(self) -> int:
        if not len(self):
            return 0
        e = self.edges()
        n = len(self.vertices)
        adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        _, labels = connected_components(adj, directed=False)
        return len(np.unique(labels[np.unique(self.triangles)]))

    def split(self) -> list["Mesh"]:
        """Connected components, largest surface area first (vertices re-indexed)."""
        if not len(self):
            return []
        e = self.edges()
        n = len(self.vertices)
        adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        _, labels = connected_components(adj, directed=False)
        parts = []
        for c in np.unique(labels[self.triangles[:, 0]]):
            tri = self.triangles[labels[self.triangles[:, 0]] == c]
            used, inverse = np.unique(tri, return_inverse=True)
            parts.append(Mesh(self.vertices[used], inverse.reshape(-1, 3)))
        return sorted(parts, key=lambda m: -m.areas().sum())

    def genus(self) -> float:
        """Genus of a closed surface summed over components: ``c - chi / 2``."""
        return self.components() - self.euler_characteristic() / 2


def _as_evaluator(field, dtype=None):
    if hasattr(field, "sdf") and isinstance(field, torch.nn.Module):
        dt = next(field.parameters()).dtype

        def run(x):
            with torch.no_grad():
                return field.sdf(torch.as_tensor(x, dtype=dt)).double().numpy()

        return run
    if hasattr(field, "sdf"):
        return lambda x: np.asarray(field.sdf(torch.as_tensor(x)).detach().numpy(), dtype=np.float64)
    return lambda x: np.asarray(field(x), dtype=np.float64)


def sample_grid(field, resolution: int = 128, roi=(-1.0, 1.0), chunk: int = 65536) -> np.ndarray:
    lo, hi = roi
    axis = np.linspace(lo, hi, resolution)
    X, Y, Z = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)
    run = _as_evaluator(field)
    vals = np.concatenate([run(pts[s : s + chunk]) for s in range(0, len(pts), chunk)])
    return vals.reshape(resolution, resolution, resolution)


def marching_cubes(field, resolution: int = 128, roi=(-1.0, 1.0)) -> Mesh:
    """Triangulate the zero level set of ``field`` sampled on a regular grid.

    ``field`` is a learned :class:`~silsdf.fields.FieldNet`, any object with a
    torch ``sdf`` method, or a numpy callable on ``(n, 3)`` arrays.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    return marching_cubes_volume(sample_grid(field, resolution, roi), roi)


def marching_cubes_volume(vol: np.ndarray, roi=(-1.0, 1.0)) -> Mesh:
    lo, hi = roi
    if not (vol.min() < 0.0 < vol.max()):
        return Mesh.empty()
    spacing = (hi - lo) / (vol.shape[0] - 1)
    verts, faces, _, _ = measure.marching_cubes(
        vol, level=0.0, spacing=(spacing,) * 3, allow_degenerate=False, method="lewiner"
    )
    mesh = Mesh(verts + lo, faces)
    return _drop_degenerate(mesh)


def _drop_degenerate(mesh: Mesh, eps: float = 1e-12) -> Mesh:
    keep = mesh.areas() > eps
    if keep.all():
        return mesh
    used, inverse = np.unique(mesh.triangles[keep], return_inverse=True)
    return Mesh(mesh.vertices[used], inverse.reshape(-1, 3))


def sample_surface_points(mesh: Mesh, n: int, rng=0, return_faces=False):
    """Area-weighted uniform samples on the mesh surface."""
    if not len(mesh):
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(rng)
    areas = mesh.areas()
    faces = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=-1)
    tri = mesh.vertices[mesh.triangles[faces]]
    pts = np.einsum("ni,nij->nj", bary, tri)
    return (pts, faces, bary) if return_faces else pts


class PlyError(ValueError):
    pass


def write_ply(mesh: Mesh, path):
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> Mesh:
    """Parse an ASCII PLY with vertex (x, y, z first) and optional face elements."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyError(f"{path}:1: missing 'ply' magic")
    elements: list[tuple[str, int]] = []
    body = None
    for i, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info", "property"):
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise PlyError(f"{path}:{i}: only ASCII PLY is supported")
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2])))
        elif tok[0] == "end_header":
            body = i
            break
        else:
            raise PlyError(f"{path}:{i}: unexpected header line {line!r}")
    if body is None:
        raise PlyError(f"{path}: header has no end_header")
    verts = np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    pos = body
    for name, count in elements:
        rows = lines[pos : pos + count]
        if len(rows) < count:
            raise PlyError(
                f"{path}:{pos + len(rows) + 1}: file ends after {len(rows)} of {count} '{name}' entries"
            )
        if name == "vertex":
            try:
                verts = np.array([[float(v) for v in r.split()[:3]] for r in rows]).reshape(-1, 3)
            except ValueError as e:
                raise PlyError(f"{path}: malformed vertex row near line {pos + 1}: {e}") from e
        elif name == "face":
            tri = []
            for k, r in enumerate(rows):
                tok = r.split()
                if not tok or int(tok[0]) != 3 or len(tok) < 4:
                    raise PlyError(f"{path}:{pos + k + 1}: only triangle faces are supported")
                tri.append([int(t) for t in tok[1:4]])
            faces = np.array(tri, dtype=np.int64).reshape(-1, 3)
        pos += count
    return Mesh(verts, faces)
