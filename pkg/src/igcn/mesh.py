"""Triangle mesh graphs and the discrete operators built on them."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components


class MeshError(ValueError):
    """Structural problem with a mesh or graph."""


class DegenerateDegreeError(MeshError):
    pass


@dataclass(frozen=True, eq=False)
class MeshGraph:
    """Vertices (mm) plus triangle connectivity.

    Instances are treated as immutable; the arrays are made read-only on
    construction so that meshes can be shared between workers.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    _adjacency: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle index out of range")
        if t.size and np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise MeshError("degenerate triangle (repeated vertex index)")
        v.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def n(self) -> int:
        return len(self.vertices)

    @property
    def adjacency(self) -> sp.csr_matrix:
        if self._adjacency is None:
            object.__setattr__(self, "_adjacency", build_adjacency(self))
        return self._adjacency

    def with_vertices(self, vertices) -> "MeshGraph":
        """Same connectivity, new positions."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise MeshError(f"expected {self.vertices.shape} vertices, got {vertices.shape}")
        return MeshGraph(vertices, self.triangles, self._adjacency)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (i, j) pairs, i < j."""
        a = sp.triu(self.adjacency, k=1).tocoo()
        order = np.lexsort((a.col, a.row))
        return np.stack([a.row[order], a.col[order]], axis=1)

    def is_connected(self) -> bool:
        return connected_components(self.adjacency, directed=False)[0] == 1

    def is_watertight(self) -> bool:
        """Every undirected edge is shared by exactly two triangles."""
        t = self.triangles
        e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(len(t)) and bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        return self.n - len(self.edges()) + len(self.triangles)

    def triangle_points(self, vertices=None) -> np.ndarray:
        v = self.vertices if vertices is None else vertices
        return v[self.triangles]

    def face_normals(self, vertices=None) -> np.ndarray:
        p = self.triangle_points(vertices)
        return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])

    def permuted(self, perm) -> "MeshGraph":
        """Relabel so that new vertex ``k`` is old vertex ``perm[k]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return MeshGraph(self.vertices[perm], inv[self.triangles])


def build_adjacency(mesh: MeshGraph) -> sp.csr_matrix:
    """Binary symmetric vertex adjacency with zero diagonal."""
    t = np.asarray(mesh.triangles)
    n = mesh.n
    if t.size and (t.min() < 0 or t.max() >= n):
        raise MeshError("triangle index out of range")
    i = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
    j = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
    rows = np.concatenate([i, j])
    cols = np.concatenate([j, i])
    a = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n)).tocsr()
    a.data[:] = 1.0
    a.sort_indices()
    return a


@dataclass(frozen=True, eq=False)
class GraphOperator:
    """Symmetrically normalized adjacency ``D^-1/2 A D^-1/2``."""

    matrix: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def astype(self, dtype) -> "GraphOperator":
        return GraphOperator(self.matrix.astype(dtype))


def normalized_operator(adjacency, self_loops: bool = True) -> GraphOperator:
    a = sp.csr_matrix(adjacency, dtype=np.float64)
    if self_loops:
        a = a + sp.identity(a.shape[0], format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    if np.any(deg <= 0):
        raise DegenerateDegreeError(f"{int(np.sum(deg <= 0))} vertices have zero degree")
    s = sp.diags(1.0 / np.sqrt(deg))
    m = (s @ a @ s).tocsr()
    m.sort_indices()
    return GraphOperator(m)


def umbrella_matrix(mesh: MeshGraph) -> sp.csr_matrix:
    """Sparse ``I - D^-1 A``; applying it to positions gives the umbrella Laplacian."""
    a = mesh.adjacency
    deg = np.asarray(a.sum(axis=1)).ravel()
    if np.any(deg == 0):
        raise DegenerateDegreeError("isolated vertex has no 1-ring")
    m = (sp.identity(mesh.n, format="csr") - sp.diags(1.0 / deg) @ a).tocsr()
    m.sort_indices()
    return m


def umbrella_laplacian(mesh: MeshGraph, positions) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (mesh.n, 3):
        raise MeshError(f"positions must be ({mesh.n}, 3), got {positions.shape}")
    return umbrella_matrix(mesh) @ positions


# ----------------------------------------------------------------------------
# I/O
# ----------------------------------------------------------------------------

def write_obj(path, mesh: MeshGraph) -> None:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> MeshGraph:
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            if len(idx) != 3:
                raise MeshError(f"{path}:{lineno}: non-triangle face with {len(idx)} vertices")
            faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return MeshGraph(np.array(verts), np.array(faces, dtype=np.int64))


def write_ply(path, mesh: MeshGraph) -> None:
    header = [
        "ply", "format ascii 1.0",
        f"element vertex {mesh.n}",
        "property float x", "property float y", "property float z",
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    body = [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    body += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(header + body) + "\n")


def read_ply(path) -> MeshGraph:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshError(f"{path}: not a PLY file")
    nv = nf = 0
    i = 1
    while lines[i].strip() != "end_header":
        parts = lines[i].split()
        if parts[:1] == ["format"] and parts[1] != "ascii":
            raise MeshError(f"{path}: only ASCII PLY is supported")
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
        i += 1
    body = lines[i + 1:]
    verts = np.array([[float(x) for x in body[k].split()[:3]] for k in range(nv)])
    faces = []
    for k in range(nv, nv + nf):
        parts = [int(x) for x in body[k].split()]
        if parts[0] != 3:
            raise MeshError(f"{path}: non-triangle face with {parts[0]} vertices")
        faces.append(parts[1:4])
    return MeshGraph(verts.reshape(-1, 3), np.array(faces, dtype=np.int64))


def read_mesh(path) -> MeshGraph:
    return read_ply(path) if str(path).lower().endswith(".ply") else read_obj(path)
