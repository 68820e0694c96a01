"""
Vectorised marching cubes over a ``DensityGrid``.

Cells are processed in C order and triangles in table order, so output is
deterministic. Vertices are shared: each crossed lattice edge yields one
vertex, keyed by (lower corner index, axis). With the Bourke tables and
"below iso" corner bits, triangle normals (right-hand rule) point toward
decreasing σ, i.e. out of the dense region.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from app.core.errors import ConfigurationError
from app.geometry.grid import DensityGrid
from app.geometry.tables import CORNER_OFFSETS, EDGE_CORNERS, MC_TRIANGLES

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12


@dataclass
class TriangleMesh:
    vertices: np.ndarray    # (V, 3) float64, scene units
    faces: np.ndarray       # (F, 3) int64, 0-based

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_normals(self) -> np.ndarray:
        p = self.vertices[self.faces]
        return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])

    def edges(self) -> np.ndarray:
        """Unique undirected edges (E, 2)."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges()) + self.n_faces


def case_indices(values: np.ndarray, iso: float) -> np.ndarray:
    """(Rx-1, Ry-1, Rz-1) lookup index per cell; bit i set when corner i < iso."""
    below = (values < iso).astype(np.int16)
    nx, ny, nz = values.shape
    index = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int16)
    for bit, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        index |= below[dx:dx + nx - 1, dy:dy + ny - 1, dz:dz + nz - 1] << bit
    return index


def extract_mesh(grid: DensityGrid, iso: float) -> TriangleMesh:
    """Triangulate the σ = iso level set with linear edge interpolation."""
    if not iso > 0:
        raise ConfigurationError(f"iso level must be > 0, got {iso}")
    values = grid.values
    index = case_indices(values, iso)
    cells = np.argwhere((index != 0) & (index != 255))
    if len(cells) == 0:
        return TriangleMesh.empty()

    table = MC_TRIANGLES[index[cells[:, 0], cells[:, 1], cells[:, 2]]]
    cell_of, _ = np.nonzero(table != -1)
    edge = table[table != -1]
    cell = cells[cell_of]

    # lattice endpoints of every triangle corner's edge
    a = cell + CORNER_OFFSETS[EDGE_CORNERS[edge, 0]]
    b = cell + CORNER_OFFSETS[EDGE_CORNERS[edge, 1]]
    low = np.minimum(a, b)
    axis = np.argmax(np.abs(b - a), axis=1)
    key = np.ravel_multi_index(tuple(low.T), values.shape) * 3 + axis

    unique_keys, first, inverse = np.unique(key, return_index=True, return_inverse=True)
    pa, pb = a[first], b[first]
    va = values[tuple(pa.T)]
    vb = values[tuple(pb.T)]
    mu = (iso - va) / (vb - va)
    lattice = pa + mu[:, None] * (pb - pa)
    vertices = grid.index_to_world(lattice)
    faces = inverse.reshape(-1, 3).astype(np.int64)

    mesh = TriangleMesh(vertices, faces)
    area = 0.5 * np.linalg.norm(mesh.face_normals(), axis=1)
    keep = area > DEGENERATE_AREA
    if not keep.all():
        mesh = _compact(vertices, faces[keep])
    logger.debug(
        "Extracted mesh at iso %.3f: %d vertices, %d faces", iso, mesh.n_vertices, mesh.n_faces,
        extra={"component": "geometry"},
    )
    return mesh


def _compact(vertices: np.ndarray, faces: np.ndarray) -> TriangleMesh:
    """Drop vertices no face references and renumber."""
    used, remap = np.unique(faces, return_inverse=True)
    return TriangleMesh(vertices[used], remap.reshape(-1, 3).astype(np.int64))
