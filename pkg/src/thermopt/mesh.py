"""Simplicial meshes of axis-aligned boxes with tagged boundary facets.

Meshes are immutable after construction. 2D cells are right triangles and
3D cells come from the standard six-tetrahedron split of each cube, so the
assembled stiffness matrices are M-matrices and discrete maximum principles
hold exactly on these meshes.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError


class BoundaryTag(enum.Enum):
    DIRICHLET_TEMPERATURE = "dirichlet_temperature"
    ROBIN_TEMPERATURE = "robin_temperature"


TagRule = Callable[[np.ndarray], BoundaryTag]


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming simplicial mesh with tagged boundary facets.

    vertices : (n_vertices, dim) float array
    cells : (n_cells, dim+1) int array, positively oriented simplices
    boundary_facets : (n_facets, dim) int array of vertex indices
    boundary_tags : (n_facets,) int8 array of BoundaryTag values (enum index)
    """

    dim: int
    vertices: np.ndarray
    cells: np.ndarray
    boundary_facets: np.ndarray
    boundary_tags: np.ndarray
    parent_edges: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        for arr in (self.vertices, self.cells, self.boundary_facets, self.boundary_tags):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    def facet_indices(self, tag: BoundaryTag) -> np.ndarray:
        return np.flatnonzero(self.boundary_tags == _TAG_CODE[tag])

    def facet_tag(self, i: int) -> BoundaryTag:
        return _TAG_FROM_CODE[int(self.boundary_tags[i])]

    def boundary_vertex_set(self, tag: BoundaryTag | None = None) -> np.ndarray:
        """Sorted vertex indices lying on facets with the given tag (all if None)."""
        if tag is None:
            facets = self.boundary_facets
        else:
            facets = self.boundary_facets[self.facet_indices(tag)]
        return np.unique(facets)


_TAG_CODE = {BoundaryTag.DIRICHLET_TEMPERATURE: 0, BoundaryTag.ROBIN_TEMPERATURE: 1}
_TAG_FROM_CODE = {v: k for k, v in _TAG_CODE.items()}


def cell_volumes(mesh: Mesh) -> np.ndarray:
    """Signed volumes of all cells (positive for valid meshes)."""
    v = mesh.vertices[mesh.cells]
    edges = v[:, 1:, :] - v[:, :1, :]
    if mesh.dim == 2:
        return 0.5 * np.linalg.det(edges)
    return np.linalg.det(edges) / 6.0


def facet_measures(mesh: Mesh) -> np.ndarray:
    """Length (2D) or area (3D) of every boundary facet."""
    pts = mesh.vertices[mesh.boundary_facets]
    if mesh.dim == 2:
        return np.linalg.norm(pts[:, 1] - pts[:, 0], axis=1)
    cross = np.cross(pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


def facet_centroids(mesh: Mesh) -> np.ndarray:
    return mesh.vertices[mesh.boundary_facets].mean(axis=1)


def boundary_measure(mesh: Mesh, tag: BoundaryTag) -> float:
    """Total measure of the boundary part carrying the tag."""
    return float(facet_measures(mesh)[mesh.facet_indices(tag)].sum())


def mesh_size(mesh: Mesh) -> float:
    """Largest cell diameter."""
    v = mesh.vertices[mesh.cells]
    h = 0.0
    npts = mesh.dim + 1
    for i in range(npts):
        for j in range(i + 1, npts):
            h = max(h, float(np.max(np.linalg.norm(v[:, i] - v[:, j], axis=1))))
    return h


def dirichlet_on_planes(*specs: str, default: BoundaryTag = BoundaryTag.ROBIN_TEMPERATURE,
                        tol: float = 1e-12) -> TagRule:
    """Tag rule from axis-aligned plane specs like "x=0" or "y=1.5".

    A facet whose centroid lies on any listed plane is Dirichlet; everything
    else gets the default tag.
    """
    axes = {"x": 0, "y": 1, "z": 2}
    planes = []
    for spec in specs:
        try:
            name, value = spec.split("=")
            planes.append((axes[name.strip()], float(value)))
        except (ValueError, KeyError):
            raise ConfigurationError(f"bad plane spec {spec!r}; expected e.g. 'x=0'")

    def rule(centroid: np.ndarray) -> BoundaryTag:
        for axis, value in planes:
            if axis < centroid.shape[0] and abs(centroid[axis] - value) <= tol:
                return BoundaryTag.DIRICHLET_TEMPERATURE
        return default

    return rule


def _extract_boundary(cells: np.ndarray, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Facets appearing in exactly one cell, with their owning cell index."""
    npts = dim + 1
    local_facets = [tuple(j for j in range(npts) if j != i) for i in range(npts)]
    seen: dict[tuple, tuple] = {}
    for c, cell in enumerate(cells):
        for loc in local_facets:
            facet = tuple(cell[j] for j in loc)
            key = tuple(sorted(facet))
            if key in seen:
                seen[key] = None
            else:
                seen[key] = (facet, c)
    facets = []
    owners = []
    for key, val in seen.items():
        if val is not None:
            facets.append(val[0])
            owners.append(val[1])
    return np.asarray(facets, dtype=np.int64), np.asarray(owners, dtype=np.int64)


def _tag_facets(vertices: np.ndarray, facets: np.ndarray, tag_rule: TagRule) -> np.ndarray:
    tags = np.empty(facets.shape[0], dtype=np.int8)
    centroids = vertices[facets].mean(axis=1)
    for i, c in enumerate(centroids):
        tags[i] = _TAG_CODE[tag_rule(c)]
    if not np.any(tags == _TAG_CODE[BoundaryTag.DIRICHLET_TEMPERATURE]):
        raise ConfigurationError("tag rule assigns no facet to the Dirichlet part")
    return tags


# Kuhn split of the unit cube: one tetrahedron per vertex permutation path.
_KUHN_PATHS = [
    [(0, 0, 0), tuple(np.eye(3, dtype=int)[p[0]]),
     tuple(np.eye(3, dtype=int)[p[0]] + np.eye(3, dtype=int)[p[1]]), (1, 1, 1)]
    for p in itertools.permutations(range(3), 2)
]


def build_rectangle_mesh(extents: Sequence[float], divisions: Sequence[int],
                         tag_rule: TagRule) -> Mesh:
    """Mesh an axis-aligned box [0,L1]x...x[0,Ld] with right simplices.

    extents : per-axis lengths, all > 0
    divisions : per-axis cell counts, all >= 1
    tag_rule : maps a facet centroid to its BoundaryTag; must produce at
        least one Dirichlet facet
    """
    extents = [float(e) for e in extents]
    divisions = [int(n) for n in divisions]
    dim = len(extents)
    if dim not in (2, 3):
        raise ConfigurationError(f"dimension {dim} not supported (need 2 or 3)")
    if len(divisions) != dim:
        raise ConfigurationError("extents and divisions must have equal length")
    if any(e <= 0 for e in extents):
        raise ConfigurationError("all extents must be positive")
    if any(n < 1 for n in divisions):
        raise ConfigurationError("all division counts must be at least 1")

    axes = [np.linspace(0.0, extents[k], divisions[k] + 1) for k in range(dim)]
    if dim == 2:
        nx, ny = divisions
        X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
        vertices = np.column_stack([X.ravel(), Y.ravel()])

        def vid(i, j):
            return i * (ny + 1) + j

        cells = []
        for i in range(nx):
            for j in range(ny):
                v00, v10 = vid(i, j), vid(i + 1, j)
                v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
                cells.append((v00, v10, v01))
                cells.append((v10, v11, v01))
        cells = np.asarray(cells, dtype=np.int64)
    else:
        nx, ny, nz = divisions
        X, Y, Z = np.meshgrid(axes[0], axes[1], axes[2], indexing="ij")
        vertices = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

        def vid(i, j, k):
            return (i * (ny + 1) + j) * (nz + 1) + k

        cells = []
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    for path in _KUHN_PATHS:
                        cells.append(tuple(vid(i + c[0], j + c[1], k + c[2]) for c in path))
        cells = np.asarray(cells, dtype=np.int64)
        cells = _orient_positively(vertices, cells)

    facets, _ = _extract_boundary(cells, dim)
    tags = _tag_facets(vertices, facets, tag_rule)
    mesh = Mesh(dim, vertices, cells, facets, tags)
    validate(mesh)
    return mesh


def _orient_positively(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    cells = cells.copy()
    v = vertices[cells]
    det = np.linalg.det(v[:, 1:, :] - v[:, :1, :])
    flip = det < 0
    cells[flip, -2], cells[flip, -1] = cells[flip, -1].copy(), cells[flip, -2].copy()
    return cells


def validate(mesh: Mesh) -> None:
    """Check the mesh invariants; raise ConfigurationError on violation."""
    vols = cell_volumes(mesh)
    if np.any(vols <= 0):
        raise ConfigurationError("mesh has a nonpositively oriented cell")
    facets, _ = _extract_boundary(mesh.cells, mesh.dim)
    have = {tuple(sorted(f)) for f in mesh.boundary_facets}
    want = {tuple(sorted(f)) for f in facets}
    if have != want:
        raise ConfigurationError("boundary facets do not partition the boundary")
    if len(have) != mesh.boundary_facets.shape[0]:
        raise ConfigurationError("duplicate boundary facet")
    if mesh.facet_indices(BoundaryTag.DIRICHLET_TEMPERATURE).size == 0:
        raise ConfigurationError("no Dirichlet facet")


def refine_uniform(mesh: Mesh) -> Mesh:
    """Regular refinement: each triangle into 4, each tetrahedron into 8.

    New midpoint vertices are appended after the existing ones, so nodal data
    prolongates by copying parents and averaging over `parent_edges`.
    Boundary tags are inherited from the parent facet.
    """
    nv = mesh.n_vertices
    edge_index: dict[tuple[int, int], int] = {}
    new_edges: list[tuple[int, int]] = []

    def midpoint(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        idx = edge_index.get(key)
        if idx is None:
            idx = nv + len(new_edges)
            edge_index[key] = idx
            new_edges.append(key)
        return idx

    cells = []
    if mesh.dim == 2:
        for a, b, c in mesh.cells:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            cells += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
    else:
        for x0, x1, x2, x3 in mesh.cells:
            m01, m02, m03 = midpoint(x0, x1), midpoint(x0, x2), midpoint(x0, x3)
            m12, m13, m23 = midpoint(x1, x2), midpoint(x1, x3), midpoint(x2, x3)
            # Bey's rule: 4 corner children + octahedron split along m02-m13
            cells += [
                (x0, m01, m02, m03), (m01, x1, m12, m13),
                (m02, m12, x2, m23), (m03, m13, m23, x3),
                (m01, m02, m03, m13), (m01, m02, m12, m13),
                (m02, m03, m13, m23), (m02, m12, m13, m23),
            ]
    cells = np.asarray(cells, dtype=np.int64)

    facets = []
    tags = []
    for f, t in zip(mesh.boundary_facets, mesh.boundary_tags):
        if mesh.dim == 2:
            a, b = f
            m = midpoint(a, b)
            facets += [(a, m), (m, b)]
            tags += [t, t]
        else:
            a, b, c = f
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            facets += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
            tags += [t, t, t, t]

    parent_edges = np.asarray(new_edges, dtype=np.int64)
    mids = 0.5 * (mesh.vertices[parent_edges[:, 0]] + mesh.vertices[parent_edges[:, 1]])
    vertices = np.vstack([mesh.vertices, mids])
    if mesh.dim == 3:
        cells = _orient_positively(vertices, cells)
    return Mesh(mesh.dim, vertices, cells,
                np.asarray(facets, dtype=np.int64), np.asarray(tags, dtype=np.int8),
                parent_edges=parent_edges)


def prolong(coarse_values: np.ndarray, fine_mesh: Mesh) -> np.ndarray:
    """P1 prolongation of coarse nodal values onto a refine_uniform child."""
    if fine_mesh.parent_edges is None:
        raise ConfigurationError("fine mesh was not produced by refine_uniform")
    pe = fine_mesh.parent_edges
    out = np.empty(fine_mesh.n_vertices, dtype=float)
    nc = coarse_values.shape[0]
    out[:nc] = coarse_values
    out[nc:] = 0.5 * (coarse_values[pe[:, 0]] + coarse_values[pe[:, 1]])
    return out


# Plain-text mesh format:
#   VERTICES n      followed by n lines of dim coordinates
#   CELLS m         followed by m lines of dim+1 vertex indices
#   FACETS k        followed by k lines of dim vertex indices + tag name
# Tag names are the BoundaryTag values. Grammar documented in the README.

def write_mesh_file(mesh: Mesh, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(f"VERTICES {mesh.n_vertices}\n")
        for v in mesh.vertices:
            fh.write(" ".join(repr(float(x)) for x in v) + "\n")
        fh.write(f"CELLS {mesh.n_cells}\n")
        for c in mesh.cells:
            fh.write(" ".join(str(int(i)) for i in c) + "\n")
        fh.write(f"FACETS {mesh.boundary_facets.shape[0]}\n")
        for f, t in zip(mesh.boundary_facets, mesh.boundary_tags):
            name = _TAG_FROM_CODE[int(t)].value
            fh.write(" ".join(str(int(i)) for i in f) + f" {name}\n")


def read_mesh_file(path: str) -> Mesh:
    with open(path) as fh:
        tokens = [line.split() for line in fh if line.strip() and not line.startswith("#")]
    pos = 0

    def expect_section(name):
        nonlocal pos
        if pos >= len(tokens) or tokens[pos][0] != name:
            raise ConfigurationError(f"mesh file: expected section {name}")
        count = int(tokens[pos][1])
        pos += 1
        return count

    n = expect_section("VERTICES")
    verts = np.array([[float(x) for x in tokens[pos + i]] for i in range(n)])
    pos += n
    dim = verts.shape[1]
    if dim not in (2, 3):
        raise ConfigurationError(f"mesh file: dimension {dim} not supported")
    m = expect_section("CELLS")
    cells = np.array([[int(x) for x in tokens[pos + i]] for i in range(m)], dtype=np.int64)
    pos += m
    k = expect_section("FACETS")
    facets = []
    tags = []
    names = {t.value: code for t, code in _TAG_CODE.items()}
    for i in range(k):
        row = tokens[pos + i]
        facets.append([int(x) for x in row[:dim]])
        if row[dim] not in names:
            raise ConfigurationError(f"mesh file: unknown tag {row[dim]!r}")
        tags.append(names[row[dim]])
    mesh = Mesh(dim, verts, cells,
                np.asarray(facets, dtype=np.int64), np.asarray(tags, dtype=np.int8))
    validate(mesh)
    return mesh
