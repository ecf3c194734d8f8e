"""P1 finite element assembly on simplicial meshes.

Quadrature is the 3-point edge-midpoint rule on triangles (exact for
quadratics) and the 4-point degree-2 rule on tetrahedra. Coefficients given
as nodal fields are interpolated to the quadrature points; gradients of P1
functions are cellwise constant. Assembled matrices are immutable once
returned and solves on distinct systems may run concurrently.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AssemblyError, DomainError, SolverFailure
from .fields import Control, Field, FieldKind
from .mesh import BoundaryTag, Mesh, cell_volumes, facet_measures

# quadrature in barycentric coordinates: (points, weights)
_QUAD = {
    2: (np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]),
        np.array([1.0, 1.0, 1.0]) / 3.0),
    3: (np.array([
        [0.58541020, 0.13819660, 0.13819660, 0.13819660],
        [0.13819660, 0.58541020, 0.13819660, 0.13819660],
        [0.13819660, 0.13819660, 0.58541020, 0.13819660],
        [0.13819660, 0.13819660, 0.13819660, 0.58541020]]),
        np.array([0.25, 0.25, 0.25, 0.25])),
}

# facet mass matrices over the unit-measure reference facet
_EDGE_MASS = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
_TRI_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


class P1Geometry:
    """Precomputed per-cell data reused by all assembly routines."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.volumes = cell_volumes(mesh)
        self.grads = self._basis_gradients(mesh)          # (nc, d+1, d)
        bary, self.qweights = _QUAD[mesh.dim]
        self.qbary = bary                                 # (nq, d+1)
        verts = mesh.vertices[mesh.cells]                 # (nc, d+1, d)
        self.qpoints = np.einsum("qi,cid->cqd", bary, verts)
        self.facet_measures = facet_measures(mesh)
        self.robin_facets = mesh.facet_indices(BoundaryTag.ROBIN_TEMPERATURE)

    @staticmethod
    def _basis_gradients(mesh: Mesh) -> np.ndarray:
        v = mesh.vertices[mesh.cells]
        d = mesh.dim
        edges = v[:, 1:, :] - v[:, :1, :]                 # (nc, d, d)
        inv = np.linalg.inv(edges)                        # rows: grad lambda_1..d
        grads = np.empty((mesh.n_cells, d + 1, d))
        grads[:, 1:, :] = np.transpose(inv, (0, 2, 1))
        grads[:, 0, :] = -grads[:, 1:, :].sum(axis=1)
        return grads

    def cell_gradient(self, values: np.ndarray) -> np.ndarray:
        """Cellwise-constant gradient of a P1 nodal field, (nc, d)."""
        return np.einsum("ci,cid->cd", values[self.mesh.cells], self.grads)

    def at_quadrature(self, values: np.ndarray) -> np.ndarray:
        """P1 interpolant at the quadrature points, (nc, nq)."""
        return values[self.mesh.cells] @ self.qbary.T


_GEOMETRY_CACHE: "weakref.WeakKeyDictionary[Mesh, P1Geometry]" = weakref.WeakKeyDictionary()


def geometry(mesh: Mesh) -> P1Geometry:
    geom = _GEOMETRY_CACHE.get(mesh)
    if geom is None:
        geom = P1Geometry(mesh)
        _GEOMETRY_CACHE[mesh] = geom
    return geom


@dataclass
class LinearSystem:
    """Assembled sparse system plus Dirichlet constraints (vertex -> value)."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    constrained: dict[int, float]


WeightLike = "float | np.ndarray | Field | Callable"


def _quad_weight(geom: P1Geometry, weight) -> np.ndarray:
    """Weight values at quadrature points, shape (nc, nq)."""
    nc, nq = geom.mesh.n_cells, geom.qweights.shape[0]
    if callable(weight):
        pts = geom.qpoints.reshape(-1, geom.mesh.dim)
        return np.asarray(weight(pts), dtype=float).reshape(nc, nq)
    if isinstance(weight, Field):
        return geom.at_quadrature(weight.values)
    arr = np.asarray(weight, dtype=float)
    if arr.ndim == 0:
        return np.full((nc, nq), float(arr))
    if arr.shape == (geom.mesh.n_vertices,):
        return geom.at_quadrature(arr)
    if arr.shape == (nc, nq):
        return arr  # already sampled at the quadrature points
    raise AssemblyError(f"cannot interpret weight of shape {arr.shape}")


def _accumulate(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    """Sum (nc, k, k) local matrices into the global sparse matrix."""
    k = local.shape[1]
    cells = mesh.cells
    rows = np.repeat(cells, k, axis=1).ravel()
    cols = np.tile(cells, (1, k)).ravel()
    n = mesh.n_vertices
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def assemble_weighted_stiffness(mesh: Mesh, weight=1.0) -> sp.csr_matrix:
    """A_ij = sum_cells integral w grad(lambda_i) . grad(lambda_j) dx.

    Raises AssemblyError when the weight is negative at a quadrature point
    (a conductivity evaluation bug upstream).
    """
    geom = geometry(mesh)
    w = _quad_weight(geom, weight)
    if np.any(w < 0):
        raise AssemblyError("negative weight at a quadrature point")
    wbar = w @ geom.qweights                              # (nc,)
    gg = np.einsum("cid,cjd->cij", geom.grads, geom.grads)
    local = gg * (wbar * geom.volumes)[:, None, None]
    return _accumulate(mesh, local)


def assemble_mass(mesh: Mesh, weight=1.0) -> sp.csr_matrix:
    """M_ij = sum_cells integral w lambda_i lambda_j dx (consistent mass)."""
    geom = geometry(mesh)
    w = _quad_weight(geom, weight)
    bb = np.einsum("q,qi,qj->qij", geom.qweights, geom.qbary, geom.qbary)
    local = np.einsum("cq,qij->cij", w, bb) * geom.volumes[:, None, None]
    return _accumulate(mesh, local)


def load_vector(mesh: Mesh, weight=1.0) -> np.ndarray:
    """b_i = sum_cells integral w lambda_i dx."""
    geom = geometry(mesh)
    w = _quad_weight(geom, weight)
    local = np.einsum("cq,q,qi->ci", w, geom.qweights, geom.qbary)
    local *= geom.volumes[:, None]
    b = np.zeros(mesh.n_vertices)
    np.add.at(b, mesh.cells, local)
    return b


def _facet_mass(mesh: Mesh) -> np.ndarray:
    return _EDGE_MASS if mesh.dim == 2 else _TRI_MASS


def assemble_robin(mesh: Mesh, beta: Control, u1: Field) -> tuple[sp.csr_matrix, np.ndarray]:
    """Boundary terms of the Robin condition on the Robin facets.

    Returns (matrix, rhs): matrix adds beta * facet mass, rhs the moments
    integral beta u1 lambda_i ds, both with the consistent facet mass matrix.
    """
    if np.any(beta.values < 0) or np.any(beta.values > beta.m_cap):
        raise DomainError("control values outside [0, m_cap]")
    n = mesh.n_vertices
    ref = _facet_mass(mesh)
    measures = facet_measures(mesh)
    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    for b, f in zip(beta.values, beta.facet_ids):
        verts = mesh.boundary_facets[f]
        local = b * measures[f] * ref
        rows.append(np.repeat(verts, verts.size))
        cols.append(np.tile(verts, verts.size))
        vals.append(local.ravel())
        rhs[verts] += local @ u1.values[verts]
    if rows:
        mat = sp.coo_matrix((np.concatenate(vals),
                             (np.concatenate(rows), np.concatenate(cols))),
                            shape=(n, n)).tocsr()
    else:
        mat = sp.csr_matrix((n, n))
    return mat, rhs


def boundary_moments(mesh: Mesh, weights_per_facet: np.ndarray, facet_ids: np.ndarray,
                     trace: np.ndarray) -> np.ndarray:
    """r_i = sum over listed facets of w_f * integral trace lambda_i ds."""
    ref = _facet_mass(mesh)
    measures = facet_measures(mesh)
    out = np.zeros(mesh.n_vertices)
    for w, f in zip(weights_per_facet, facet_ids):
        verts = mesh.boundary_facets[f]
        out[verts] += w * measures[f] * (ref @ trace[verts])
    return out


def facet_integral(mesh: Mesh, facet_id: int, f: np.ndarray, g: np.ndarray) -> float:
    """integral_f (P1 trace of f) (P1 trace of g) ds over one boundary facet."""
    verts = mesh.boundary_facets[facet_id]
    ref = _facet_mass(mesh)
    return float(facet_measures(mesh)[facet_id] * (f[verts] @ ref @ g[verts]))


def assemble_joule_rhs_direct(mesh: Mesh, sigma_of_u: Callable, u: Field,
                              phi: Field) -> np.ndarray:
    """b_i = sum_cells sigma(u_h) |grad phi_h|^2 integral lambda_i.

    sigma_of_u maps temperature values to conductivity values; |grad phi_h|
    is cellwise constant for P1.
    """
    geom = geometry(mesh)
    s = np.asarray(sigma_of_u(geom.at_quadrature(u.values)), dtype=float)
    gphi2 = np.sum(geom.cell_gradient(phi.values) ** 2, axis=1)
    local = np.einsum("cq,q,qi->ci", s, geom.qweights, geom.qbary)
    local *= (gphi2 * geom.volumes)[:, None]
    b = np.zeros(mesh.n_vertices)
    np.add.at(b, mesh.cells, local)
    return b


def assemble_joule_rhs_weak(mesh: Mesh, sigma_of_u: Callable, u: Field, phi: Field,
                            phi0: Field) -> np.ndarray:
    """Joule load in the transformed weak form:

        b_i = integral (phi0 - phi) sigma(u) grad(phi).grad(lambda_i)
            + integral sigma(u) (grad phi . grad phi0) lambda_i.
    """
    geom = geometry(mesh)
    s = np.asarray(sigma_of_u(geom.at_quadrature(u.values)), dtype=float)   # (nc, nq)
    diff = geom.at_quadrature(phi0.values - phi.values)                     # (nc, nq)
    gphi = geom.cell_gradient(phi.values)                                   # (nc, d)
    gphi0 = geom.cell_gradient(phi0.values)

    coeff1 = ((s * diff) @ geom.qweights) * geom.volumes                    # (nc,)
    term1 = np.einsum("c,cd,cid->ci", coeff1, gphi, geom.grads)

    dot = np.sum(gphi * gphi0, axis=1)                                      # (nc,)
    term2 = np.einsum("cq,q,qi->ci", s, geom.qweights, geom.qbary)
    term2 *= (dot * geom.volumes)[:, None]

    b = np.zeros(mesh.n_vertices)
    np.add.at(b, mesh.cells, term1 + term2)
    return b


def convection_matrix(mesh: Mesh, coeff, phi: Field) -> sp.csr_matrix:
    """H_ij = sum_cells integral w (grad phi . grad lambda_j) lambda_i dx.

    Pairs a gradient of the trial function with the test function value;
    `coeff` follows the same conventions as assembly weights.
    """
    geom = geometry(mesh)
    w = _quad_weight(geom, coeff)
    gphi = geom.cell_gradient(phi.values)
    conv = np.einsum("cd,cjd->cj", gphi, geom.grads)       # (nc, d+1) per trial j
    wbasis = np.einsum("cq,q,qi->ci", w, geom.qweights, geom.qbary)
    local = np.einsum("ci,cj->cij", wbasis, conv) * geom.volumes[:, None, None]
    return _accumulate(mesh, local)


def apply_dirichlet(system: LinearSystem, bc: dict[int, float],
                    check_boundary: Mesh | None = None) -> LinearSystem:
    """Symmetric elimination of constrained vertices.

    Constrained rows and columns are zeroed with a unit diagonal; the right
    side absorbs the lifted values. Idempotent for repeated application.
    """
    if check_boundary is not None:
        on_boundary = set(check_boundary.boundary_vertex_set().tolist())
        for v in bc:
            if v not in on_boundary:
                raise AssemblyError(f"Dirichlet constraint on interior vertex {v}")
    merged = dict(system.constrained)
    merged.update(bc)
    A = system.matrix.tocsr()
    rhs = system.rhs.copy()
    idx = np.fromiter(merged.keys(), dtype=np.int64)
    vals = np.fromiter((merged[i] for i in idx), dtype=float)
    x = np.zeros(A.shape[0])
    x[idx] = vals
    rhs -= A @ x
    keep = np.ones(A.shape[0])
    keep[idx] = 0.0
    dk = sp.diags(keep)
    A = (dk @ A @ dk + sp.diags(1.0 - keep)).tocsr()
    rhs[idx] = vals
    return LinearSystem(A, rhs, merged)


def check_symmetric(matrix: sp.spmatrix, rtol: float = 1e-12) -> bool:
    d = abs(matrix - matrix.T)
    scale = max(1e-300, abs(matrix).max())
    return d.max() <= rtol * scale


def solve_spd(system: LinearSystem, rtol: float = 1e-10) -> np.ndarray:
    """Direct sparse solve; contract is relative residual <= rtol."""
    if not check_symmetric(system.matrix):
        raise SolverFailure("matrix not symmetric")
    return solve_sparse(system.matrix, system.rhs, rtol=rtol)


def solve_sparse(matrix: sp.spmatrix, rhs: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    x = spla.spsolve(matrix.tocsc(), rhs)
    if not np.all(np.isfinite(x)):
        raise SolverFailure("sparse solve produced non-finite values "
                            "(singular or degenerate system)")
    res = np.linalg.norm(matrix @ x - rhs)
    scale = max(np.linalg.norm(rhs), 1e-300)
    if res > rtol * max(scale, np.linalg.norm(matrix @ x)):
        raise SolverFailure(f"linear solve residual {res / scale:.3e} exceeds {rtol:.1e}")
    return x


class Norms:
    """Quadrature-exact norms of one P1 field."""

    def __init__(self, l2: float, h1_semi: float, linf: float):
        self.l2 = l2
        self.h1_semi = h1_semi
        self.h1 = float(np.hypot(l2, h1_semi))
        self.linf = linf


def norms(field: Field) -> Norms:
    geom = geometry(field.mesh)
    vq = geom.at_quadrature(field.values)
    l2sq = float(((vq ** 2) @ geom.qweights * geom.volumes).sum())
    g = geom.cell_gradient(field.values)
    h1sq = float((np.sum(g ** 2, axis=1) * geom.volumes).sum())
    return Norms(np.sqrt(max(l2sq, 0.0)), np.sqrt(max(h1sq, 0.0)),
                 float(np.max(np.abs(field.values))))


def boundary_l2(field: Field, tag: BoundaryTag) -> float:
    mesh = field.mesh
    ref = _facet_mass(mesh)
    measures = facet_measures(mesh)
    total = 0.0
    for f in mesh.facet_indices(tag):
        verts = mesh.boundary_facets[f]
        tr = field.values[verts]
        total += measures[f] * float(tr @ ref @ tr)
    return float(np.sqrt(max(total, 0.0)))


def max_cell_gradient(field: Field) -> float:
    """L-infinity proxy for |grad field| (max over cells)."""
    geom = geometry(field.mesh)
    g = geom.cell_gradient(field.values)
    return float(np.max(np.linalg.norm(g, axis=1))) if g.size else 0.0


def interpolate(mesh: Mesh, fn: Callable, kind: FieldKind) -> Field:
    """P1 interpolant of a coordinate function fn(points)->values."""
    vals = np.asarray(fn(mesh.vertices), dtype=float)
    if vals.ndim == 0:
        vals = np.full(mesh.n_vertices, float(vals))
    return Field(mesh, vals, kind)
