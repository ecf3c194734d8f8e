"""Objective, adjoint/sensitivity solves, gradient, projection and the
optimizers for the Robin boundary control problem.

The objective is J(beta) = integral_Omega u dx + integral_GammaR beta^2 ds
over the box 0 <= beta <= m_cap. The adjoint pair (p, q) solves the linear
system that is the transpose of the linearized state equations, so one
adjoint solve yields the whole gradient

    g = 2 beta + (u - u1) p      on the Robin boundary,

and the optimal control satisfies the pointwise projection formula
beta = clip(-(u - u1) p / 2, 0, m_cap). Two drivers reach the coupled
optimality system: a relaxed forward-backward sweep on the projection
formula, and projected gradient descent with an Armijo backtracking line
search (monotone in J by construction). Sensitivity solves exist only to
verify the gradient; the optimizers never use them.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dfield

import numpy as np
import scipy.sparse as sp

from . import assembly
from .assembly import LinearSystem, apply_dirichlet, geometry
from .errors import AdjointFailure, ConfigurationError, SolverFailure
from .fields import Control, Field, FieldKind
from .mesh import facet_measures
from .state import ProblemSpec, SolverOptions, StateSolution, solve_state


@dataclass
class ObjectiveValue:
    integral_u: float
    integral_beta_sq: float

    @property
    def total(self) -> float:
        return self.integral_u + self.integral_beta_sq


@dataclass
class AdjointSolution:
    p: Field
    q: Field
    residual: float


@dataclass
class SensitivityPair:
    psi1: Field
    psi2: Field
    direction: Control


def objective(mesh, u: Field, beta: Control) -> ObjectiveValue:
    """J = integral u dx + sum over Robin facets of |f| beta_f^2."""
    integral_u = float(assembly.load_vector(mesh) @ u.values)
    measures = facet_measures(mesh)[beta.facet_ids]
    return ObjectiveValue(integral_u, float(measures @ beta.values ** 2))


def _linearization_blocks(spec: ProblemSpec, beta: Control, state: StateSolution):
    """Matrices of the state linearization at (u, phi).

    A  = stiffness(1) + robin(beta) - mass(sigma'(u)|grad phi|^2)
    H  = convection with sigma(u) grad phi   (trial gradient, test value)
    W  = convection with sigma'(u) grad phi
    S  = stiffness(sigma(u))
    """
    mesh = spec.mesh
    geom = geometry(mesh)
    model = spec.model
    u_q = np.maximum(geom.at_quadrature(state.u.values), 0.0)
    sigma_q = np.asarray(model.sigma(u_q), dtype=float)
    sigma_prime_q = np.asarray(model.sigma_prime(u_q), dtype=float)
    gphi2 = np.sum(geom.cell_gradient(state.phi.values) ** 2, axis=1)

    K = assembly.assemble_weighted_stiffness(mesh, 1.0)
    R, _ = assembly.assemble_robin(mesh, beta, spec.u1)
    MJ = assembly.assemble_mass(mesh, sigma_prime_q * gphi2[:, None])
    A = (K + R - MJ).tocsr()
    H = assembly.convection_matrix(mesh, sigma_q, state.phi)
    W = assembly.convection_matrix(mesh, sigma_prime_q, state.phi)
    S = assembly.assemble_weighted_stiffness(mesh, sigma_q)
    return A, H, W, S


def _block_bc(spec: ProblemSpec):
    n = spec.mesh.n_vertices
    bc = {int(i): 0.0 for i in spec.dirichlet_temperature_vertices()}
    bc.update({int(i) + n: 0.0 for i in spec.mesh.boundary_vertex_set()})
    return bc


def adjoint_system(spec: ProblemSpec, beta: Control,
                   state: StateSolution) -> tuple[sp.csr_matrix, np.ndarray, dict]:
    """Monolithic block system for (p, q) with the unit source from the
    objective; rows are the weak adjoint equations, sign fixed so that

        integral grad p . grad v + robin - sigma'|grad phi|^2 p v
            + sigma' (grad phi . grad q) v = -integral v        (p rows)
        -2 integral sigma p grad phi . grad w + integral sigma grad q . grad w = 0.
    """
    A, H, W, S = _linearization_blocks(spec, beta, state)
    block = sp.bmat([[A, W], [-2.0 * H.T, S]], format="csr")
    rhs = np.concatenate([-assembly.load_vector(spec.mesh),
                          np.zeros(spec.mesh.n_vertices)])
    return block, rhs, _block_bc(spec)


def sensitivity_system(spec: ProblemSpec, beta: Control, state: StateSolution,
                       ell: Control) -> tuple[sp.csr_matrix, np.ndarray, dict]:
    """Monolithic block system for (psi1, psi2) with Robin forcing
    -ell (u - u1) on the Robin part; the transpose of the adjoint system."""
    A, H, W, S = _linearization_blocks(spec, beta, state)
    block = sp.bmat([[A, -2.0 * H], [W.T, S]], format="csr")
    ell_load = assembly.boundary_moments(spec.mesh, ell.values, ell.facet_ids,
                                         state.u.values - spec.u1.values)
    rhs = np.concatenate([-ell_load, np.zeros(spec.mesh.n_vertices)])
    return block, rhs, _block_bc(spec)


def _solve_block(block, rhs, bc, n) -> tuple[np.ndarray, np.ndarray, float]:
    system = apply_dirichlet(LinearSystem(block, rhs, {}), bc)
    try:
        x = assembly.solve_sparse(system.matrix, system.rhs)
    except SolverFailure as exc:
        raise AdjointFailure(
            f"block solve failed ({exc}); the conductivity may be degenerate "
            "on part of the domain") from exc
    res = np.linalg.norm(system.matrix @ x - system.rhs)
    res /= max(1.0, np.linalg.norm(system.rhs))
    return x[:n], x[n:], float(res)


def solve_adjoint(spec: ProblemSpec, beta: Control,
                  state: StateSolution) -> AdjointSolution:
    block, rhs, bc = adjoint_system(spec, beta, state)
    n = spec.mesh.n_vertices
    p, q, res = _solve_block(block, rhs, bc, n)
    return AdjointSolution(Field(spec.mesh, p, FieldKind.ADJOINT_P),
                           Field(spec.mesh, q, FieldKind.ADJOINT_Q), res)


def solve_sensitivity(spec: ProblemSpec, beta: Control, state: StateSolution,
                      ell: Control) -> SensitivityPair:
    block, rhs, bc = sensitivity_system(spec, beta, state, ell)
    n = spec.mesh.n_vertices
    psi1, psi2, _ = _solve_block(block, rhs, bc, n)
    return SensitivityPair(Field(spec.mesh, psi1, FieldKind.SENSITIVITY_1),
                           Field(spec.mesh, psi2, FieldKind.SENSITIVITY_2), ell)


def _facet_averages(spec: ProblemSpec, state: StateSolution,
                    adjoint: AdjointSolution, facet_ids) -> np.ndarray:
    """Per-facet averages of (u - u1) p via consistent facet integrals."""
    mesh = spec.mesh
    diff = state.u.values - spec.u1.values
    measures = facet_measures(mesh)
    out = np.empty(len(facet_ids))
    for k, f in enumerate(facet_ids):
        out[k] = assembly.facet_integral(mesh, int(f), diff,
                                         adjoint.p.values) / measures[f]
    return out


def gradient(spec: ProblemSpec, state: StateSolution, adjoint: AdjointSolution,
             beta: Control) -> np.ndarray:
    """Facetwise g = 2 beta + avg((u - u1) p)."""
    return 2.0 * beta.values + _facet_averages(spec, state, adjoint, beta.facet_ids)


def project_control(spec: ProblemSpec, state: StateSolution,
                    adjoint: AdjointSolution, m_cap: float) -> Control:
    """Projection formula beta = clip(-(u - u1) p / 2, 0, m_cap), facetwise."""
    from .mesh import BoundaryTag
    facet_ids = spec.mesh.facet_indices(BoundaryTag.ROBIN_TEMPERATURE)
    avg = _facet_averages(spec, state, adjoint, facet_ids)
    return Control(spec.mesh, np.clip(-0.5 * avg, 0.0, m_cap), m_cap)


def dj_adjoint(spec: ProblemSpec, state: StateSolution, adjoint: AdjointSolution,
               beta: Control, ell: Control) -> float:
    """Directional derivative via the adjoint pairing integral g ell ds."""
    g = gradient(spec, state, adjoint, beta)
    measures = facet_measures(spec.mesh)[beta.facet_ids]
    return float(np.sum(measures * g * ell.values))


def dj_sensitivity(spec: ProblemSpec, pair: SensitivityPair, beta: Control,
                   ell: Control) -> float:
    """Directional derivative integral psi1 dx + 2 integral beta ell ds."""
    measures = facet_measures(spec.mesh)[beta.facet_ids]
    return float(assembly.load_vector(spec.mesh) @ pair.psi1.values
                 + 2.0 * np.sum(measures * beta.values * ell.values))


def dj_fd(spec: ProblemSpec, beta: Control, ell: Control, eps: float = 1e-4,
          solver: SolverOptions | None = None, central: bool = True) -> float:
    """Finite-difference derivative of J; two (or one) nonlinear solves."""
    solver = solver or SolverOptions(tol=1e-11)

    def j_at(values):
        b = Control(spec.mesh, values, beta.m_cap)
        sol = solve_state(spec, b, solver)
        return objective(spec.mesh, sol.u, b).total

    if central:
        jp = j_at(beta.values + eps * ell.values)
        jm = j_at(beta.values - eps * ell.values)
        return (jp - jm) / (2.0 * eps)
    j0 = j_at(beta.values)
    return (j_at(beta.values + eps * ell.values) - j0) / eps


@dataclass
class OptimizerOptions:
    mode: str = "sweep"                 # "sweep" or "projected_gradient"
    relaxation: float = 0.5             # sweep averaging weight
    tol: float = 1e-7
    max_outer: int = 100
    beta0: np.ndarray | float | None = None   # default m_cap / 2
    armijo_c: float = 1e-4
    max_backtracks: int = 40
    solver: SolverOptions = dfield(default_factory=SolverOptions)


@dataclass
class OptimizeResult:
    beta: Control
    state: StateSolution
    adjoint: AdjointSolution
    history: list
    optimality_residual: float
    converged: bool
    status: str


def _initial_control(spec: ProblemSpec, opts: OptimizerOptions) -> Control:
    if opts.beta0 is None:
        return Control.constant(spec.mesh, 0.5 * spec.m_cap, spec.m_cap)
    if np.ndim(opts.beta0) == 0:
        return Control.constant(spec.mesh, float(opts.beta0), spec.m_cap)
    return Control(spec.mesh, np.asarray(opts.beta0, dtype=float), spec.m_cap)


def optimize(spec: ProblemSpec, opts: OptimizerOptions | None = None) -> OptimizeResult:
    opts = opts or OptimizerOptions()
    if opts.mode == "sweep":
        return _optimize_sweep(spec, opts)
    if opts.mode == "projected_gradient":
        return _optimize_projected_gradient(spec, opts)
    raise ConfigurationError(f"unknown optimizer mode {opts.mode!r}")


def _resolve(spec, beta, opts):
    state = solve_state(spec, beta, opts.solver)
    adjoint = solve_adjoint(spec, beta, state)
    return state, adjoint


def _projection_image(spec, state, adjoint, m_cap, facet_ids) -> np.ndarray:
    avg = _facet_averages(spec, state, adjoint, facet_ids)
    return np.clip(-0.5 * avg, 0.0, m_cap)


def _optimize_sweep(spec: ProblemSpec, opts: OptimizerOptions) -> OptimizeResult:
    beta = _initial_control(spec, opts)
    history = []
    best = None
    for it in range(1, opts.max_outer + 1):
        state, adjoint = _resolve(spec, beta, opts)
        proj = _projection_image(spec, state, adjoint, spec.m_cap, beta.facet_ids)
        resid = float(np.max(np.abs(beta.values - proj))) if proj.size else 0.0
        j = objective(spec.mesh, state.u, beta)
        history.append({"iteration": it, "J": j.total, "integral_u": j.integral_u,
                        "integral_beta_sq": j.integral_beta_sq,
                        "optimality_residual": resid})
        if best is None or j.total < best[0]:
            best = (j.total, beta, state, adjoint, resid)
        if resid <= opts.tol:
            # land exactly on the projection image and report its residual
            beta = beta.with_values(proj)
            state, adjoint = _resolve(spec, beta, opts)
            final = _projection_image(spec, state, adjoint, spec.m_cap, beta.facet_ids)
            final_resid = float(np.max(np.abs(beta.values - final))) if final.size else 0.0
            return OptimizeResult(beta, state, adjoint, history, final_resid,
                                  True, "converged")
        beta = beta.with_values((1.0 - opts.relaxation) * beta.values
                                + opts.relaxation * proj)
    _, beta, state, adjoint, resid = best
    return OptimizeResult(beta, state, adjoint, history, resid, False,
                          "max_outer exceeded; best-J iterate returned")


def _optimize_projected_gradient(spec: ProblemSpec,
                                 opts: OptimizerOptions) -> OptimizeResult:
    beta = _initial_control(spec, opts)
    measures = facet_measures(spec.mesh)[beta.facet_ids]
    state, adjoint = _resolve(spec, beta, opts)
    j = objective(spec.mesh, state.u, beta)
    history = []
    status, converged = "max_outer exceeded; best-J iterate returned", False
    for it in range(1, opts.max_outer + 1):
        g = gradient(spec, state, adjoint, beta)
        proj = _projection_image(spec, state, adjoint, spec.m_cap, beta.facet_ids)
        resid = float(np.max(np.abs(beta.values - proj))) if proj.size else 0.0
        entry = {"iteration": it, "J": j.total, "integral_u": j.integral_u,
                 "integral_beta_sq": j.integral_beta_sq,
                 "optimality_residual": resid, "step": 0.0}
        history.append(entry)
        if resid <= opts.tol:
            status, converged = "converged", True
            break
        step = 1.0
        accepted = False
        for _ in range(opts.max_backtracks):
            candidate = np.clip(beta.values - step * g, 0.0, spec.m_cap)
            if not np.any(candidate != beta.values):
                break  # projection blocks every move: stationary
            cand = beta.with_values(candidate)
            cstate = solve_state(spec, cand, opts.solver)
            cj = objective(spec.mesh, cstate.u, cand)
            decrease = float(np.sum(measures * g * (candidate - beta.values)))
            if cj.total <= j.total + opts.armijo_c * decrease:
                beta, state, j = cand, cstate, cj
                adjoint = solve_adjoint(spec, beta, state)
                entry["step"] = step
                accepted = True
                break
            step *= 0.5
        if not accepted:
            status, converged = "converged", True  # no admissible descent
            break
    final = _projection_image(spec, state, adjoint, spec.m_cap, beta.facet_ids)
    resid = float(np.max(np.abs(beta.values - final))) if final.size else 0.0
    return OptimizeResult(beta, state, adjoint, history, resid, converged, status)
