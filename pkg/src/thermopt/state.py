"""Damped Picard solver for the coupled potential/temperature system.

Each step freezes the conductivity at the current temperature iterate,
solves the potential equation, then the temperature equation with the
transformed (weak-form) Joule load, and relaxes the update. When the
critical temperature is finite the conductivity is replaced by a truncated
variant sigma_n that is bounded away from zero, which keeps every linearized
solve uniformly elliptic; afterwards the solution is checked to stay below
the truncation level, so it solves the original problem and the truncation
was only scaffolding. Exceeding the level is a first-class error: that
regime is outside the theory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dfield

import numpy as np
import scipy.sparse.linalg as spla

from . import assembly
from .assembly import LinearSystem, apply_dirichlet, geometry
from .errors import ConfigurationError, CriticalityError, NonconvergenceError
from .fields import Control, Field, FieldKind
from .materials import ConductivityModel, TruncatedModel, TruncationLevel, truncate
from .mesh import BoundaryTag, Mesh


@dataclass
class ProblemSpec:
    """Domain, material and boundary data of one thermistor problem.

    u0, u1, phi0 are P1 interpolants of the (extended) boundary data on the
    whole mesh; m_cap is the admissible upper bound for the control.
    """

    mesh: Mesh
    model: ConductivityModel
    u0: Field
    u1: Field
    phi0: Field
    m_cap: float

    def validate(self) -> None:
        for name, f in (("u0", self.u0), ("u1", self.u1)):
            if np.any(f.values < 0):
                raise ConfigurationError(f"{name} must be nonnegative")
            if np.max(f.values) >= self.model.u_star:
                raise ConfigurationError(
                    f"boundary data not subcritical: max {name} = "
                    f"{np.max(f.values):g} >= u_star = {self.model.u_star:g}")
        if self.m_cap < 0:
            raise ConfigurationError("m_cap must be nonnegative")

    def dirichlet_temperature_vertices(self) -> np.ndarray:
        return self.mesh.boundary_vertex_set(BoundaryTag.DIRICHLET_TEMPERATURE)


@dataclass
class SolverOptions:
    tol: float = 1e-9
    damping: float = 0.7
    max_iter: int = 200
    joule_form: str = "weak"            # "weak" (definitional) or "direct"
    truncation_level: float | None = None


@dataclass
class StateSolution:
    u: Field
    phi: Field
    iterations: int
    residual_u: float
    residual_phi: float
    sigma_clamp_count: int
    truncation_used: TruncationLevel | None
    history: list = dfield(default_factory=list)


class _CountingSigma:
    """Clamps negative temperatures to zero and counts the clamps."""

    def __init__(self, model):
        self.model = model
        self.clamps = 0

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        self.clamps += int(np.count_nonzero(u < 0))
        return self.model.sigma(np.maximum(u, 0.0))


def pick_truncation_level(spec: ProblemSpec) -> float | None:
    """Default level n = u_star - 0.1 (u_star - max u0); None when u_star = inf."""
    u_star = spec.model.u_star
    if not math.isfinite(u_star):
        return None
    u0max = float(np.max(spec.u0.values))
    return u_star - 0.1 * (u_star - u0max)


def solve_state(spec: ProblemSpec, beta: Control,
                opts: SolverOptions | None = None) -> StateSolution:
    """Solve the coupled system; raises on nonconvergence or criticality.

    Convergence is measured on the undamped Picard candidate (the fixed-point
    residual max |T(u^k) - u^k|) and the final candidate is returned, which
    keeps the weak residual at the level of the last increment.
    """
    opts = opts or SolverOptions()
    spec.validate()
    mesh = spec.mesh

    level = opts.truncation_level
    if level is None:
        level = pick_truncation_level(spec)
    if level is not None and not (0.0 < level < spec.model.u_star):
        raise ConfigurationError(f"truncation level {level} outside (0, u_star)")
    work_model = truncate(spec.model, level) if level is not None else spec.model
    sigma = _CountingSigma(work_model)

    K = assembly.assemble_weighted_stiffness(mesh, 1.0)
    R, robin_rhs = assembly.assemble_robin(mesh, beta, spec.u1)
    A_u = (K + R).tocsr()
    bdry_all = mesh.boundary_vertex_set()
    bc_phi = {int(i): float(spec.phi0.values[i]) for i in bdry_all}
    bc_u = {int(i): float(spec.u0.values[i])
            for i in spec.dirichlet_temperature_vertices()}

    # the temperature matrix is iteration-independent: factor once
    u_sys_template = apply_dirichlet(LinearSystem(A_u, np.zeros(mesh.n_vertices), {}), bc_u)
    u_lu = spla.splu(u_sys_template.matrix.tocsc())
    u_shift = _constraint_shift(A_u, bc_u)

    u = spec.u0.values.copy()
    phi = spec.phi0.values.copy()
    history = []
    converged = False
    iterations = 0

    for iterations in range(1, opts.max_iter + 1):
        phi_new = _solve_potential(spec, sigma, u, bc_phi)
        u_field = Field(mesh, u, FieldKind.TEMPERATURE)
        phi_field = Field(mesh, phi_new, FieldKind.POTENTIAL)
        if opts.joule_form == "weak":
            joule = assembly.assemble_joule_rhs_weak(mesh, sigma, u_field, phi_field,
                                                     spec.phi0)
        elif opts.joule_form == "direct":
            joule = assembly.assemble_joule_rhs_direct(mesh, sigma, u_field, phi_field)
        else:
            raise ConfigurationError(f"unknown joule_form {opts.joule_form!r}")
        rhs = joule + robin_rhs
        u_candidate = _solve_constrained(u_lu, u_shift, rhs, bc_u)

        delta_u = float(np.max(np.abs(u_candidate - u)))
        delta_phi = float(np.max(np.abs(phi_new - phi)))
        history.append({"iteration": iterations, "delta_u": delta_u,
                        "delta_phi": delta_phi, "max_u": float(np.max(u_candidate))})
        phi = phi_new
        if max(delta_u, delta_phi) <= opts.tol:
            u = u_candidate
            converged = True
            break
        u = (1.0 - opts.damping) * u + opts.damping * u_candidate

    if not converged:
        raise NonconvergenceError(
            f"Picard did not reach tol {opts.tol:g} in {opts.max_iter} iterations "
            f"(last increment {max(delta_u, delta_phi):.3e})", history)

    if level is not None and float(np.max(u)) >= level:
        raise CriticalityError(
            f"solution not bounded away from the critical temperature: "
            f"max u = {np.max(u):.6g} >= truncation level {level:.6g}", history)

    sol = StateSolution(
        u=Field(mesh, u, FieldKind.TEMPERATURE),
        phi=Field(mesh, phi, FieldKind.POTENTIAL),
        iterations=iterations,
        residual_u=0.0,
        residual_phi=0.0,
        sigma_clamp_count=sigma.clamps,
        truncation_used=(work_model.level if isinstance(work_model, TruncatedModel)
                         else None),
        history=history,
    )
    sol.residual_u, sol.residual_phi = weak_residual(spec, beta, sol)
    return sol


def _solve_potential(spec, sigma, u_vals, bc_phi):
    mesh = spec.mesh
    w = sigma(geometry(mesh).at_quadrature(u_vals))
    A_phi = assembly.assemble_weighted_stiffness(mesh, w)
    system = apply_dirichlet(LinearSystem(A_phi, np.zeros(mesh.n_vertices), {}), bc_phi)
    return assembly.solve_spd(system)


def _constraint_shift(A, bc):
    x = np.zeros(A.shape[0])
    for i, v in bc.items():
        x[i] = v
    return A @ x


def _solve_constrained(lu, shift, rhs, bc):
    b = rhs - shift
    for i, v in bc.items():
        b[i] = v
    return lu.solve(b)


def weak_residual(spec: ProblemSpec, beta: Control, sol: StateSolution,
                  joule_form: str = "weak") -> tuple[float, float]:
    """Scaled norms of the discrete weak-form residuals with the ORIGINAL sigma.

    Using the untruncated conductivity here is what certifies the truncation
    argument: below the level the two coincide, so small residuals prove the
    computed pair solves the original discrete problem.
    """
    mesh = spec.mesh
    sigma = lambda s: spec.model.sigma(np.maximum(np.asarray(s, dtype=float), 0.0))
    K = assembly.assemble_weighted_stiffness(mesh, 1.0)
    R, robin_rhs = assembly.assemble_robin(mesh, beta, spec.u1)
    if joule_form == "weak":
        joule = assembly.assemble_joule_rhs_weak(mesh, sigma, sol.u, sol.phi, spec.phi0)
    else:
        joule = assembly.assemble_joule_rhs_direct(mesh, sigma, sol.u, sol.phi)
    lhs_u = (K + R) @ sol.u.values
    res_u = lhs_u - joule - robin_rhs
    free_u = np.ones(mesh.n_vertices, dtype=bool)
    free_u[spec.dirichlet_temperature_vertices()] = False
    scale_u = max(1.0, float(np.linalg.norm(lhs_u[free_u]))
                  + float(np.linalg.norm((joule + robin_rhs)[free_u])))
    r_u = float(np.linalg.norm(res_u[free_u])) / scale_u

    S = assembly.assemble_weighted_stiffness(
        mesh, sigma(geometry(mesh).at_quadrature(sol.u.values)))
    res_phi = S @ sol.phi.values
    free_phi = np.ones(mesh.n_vertices, dtype=bool)
    free_phi[mesh.boundary_vertex_set()] = False
    scale_phi = max(1.0, float(np.linalg.norm((S @ sol.phi.values)[~free_phi])))
    r_phi = float(np.linalg.norm(res_phi[free_phi])) / scale_phi
    return r_u, r_phi


def subcritical_margin(sol: StateSolution, model: ConductivityModel) -> float:
    """u_star - max(u); +inf sentinel for models without a critical value."""
    if not math.isfinite(model.u_star):
        return math.inf
    return float(model.u_star - np.max(sol.u.values))
