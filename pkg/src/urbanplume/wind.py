"""Steady incompressible wind field on the Taylor-Hood discretization.

The parametric inflow condition (speed scaled by a factor mu) is handled
with a lifting function built from an auxiliary Stokes solve, so the
homogenized correction satisfies zero Dirichlet data and stays discretely
divergence free.  The nonlinear system is solved with Newton's method with
simple backtracking and optional mu-continuation for stiff cases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fem
from .errors import MeshTopologyError, NonconvergenceError
from .fem import DofMap, Field, FormKind
from .geo import DomainSpec
from .mesh import BoundaryTag, TriMesh

_WALL_TAGS = (BoundaryTag.NOSLIP_WALL, BoundaryTag.BUILDING_WALL)


@dataclass(frozen=True)
class InsParams:
    """Parameters of one steady wind solve."""

    nu: float
    mu: float
    base_inflow_speed: float = 1.0
    newton_tol: float = 1e-10
    newton_max_iter: int = 25

    def __post_init__(self):
        if self.nu <= 0.0:
            raise ValueError(f"kinematic viscosity must be positive, got {self.nu}")
        if self.mu < 0.0:
            raise ValueError(f"inflow factor must be non-negative, got {self.mu}")
        if not 0.0 < self.newton_tol < 1.0:
            raise ValueError(f"newton_tol must lie in (0, 1), got {self.newton_tol}")


@dataclass
class LiftingFunction:
    """Divergence-free velocity field carrying the unit inflow trace.

    The trace equals the inflow profile on the inflow boundary and vanishes
    on all walls; multiplying by mu gives the Dirichlet data of the solve.
    """

    velocity: Field
    dirichlet_dofs: np.ndarray  # all constrained velocity dofs, sorted


@dataclass
class WindField:
    """Velocity/pressure pair solved at one inflow factor."""

    velocity: Field
    pressure: Field
    mu: float
    newton_iterations: int
    residual_history: list[float] = field(default_factory=list)


def uniform_inflow_profile(domain: DomainSpec, speed: float, ramp_width: float = 0.0):
    """Constant inflow velocity along the wind direction.

    ``ramp_width`` > 0 fades the profile linearly to zero near the two
    inflow corners, reconciling the constant profile with the lateral
    no-slip walls.
    """
    wx, wy = domain.wind_direction
    xmin, ymin, xmax, ymax = domain.bounds
    axis = 0 if domain.inflow_edge in ("bottom", "top") else 1
    lo = (xmin, ymin)[axis]
    hi = (xmax, ymax)[axis]

    def profile(x, y):
        coord = x if axis == 0 else y
        scale = np.ones_like(np.asarray(coord, dtype=float))
        if ramp_width > 0.0:
            edge = np.minimum(coord - lo, hi - coord)
            scale = np.clip(edge / ramp_width, 0.0, 1.0)
        return speed * wx * scale, speed * wy * scale

    return profile


def _dirichlet_scalar_dofs(space: DofMap):
    """(inflow scalar dofs, wall scalar dofs with inflow corners removed)."""
    ns = space.n_scalar
    inflow = space.boundary_dofs.get(BoundaryTag.INFLOW)
    if inflow is None or len(inflow) == 0:
        raise MeshTopologyError("mesh has no INFLOW boundary edges")
    inflow_scalar = np.unique(inflow[inflow < ns])
    wall = [space.boundary_dofs[t] for t in _WALL_TAGS if t in space.boundary_dofs]
    wall_scalar = (np.unique(np.concatenate(wall)[np.concatenate(wall) < ns])
                   if wall else np.empty(0, dtype=np.int64))
    # at shared corners the inflow value wins over the no-slip zero
    wall_scalar = np.setdiff1d(wall_scalar, inflow_scalar)
    return inflow_scalar, wall_scalar


def build_lifting(spaces: tuple[DofMap, DofMap], mesh: TriMesh, profile) -> LiftingFunction:
    """Unit-parameter lifting from a Stokes solve with the profile trace.

    The interior extension solves a Stokes problem with the inflow profile
    on the inflow boundary and zero on the walls, which keeps the discrete
    divergence of the lifting at solver tolerance.
    """
    v_space, p_space = spaces
    inflow_scalar, wall_scalar = _dirichlet_scalar_dofs(v_space)
    coords = v_space.scalar_dof_coords()
    fx, fy = profile(coords[inflow_scalar, 0], coords[inflow_scalar, 1])
    constraints = fem.merge_constraints(
        {int(d): 0.0 for d in np.concatenate([wall_scalar, wall_scalar + v_space.n_scalar])},
        dict(zip((int(d) for d in inflow_scalar), np.broadcast_to(fx, inflow_scalar.shape))),
        dict(zip((int(d) for d in inflow_scalar + v_space.n_scalar),
                 np.broadcast_to(fy, inflow_scalar.shape))),
    )
    a = fem.assemble(FormKind.VISCOUS, v_space, nu=1.0)
    b = fem.assemble(FormKind.DIVERGENCE, v_space, p_space)
    nv = v_space.num_dofs
    system = sp.bmat([[a, -b.T], [b, None]], format="csr")
    rhs = np.zeros(nv + p_space.num_dofs)
    system, rhs = fem.apply_dirichlet(system, rhs, constraints)
    sol = fem.solve_sparse(system, rhs)
    velocity = Field(v_space, sol[:nv])
    dirichlet = np.unique(np.concatenate([
        inflow_scalar, inflow_scalar + v_space.n_scalar,
        wall_scalar, wall_scalar + v_space.n_scalar]))
    return LiftingFunction(velocity=velocity, dirichlet_dofs=dirichlet)


class InsSystem:
    """Assembled Navier-Stokes residual/Jacobian at fixed viscosity.

    State is the stacked (velocity, pressure) coefficient vector; Dirichlet
    velocity rows are enforced exactly, so residual entries there are zero
    by construction and Newton updates vanish on them.
    """

    def __init__(self, mesh: TriMesh, v_space: DofMap, p_space: DofMap,
                 lifting: LiftingFunction, params: InsParams,
                 forcing=None, outflow_traction=None, include_convection=True):
        self.mesh = mesh
        self.v_space = v_space
        self.p_space = p_space
        self.lifting = lifting
        self.params = params
        self.include_convection = include_convection
        self.nv = v_space.num_dofs
        self.ntot = self.nv + p_space.num_dofs
        self.a = fem.assemble(FormKind.VISCOUS, v_space, nu=params.nu)
        self.b = fem.assemble(FormKind.DIVERGENCE, v_space, p_space)
        self.f = np.zeros(self.nv)
        if forcing is not None:
            self.f += fem.assemble_load(v_space, forcing)
        if outflow_traction is not None:
            self.f += fem.assemble_boundary_traction(
                v_space, BoundaryTag.OUTFLOW, outflow_traction)
        self.dirichlet_values = params.mu * lifting.velocity.values[lifting.dirichlet_dofs]
        self._zero_constraints = {int(d): 0.0 for d in lifting.dirichlet_dofs}

    def initial_state(self, correction: np.ndarray | None = None) -> np.ndarray:
        u0 = self.params.mu * self.lifting.velocity.values.copy()
        if correction is not None:
            u0 += correction
        return np.concatenate([u0, np.zeros(self.p_space.num_dofs)])

    def residual(self, state: np.ndarray) -> np.ndarray:
        u = state[:self.nv]
        p = state[self.nv:]
        f_u = self.a @ u - self.b.T @ p - self.f
        if self.include_convection:
            f_u += fem.convection_residual(self.v_space, Field(self.v_space, u))
        f_u[self.lifting.dirichlet_dofs] = 0.0
        return np.concatenate([f_u, self.b @ u])

    def jacobian(self, state: np.ndarray) -> sp.csr_matrix:
        u = Field(self.v_space, state[:self.nv])
        auu = self.a
        if self.include_convection:
            auu = auu + fem.assemble(FormKind.CONVECTION, self.v_space, wind=u) \
                      + fem.assemble(FormKind.CONVECTION_SHEAR, self.v_space, wind=u)
        return sp.bmat([[auu, -self.b.T], [self.b, None]], format="csr")

    def newton_step(self, state: np.ndarray):
        """One Newton update with backtracking; returns (state, residual_norm)."""
        res = self.residual(state)
        rnorm = float(np.linalg.norm(res))
        jac = self.jacobian(state)
        jac_c, rhs = fem.apply_dirichlet(jac, -res, self._zero_constraints)
        delta = fem.solve_sparse(jac_c, rhs)
        alpha = 1.0
        for _ in range(5):
            candidate = state + alpha * delta
            new_norm = float(np.linalg.norm(self.residual(candidate)))
            if new_norm <= rnorm or rnorm == 0.0:
                return candidate, new_norm
            alpha *= 0.5
        return candidate, new_norm

    def solve(self, correction: np.ndarray | None = None) -> WindField:
        state = self.initial_state(correction)
        r0 = float(np.linalg.norm(self.residual(state)))
        history = [1.0] if r0 > 0.0 else [0.0]
        if r0 <= 1e-14 * max(1.0, float(np.linalg.norm(state))) or r0 == 0.0:
            return self._pack(state, 0, [0.0])
        increases = 0
        prev = r0
        for it in range(1, self.params.newton_max_iter + 1):
            state, rnorm = self.newton_step(state)
            rel = rnorm / r0
            history.append(rel)
            if rel <= self.params.newton_tol:
                return self._pack(state, it, history)
            increases = increases + 1 if rnorm > prev else 0
            prev = rnorm
            if increases >= 3:
                raise NonconvergenceError(
                    f"Newton residual increased for {increases} consecutive steps",
                    history)
        raise NonconvergenceError(
            f"Newton did not reach tol {self.params.newton_tol} in "
            f"{self.params.newton_max_iter} iterations", history)

    def _pack(self, state, iterations, history) -> WindField:
        return WindField(
            velocity=Field(self.v_space, state[:self.nv]),
            pressure=Field(self.p_space, state[self.nv:]),
            mu=self.params.mu,
            newton_iterations=iterations,
            residual_history=history,
        )


def solve_steady_ins(mesh: TriMesh, spaces: tuple[DofMap, DofMap],
                     lifting: LiftingFunction, params: InsParams, *,
                     forcing=None, outflow_traction=None,
                     allow_continuation: bool = True) -> WindField:
    """Newton solve of the steady wind field at inflow factor mu.

    On nonconvergence the solve is retried with continuation in mu
    (mu/4 then mu/2 then mu, each warm-started from the previous
    correction) unless ``allow_continuation`` is off.
    """
    v_space, p_space = spaces

    def run(mu: float, correction):
        sys_params = InsParams(nu=params.nu, mu=mu,
                               base_inflow_speed=params.base_inflow_speed,
                               newton_tol=params.newton_tol,
                               newton_max_iter=params.newton_max_iter)
        system = InsSystem(mesh, v_space, p_space, lifting, sys_params,
                           forcing=forcing, outflow_traction=outflow_traction)
        return system.solve(correction)

    try:
        return run(params.mu, None)
    except NonconvergenceError:
        if not allow_continuation or params.mu == 0.0:
            raise
    wind = None
    for frac in (0.25, 0.5, 1.0):
        mu_k = params.mu * frac
        correction = None
        if wind is not None:
            correction = wind.velocity.values - wind.mu * lifting.velocity.values
        wind = run(mu_k, correction)
    return wind


def reynolds_number(wind: WindField, domain: DomainSpec, nu: float) -> float:
    """Re = max velocity magnitude times characteristic length over viscosity."""
    ux, uy = wind.velocity.velocity_components()
    umax = float(np.max(np.hypot(ux, uy)))
    return umax * domain.characteristic_length / nu
