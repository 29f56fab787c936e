"""Transient contaminant transport driven by a precomputed wind field.

SUPG-stabilized linear-element discretization of the advection-diffusion
equation with implicit Euler stepping: the system matrix is assembled and
factorized once, each step only refreshes the right-hand side.  Negative
undershoots (the stabilization is not monotone) are reported per step, not
clipped, so the mass accounting stays honest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import fem
from .errors import InstabilityError, PlumePlacementError, SpaceMismatchError
from .fem import DofMap, Field, FormKind
from .mesh import BoundaryTag, TriMesh, circumradii
from .wind import WindField


@dataclass(frozen=True)
class AdParams:
    """Transport run parameters; g is an optional inflow Dirichlet value."""

    k: float
    dt: float
    t_final: float
    dirichlet_value: float | None = None

    def __post_init__(self):
        if self.k < 0.0:
            raise ValueError(f"diffusion coefficient must be non-negative, got {self.k}")
        if self.dt <= 0.0:
            raise ValueError(f"time step must be positive, got {self.dt}")
        if self.t_final < self.dt:
            raise ValueError("t_final must cover at least one step")


@dataclass(frozen=True)
class InitialPlume:
    """Truncated Gaussian release centered at x_c."""

    center: tuple[float, float]
    amplitude: float
    radius: float
    width: float

    def __post_init__(self):
        if self.amplitude <= 0.0:
            raise ValueError("plume amplitude must be positive")
        if not self.radius >= self.width > 0.0:
            raise ValueError("plume needs radius >= width > 0")


@dataclass
class ConcentrationField:
    """Nodal concentration (ppm) at one time instant."""

    field: Field
    time: float


@dataclass
class StepRecord:
    time: float
    min_value: float
    max_value: float
    mass: float


@dataclass
class TransientResult:
    saved: list[ConcentrationField]
    records: list[StepRecord]
    probe_traces: np.ndarray  # (n_steps, n_probes)
    probe_points: np.ndarray


def gaussian_initial(mesh: TriMesh, space: DofMap, plume: InitialPlume) -> ConcentrationField:
    """Nodal interpolation of the truncated Gaussian initial condition.

    The release point must land inside the flow region; building interiors
    are not part of the mesh, so locating the center also validates it.
    """
    tri_of, _ = fem._barycentric(mesh, np.asarray([plume.center], dtype=float))
    if tri_of[0] < 0:
        raise PlumePlacementError(
            f"plume center {plume.center} lies outside the flow domain "
            "(outside the rectangle or inside a building)")
    xc = np.asarray(plume.center, dtype=float)

    def c0(x, y):
        r = np.hypot(x - xc[0], y - xc[1])
        vals = plume.amplitude * np.exp(-r ** 2 / (2.0 * plume.width ** 2))
        return np.where(r <= plume.radius, vals, 0.0)

    return ConcentrationField(field=fem.interpolate(space, c0), time=0.0)


def supg_tau(tri_points: np.ndarray, u_local: np.ndarray, k: float, dt: float) -> float:
    """Stabilization time scale of one element.

    Inverse-root combination of the transient, advective, and diffusive
    limits; h is the element diameter along the local velocity direction,
    falling back to the circumdiameter for (numerically) still air.
    """
    p = np.asarray(tri_points, dtype=float)
    u = np.asarray(u_local, dtype=float)
    unorm = float(np.hypot(u[0], u[1]))
    if unorm < 1e-12:
        a = np.linalg.norm(p[1] - p[0])
        b = np.linalg.norm(p[2] - p[1])
        c = np.linalg.norm(p[0] - p[2])
        area2 = abs((p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1])
                    - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0]))
        h = a * b * c / area2 if area2 > 0 else max(a, b, c)
        unorm = 0.0
    else:
        d = u / unorm
        h = max(abs(float((p[i] - p[j]) @ d)) for i in range(3) for j in range(i))
    terms = (2.0 / dt) ** 2 + (2.0 * unorm / h) ** 2 + (4.0 * k / h ** 2) ** 2
    return 1.0 / math.sqrt(terms) if terms > 0.0 else math.inf


def element_taus(mesh: TriMesh, wind: WindField, k: float, dt: float) -> np.ndarray:
    """Per-element stabilization parameters, velocity sampled at centroids."""
    lam = np.full((1, 3), 1.0 / 3.0)
    u_c, _ = fem._wind_at_quadrature(wind.velocity, lam)
    u_c = u_c[:, 0, :]
    unorm = np.hypot(u_c[:, 0], u_c[:, 1])

    p = [mesh.vertices[mesh.triangles[:, i]] for i in range(3)]
    moving = unorm >= 1e-12
    safe = np.where(moving, unorm, 1.0)
    d = u_c / safe[:, None]
    h = np.zeros(len(u_c))
    for i in range(3):
        for j in range(i):
            proj = np.abs((p[i][:, 0] - p[j][:, 0]) * d[:, 0]
                          + (p[i][:, 1] - p[j][:, 1]) * d[:, 1])
            h = np.maximum(h, proj)
    h_fallback = 2.0 * circumradii(mesh)
    h = np.where(moving, h, h_fallback)
    un = np.where(moving, unorm, 0.0)
    terms = (2.0 / dt) ** 2 + (2.0 * un / h) ** 2 + (4.0 * k / h ** 2) ** 2
    return 1.0 / np.sqrt(terms)


def assemble_ad_system(mesh: TriMesh, space: DofMap, wind: WindField, params: AdParams):
    """(lhs, rhs_op) of the implicit Euler step; assembled once per run."""
    if wind.velocity.dofmap.mesh is not mesh or space.mesh is not mesh:
        raise SpaceMismatchError("wind and concentration spaces must share the mesh")
    tau = element_taus(mesh, wind, params.k, params.dt)
    lhs = fem.assemble(FormKind.AD_LHS, space, wind=wind.velocity,
                       k=params.k, dt=params.dt, tau=tau)
    rhs_op = fem.assemble(FormKind.AD_RHS_OP, space, wind=wind.velocity,
                          k=params.k, dt=params.dt, tau=tau)
    return lhs, rhs_op


class TransportStepper:
    """Factorized implicit Euler stepper with fixed Dirichlet data."""

    def __init__(self, lhs, rhs_op, dirichlet: dict[int, float], dt: float):
        self.rhs_op = rhs_op
        self.dt = dt
        n = lhs.shape[0]
        self.free = np.ones(n)
        constrained, base = fem.apply_dirichlet(lhs, np.zeros(n), dirichlet)
        for dof in dirichlet:
            self.free[int(dof)] = 0.0
        self.base = base  # column compensation plus constraint values
        self.lu = fem.factorize(constrained)

    def step(self, c_n: ConcentrationField) -> ConcentrationField:
        rhs = self.rhs_op @ c_n.field.values
        rhs = rhs * self.free + self.base
        values = self.lu.solve(rhs)
        return ConcentrationField(field=Field(c_n.field.dofmap, values),
                                  time=c_n.time + self.dt)


def step(c_n: ConcentrationField, lhs, rhs_op, dirichlet: dict[int, float],
         dt: float) -> ConcentrationField:
    """Single implicit Euler step (one-shot; prefer TransportStepper in loops)."""
    return TransportStepper(lhs, rhs_op, dirichlet, dt).step(c_n)


def inflow_dirichlet(space: DofMap, value: float) -> dict[int, float]:
    dofs = space.boundary_dofs.get(BoundaryTag.INFLOW)
    if dofs is None:
        return {}
    return {int(d): float(value) for d in dofs}


def run_transient(initial: ConcentrationField, wind: WindField, params: AdParams,
                  probes=(), save_interval: int | None = None) -> TransientResult:
    """March the plume to t_final, recording stats and probe traces per step.

    Saved snapshots include the initial state; per-step records start after
    the first step.  Non-finite values abort with the offending step index.
    """
    space = initial.field.dofmap
    mesh = space.mesh
    lhs, rhs_op = assemble_ad_system(mesh, space, wind, params)
    dirichlet = (inflow_dirichlet(space, params.dirichlet_value)
                 if params.dirichlet_value is not None else {})
    stepper = TransportStepper(lhs, rhs_op, dirichlet, params.dt)

    mass_weights = fem.assemble(FormKind.MASS, space) @ np.ones(space.num_dofs)
    probe_pts = np.asarray(list(probes), dtype=float).reshape(-1, 2)
    tri_of, lam_of = fem._barycentric(mesh, probe_pts) if len(probe_pts) else (np.empty(0, int), np.empty((0, 3)))
    for i, t in enumerate(tri_of):
        if t < 0:
            raise PlumePlacementError(f"probe {tuple(probe_pts[i])} lies outside the flow domain")

    n_steps = math.ceil(params.t_final / params.dt - 1e-12)
    saved = [ConcentrationField(initial.field.copy(), initial.time)]
    records: list[StepRecord] = []
    traces = np.zeros((n_steps, len(probe_pts)))
    c = initial
    for istep in range(1, n_steps + 1):
        c = stepper.step(c)
        vals = c.field.values
        if not np.isfinite(vals).all():
            raise InstabilityError(
                f"non-finite concentration at step {istep}", step=istep)
        records.append(StepRecord(
            time=c.time,
            min_value=float(vals.min()),
            max_value=float(vals.max()),
            mass=float(mass_weights @ vals),
        ))
        for i, t in enumerate(tri_of):
            traces[istep - 1, i] = float(lam_of[i] @ vals[mesh.triangles[t]])
        if save_interval and istep % save_interval == 0:
            saved.append(ConcentrationField(c.field.copy(), c.time))
    return TransientResult(saved=saved, records=records,
                           probe_traces=traces, probe_points=probe_pts)


def total_mass(c: ConcentrationField) -> float:
    space = c.field.dofmap
    weights = fem.assemble(FormKind.MASS, space) @ np.ones(space.num_dofs)
    return float(weights @ c.field.values)


def suggest_dt(mesh: TriMesh, wind: WindField, courant: float = 2.0) -> float:
    """Time step bounding the element Courant number by ``courant``."""
    lam = np.full((1, 3), 1.0 / 3.0)
    u_c, _ = fem._wind_at_quadrature(wind.velocity, lam)
    unorm = np.hypot(u_c[:, 0, 0], u_c[:, 0, 1])
    h = 2.0 * circumradii(mesh)
    ratio = unorm / h
    peak = float(ratio.max())
    if peak <= 0.0:
        return math.inf
    return courant / peak
