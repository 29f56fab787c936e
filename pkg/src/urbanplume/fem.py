"""Finite-element infrastructure on triangle meshes.

Taylor-Hood velocity/pressure pair (quadratic vector / linear scalar) and
linear scalar spaces, Gaussian triangle quadrature, vectorized sparse
operator assembly, symmetric Dirichlet elimination, and a direct sparse LU
backend.  Degrees of freedom for quadratic spaces live on vertices and edge
midpoints; vector spaces use block layout (all x components first).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    ConstraintConflictError,
    MeshTopologyError,
    NonFiniteCoefficientError,
    SingularMatrixError,
    SpaceMismatchError,
)
from .mesh import BoundaryTag, TriMesh


class SpaceKind(Enum):
    SCALAR_P1 = "scalar_p1"
    SCALAR_P2 = "scalar_p2"
    PRESSURE_P1 = "pressure_p1"
    VELOCITY_P2_VECTOR = "velocity_p2_vector"


class FormKind(Enum):
    MASS = "mass"
    VISCOUS = "viscous"
    DIVERGENCE = "divergence"
    CONVECTION = "convection"
    CONVECTION_SHEAR = "convection_shear"
    AD_LHS = "ad_lhs"
    AD_RHS_OP = "ad_rhs_op"


# ---------------------------------------------------------------------------
# quadrature and reference bases
# ---------------------------------------------------------------------------

def _dunavant_rule(degree: int):
    """Symmetric Gauss points on the reference triangle; weights sum to 1."""
    if degree <= 4:
        a, wa = 0.445948490915965, 0.223381589678011
        b, wb = 0.091576213509771, 0.109951743655322
        pts, wts = [], []
        for v, w in ((a, wa), (b, wb)):
            c = 1.0 - 2.0 * v
            for lam in ((c, v, v), (v, c, v), (v, v, c)):
                pts.append(lam)
                wts.append(w)
        return np.array(pts), np.array(wts)
    if degree <= 6:
        a, wa = 0.249286745170910, 0.116786275726379
        b, wb = 0.063089014491502, 0.050844906370207
        pts, wts = [], []
        for v, w in ((a, wa), (b, wb)):
            c = 1.0 - 2.0 * v
            for lam in ((c, v, v), (v, c, v), (v, v, c)):
                pts.append(lam)
                wts.append(w)
        g = (0.053145049844816, 0.310352451033785, 0.636502499121399)
        wg = 0.082851075618374
        for lam in ((g[0], g[1], g[2]), (g[0], g[2], g[1]), (g[1], g[0], g[2]),
                    (g[1], g[2], g[0]), (g[2], g[0], g[1]), (g[2], g[1], g[0])):
            pts.append(lam)
            wts.append(wg)
        return np.array(pts), np.array(wts)
    raise ValueError(f"no quadrature rule of degree {degree}")


@lru_cache(maxsize=None)
def quadrature(degree: int):
    """(barycentric points (nq, 3), weights (nq,) summing to one)."""
    pts, wts = _dunavant_rule(degree)
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts


def p1_values(lam: np.ndarray) -> np.ndarray:
    """P1 shape functions at barycentric points, shape (nq, 3)."""
    return np.asarray(lam, dtype=float)


_P1_REF_GRADS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def p2_values(lam: np.ndarray) -> np.ndarray:
    """P2 shape functions at barycentric points, shape (nq, 6).

    Local order: three vertices then edge midpoints (v0v1, v1v2, v2v0).
    """
    l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
    return np.column_stack([
        l0 * (2.0 * l0 - 1.0),
        l1 * (2.0 * l1 - 1.0),
        l2 * (2.0 * l2 - 1.0),
        4.0 * l0 * l1,
        4.0 * l1 * l2,
        4.0 * l2 * l0,
    ])


def p2_ref_grads(lam: np.ndarray) -> np.ndarray:
    """Reference-element gradients of P2 shape functions, shape (nq, 6, 2)."""
    nq = len(lam)
    g = np.empty((nq, 6, 2))
    d0, d1, d2 = _P1_REF_GRADS
    for q in range(nq):
        l0, l1, l2 = lam[q]
        g[q, 0] = (4.0 * l0 - 1.0) * d0
        g[q, 1] = (4.0 * l1 - 1.0) * d1
        g[q, 2] = (4.0 * l2 - 1.0) * d2
        g[q, 3] = 4.0 * (l1 * d0 + l0 * d1)
        g[q, 4] = 4.0 * (l2 * d1 + l1 * d2)
        g[q, 5] = 4.0 * (l0 * d2 + l2 * d0)
    return g


def _geometry(mesh: TriMesh):
    """Per-element affine map data, cached on the mesh instance."""
    cached = mesh.__dict__.get("_fem_geometry")
    if cached is not None:
        return cached
    p0 = mesh.vertices[mesh.triangles[:, 0]]
    p1 = mesh.vertices[mesh.triangles[:, 1]]
    p2 = mesh.vertices[mesh.triangles[:, 2]]
    jac = np.stack([p1 - p0, p2 - p0], axis=2)  # (nt, 2, 2), columns are edges
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    inv_jt = np.empty_like(jac)
    inv_jt[:, 0, 0] = jac[:, 1, 1]
    inv_jt[:, 0, 1] = -jac[:, 1, 0]
    inv_jt[:, 1, 0] = -jac[:, 0, 1]
    inv_jt[:, 1, 1] = jac[:, 0, 0]
    inv_jt /= det[:, None, None]
    geo = {"jac": jac, "det": det, "area": 0.5 * det, "inv_jt": inv_jt, "p0": p0}
    mesh.__dict__["_fem_geometry"] = geo
    return geo


# ---------------------------------------------------------------------------
# dof maps and fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DofMap:
    """Local-to-global dof tables plus per-tag boundary dof sets.

    ``cell_dofs`` holds the scalar dof table; for the vector space the y
    component of scalar dof d is d + n_scalar (block layout).
    """

    mesh: TriMesh
    kind: SpaceKind
    cell_dofs: np.ndarray
    n_scalar: int
    num_dofs: int
    boundary_dofs: dict[BoundaryTag, np.ndarray]

    @property
    def is_vector(self) -> bool:
        return self.kind is SpaceKind.VELOCITY_P2_VECTOR

    @property
    def is_quadratic(self) -> bool:
        return self.kind in (SpaceKind.SCALAR_P2, SpaceKind.VELOCITY_P2_VECTOR)

    def component_dofs(self, scalar_dofs: np.ndarray, component: int) -> np.ndarray:
        return np.asarray(scalar_dofs) + component * self.n_scalar

    def scalar_dof_coords(self) -> np.ndarray:
        """Coordinates of the scalar dofs (vertices, then edge midpoints)."""
        if self.is_quadratic:
            return np.vstack([self.mesh.vertices, self.mesh.edge_midpoints])
        return self.mesh.vertices


@dataclass
class Field:
    """Coefficient vector on a dof map."""

    dofmap: DofMap
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.dofmap.num_dofs,):
            raise SpaceMismatchError(
                f"field has {self.values.shape} values for a "
                f"{self.dofmap.num_dofs}-dof space")

    def copy(self) -> "Field":
        return Field(self.dofmap, self.values.copy())

    def check_finite(self) -> None:
        if not np.isfinite(self.values).all():
            raise NonFiniteCoefficientError("field contains non-finite values")

    def velocity_components(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.dofmap.n_scalar
        return self.values[:n], self.values[n:]


def build_space(mesh: TriMesh, kind: SpaceKind) -> DofMap:
    """Construct a dof map; boundary dofs are grouped per boundary tag.

    Vertices shared by differently tagged edges are members of both sets.
    """
    if (mesh.edge_triangle_count > 2).any():
        raise MeshTopologyError("mesh is non-conforming: an edge has > 2 triangles")
    nv = mesh.num_vertices
    if kind in (SpaceKind.SCALAR_P1, SpaceKind.PRESSURE_P1):
        cell_dofs = mesh.triangles.copy()
        n_scalar = nv
        components = 1
    else:
        cell_dofs = np.hstack([mesh.triangles, nv + mesh.triangle_edges])
        n_scalar = nv + len(mesh.edges)
        components = 2 if kind is SpaceKind.VELOCITY_P2_VECTOR else 1

    boundary: dict[BoundaryTag, np.ndarray] = {}
    edge_ids = {(int(a), int(b)): i for i, (a, b) in enumerate(mesh.edges)}
    for tag in BoundaryTag:
        rows = mesh.boundary_edges[mesh.boundary_tags == int(tag)]
        if len(rows) == 0:
            continue
        dofs = set()
        for a, b in rows:
            a, b = int(a), int(b)
            dofs.add(a)
            dofs.add(b)
            if kind in (SpaceKind.SCALAR_P2, SpaceKind.VELOCITY_P2_VECTOR):
                dofs.add(nv + edge_ids[(a, b) if a < b else (b, a)])
        scalar = np.array(sorted(dofs), dtype=np.int64)
        if components == 2:
            boundary[tag] = np.concatenate([scalar, scalar + n_scalar])
        else:
            boundary[tag] = scalar
    return DofMap(mesh=mesh, kind=kind, cell_dofs=cell_dofs, n_scalar=n_scalar,
                  num_dofs=components * n_scalar, boundary_dofs=boundary)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _scalar_basis(space: DofMap, lam: np.ndarray):
    """(values (nq, nloc), physical grads (nt, nq, nloc, 2)) for the space."""
    geo = _geometry(space.mesh)
    if space.is_quadratic:
        vals = p2_values(lam)
        ref = p2_ref_grads(lam)
        grads = np.einsum("tab,qlb->tqla", geo["inv_jt"], ref)
    else:
        vals = p1_values(lam)
        grads = np.einsum("tab,lb->tla", geo["inv_jt"], _P1_REF_GRADS)
        grads = np.broadcast_to(grads[:, None], (len(geo["det"]), len(lam), 3, 2))
    return vals, grads


def _wind_at_quadrature(wind: Field, lam: np.ndarray):
    """Velocity and velocity gradient at quadrature points of every element.

    Returns (u (nt, nq, 2), grad_u (nt, nq, 2, 2)) with grad_u[..., c, d] =
    du_c/dx_d.
    """
    space = wind.dofmap
    vals, grads = _scalar_basis(space, lam)
    ux, uy = wind.velocity_components()
    wloc = np.stack([ux[space.cell_dofs], uy[space.cell_dofs]], axis=2)  # (nt, 6, 2)
    u_q = np.einsum("tlc,ql->tqc", wloc, vals)
    grad_q = np.einsum("tlc,tqld->tqcd", wloc, grads)
    return u_q, grad_q


def _scatter(rows, cols, vals, shape) -> sp.csr_matrix:
    mat = sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape)
    out = mat.tocsr()
    out.sum_duplicates()
    out.eliminate_zeros()
    return out


def _rows_cols(test_dofs: np.ndarray, trial_dofs: np.ndarray):
    nt, nte = test_dofs.shape
    _, ntr = trial_dofs.shape
    rows = np.repeat(test_dofs, ntr, axis=1)
    cols = np.tile(trial_dofs, (1, nte))
    return rows, cols


def _check_same_mesh(*spaces: DofMap):
    base = spaces[0].mesh
    for s in spaces[1:]:
        if s.mesh is not base:
            raise SpaceMismatchError("dof maps live on different meshes")


def assemble(form: FormKind, trial: DofMap, test: DofMap | None = None, *,
             nu: float | None = None, wind: Field | None = None,
             k: float | None = None, dt: float | None = None,
             tau: np.ndarray | None = None) -> sp.csr_matrix:
    """Assemble a global sparse operator for the requested bilinear form.

    MASS and VISCOUS are symmetric scalar/vector forms on ``trial``;
    DIVERGENCE takes velocity trial and pressure test; CONVECTION(w) is
    advection by the given wind field, CONVECTION_SHEAR(w) the gradient
    coupling block (trial dotted into grad w); AD_LHS/AD_RHS_OP are the
    stabilized transport operators (tau is a per-element array).
    """
    if test is None:
        test = trial
    _check_same_mesh(trial, test)
    if wind is not None:
        _check_same_mesh(trial, wind.dofmap)
        wind.check_finite()

    if form is FormKind.MASS:
        return _assemble_mass(trial)
    if form is FormKind.VISCOUS:
        if nu is None:
            raise ValueError("VISCOUS requires nu")
        return _assemble_viscous(trial, nu)
    if form is FormKind.DIVERGENCE:
        return _assemble_divergence(trial, test)
    if form is FormKind.CONVECTION:
        if wind is None:
            raise ValueError("CONVECTION requires a wind field")
        return _assemble_convection(trial, test, wind)
    if form is FormKind.CONVECTION_SHEAR:
        if wind is None:
            raise ValueError("CONVECTION_SHEAR requires a wind field")
        return _assemble_convection_shear(trial, wind)
    if form in (FormKind.AD_LHS, FormKind.AD_RHS_OP):
        if wind is None or k is None or dt is None or tau is None:
            raise ValueError("AD forms require wind, k, dt, and tau")
        return _assemble_ad(form, trial, wind, k, dt, tau)
    raise ValueError(f"unknown form {form}")


def _assemble_scalar_blocks(space: DofMap, elem: np.ndarray) -> sp.csr_matrix:
    """Scatter an element tensor (nt, nloc, nloc), duplicating vector blocks."""
    rows, cols = _rows_cols(space.cell_dofs, space.cell_dofs)
    n = space.num_dofs
    if not space.is_vector:
        return _scatter(rows, cols, elem, (n, n))
    ns = space.n_scalar
    rows2 = np.concatenate([rows, rows + ns])
    cols2 = np.concatenate([cols, cols + ns])
    vals2 = np.concatenate([elem.reshape(len(elem), -1)] * 2)
    return _scatter(rows2, cols2, vals2, (n, n))


def _assemble_mass(space: DofMap) -> sp.csr_matrix:
    lam, wts = quadrature(4)
    geo = _geometry(space.mesh)
    vals, _ = _scalar_basis(space, lam)
    elem = np.einsum("q,t,qi,qj->tij", wts, geo["area"], vals, vals)
    return _assemble_scalar_blocks(space, elem)


def _assemble_viscous(space: DofMap, nu: float) -> sp.csr_matrix:
    lam, wts = quadrature(4)
    geo = _geometry(space.mesh)
    _, grads = _scalar_basis(space, lam)
    elem = nu * np.einsum("q,t,tqia,tqja->tij", wts, geo["area"], grads, grads)
    return _assemble_scalar_blocks(space, elem)


def _assemble_divergence(trial: DofMap, test: DofMap) -> sp.csr_matrix:
    """B[k, j] = integral of pressure test k times div(velocity trial j)."""
    if not trial.is_vector or test.is_vector:
        raise SpaceMismatchError("DIVERGENCE needs velocity trial and pressure test")
    lam, wts = quadrature(4)
    geo = _geometry(trial.mesh)
    pvals, _ = _scalar_basis(test, lam)
    _, grads = _scalar_basis(trial, lam)
    ns = trial.n_scalar
    shape = (test.num_dofs, trial.num_dofs)
    blocks = []
    for comp in range(2):
        elem = np.einsum("q,t,qk,tqj->tkj", wts, geo["area"], pvals, grads[..., comp])
        rows, cols = _rows_cols(test.cell_dofs, trial.cell_dofs + comp * ns)
        blocks.append(_scatter(rows, cols, elem, shape))
    out = (blocks[0] + blocks[1]).tocsr()
    out.eliminate_zeros()
    return out


def _assemble_convection(trial: DofMap, test: DofMap, wind: Field) -> sp.csr_matrix:
    """Advection by wind: C[i, j] = integral of test_i (w . grad trial_j)."""
    lam, wts = quadrature(6)
    geo = _geometry(trial.mesh)
    u_q, _ = _wind_at_quadrature(wind, lam)
    tvals, _ = _scalar_basis(test, lam)
    _, grads = _scalar_basis(trial, lam)
    wgrad = np.einsum("tqc,tqjc->tqj", u_q, grads)
    elem = np.einsum("q,t,qi,tqj->tij", wts, geo["area"], tvals, wgrad)
    if trial.is_vector != test.is_vector:
        raise SpaceMismatchError("CONVECTION trial/test must both be scalar or vector")
    if not trial.is_vector:
        n = trial.num_dofs
        rows, cols = _rows_cols(test.cell_dofs, trial.cell_dofs)
        return _scatter(rows, cols, elem, (test.num_dofs, n))
    return _assemble_scalar_blocks(trial, elem)


def _assemble_convection_shear(space: DofMap, wind: Field) -> sp.csr_matrix:
    """Gradient coupling: rows (c, i), cols (d, j) of n_i n_j dw_c/dx_d."""
    if not space.is_vector:
        raise SpaceMismatchError("CONVECTION_SHEAR needs the vector space")
    lam, wts = quadrature(6)
    geo = _geometry(space.mesh)
    _, grad_w = _wind_at_quadrature(wind, lam)
    vals, _ = _scalar_basis(space, lam)
    elem = np.einsum("q,t,qi,qj,tqcd->tcdij", wts, geo["area"], vals, vals, grad_w)
    ns = space.n_scalar
    n = space.num_dofs
    parts = []
    for c in range(2):
        for d in range(2):
            rows, cols = _rows_cols(space.cell_dofs + c * ns, space.cell_dofs + d * ns)
            parts.append(_scatter(rows, cols, elem[:, c, d], (n, n)))
    out = (parts[0] + parts[1] + parts[2] + parts[3]).tocsr()
    out.eliminate_zeros()
    return out


def _assemble_ad(form: FormKind, space: DofMap, wind: Field, k: float,
                 dt: float, tau: np.ndarray) -> sp.csr_matrix:
    """Stabilized transport operators on the scalar space.

    lhs  = M + S_m + dt * (C + k K + S_a)
    rhs  = M + S_m
    with S_m[i,j] = tau (w . grad n_i) n_j and S_a[i,j] = tau (w.grad n_i)(w.grad n_j);
    the second-derivative stabilization term vanishes identically on linear
    elements and is omitted.
    """
    if space.is_vector:
        raise SpaceMismatchError("AD forms live on a scalar space")
    lam, wts = quadrature(6)
    geo = _geometry(space.mesh)
    area = geo["area"]
    u_q, _ = _wind_at_quadrature(wind, lam)
    vals, grads = _scalar_basis(space, lam)
    tau = np.asarray(tau, dtype=float)
    if tau.shape != (space.mesh.num_triangles,):
        raise SpaceMismatchError("tau must hold one value per triangle")

    wgrad = np.einsum("tqc,tqjc->tqj", u_q, grads)  # (w . grad n_j)
    mass = np.einsum("q,t,qi,qj->tij", wts, area, vals, vals)
    s_mass = np.einsum("q,t,tqi,qj->tij", wts, area * tau, wgrad, vals)
    if form is FormKind.AD_RHS_OP:
        elem = mass + s_mass
    else:
        adv = np.einsum("q,t,qi,tqj->tij", wts, area, vals, wgrad)
        stiff = np.einsum("q,t,tqia,tqja->tij", wts, area, grads, grads)
        s_adv = np.einsum("q,t,tqi,tqj->tij", wts, area * tau, wgrad, wgrad)
        elem = mass + s_mass + dt * (adv + k * stiff + s_adv)
    rows, cols = _rows_cols(space.cell_dofs, space.cell_dofs)
    return _scatter(rows, cols, elem, (space.num_dofs, space.num_dofs))


def convection_residual(space: DofMap, u: Field) -> np.ndarray:
    """Nonlinear convection vector N(u)_i = integral ((u.grad)u) . phi_i."""
    if not space.is_vector:
        raise SpaceMismatchError("convection residual needs the vector space")
    _check_same_mesh(space, u.dofmap)
    lam, wts = quadrature(6)
    geo = _geometry(space.mesh)
    u_q, grad_u = _wind_at_quadrature(u, lam)
    vals, _ = _scalar_basis(space, lam)
    adv = np.einsum("tqd,tqcd->tqc", u_q, grad_u)
    elem = np.einsum("q,t,qi,tqc->tic", wts, geo["area"], vals, adv)
    out = np.zeros(space.num_dofs)
    ns = space.n_scalar
    for comp in range(2):
        np.add.at(out, space.cell_dofs + comp * ns, elem[:, :, comp])
    return out


def convection_row_quadratic(space: DofMap, element: int, local_index: int,
                             component: int) -> np.ndarray:
    """12x12 quadratic form Q with N_row(u) = u_loc^T Q u_loc on one element.

    ``u_loc`` is the local velocity vector in block layout (six x dofs then
    six y dofs); the row is the convection residual entry of the given test
    function (local_index, component) restricted to this element.
    """
    lam, wts = quadrature(6)
    geo = _geometry(space.mesh)
    vals, grads = _scalar_basis(space, lam)
    area = geo["area"][element]
    g = grads[element]  # (nq, 6, 2)
    phi_i = vals[:, local_index]  # (nq,)
    q_mat = np.zeros((12, 12))
    for d in range(2):
        block = np.einsum("q,qa,qb->ab", wts * phi_i * area, vals, g[:, :, d])
        q_mat[d * 6:(d + 1) * 6, component * 6:(component + 1) * 6] = block
    return q_mat


def assemble_load(space: DofMap, fn) -> np.ndarray:
    """Load vector of a callable source: fn(x, y) -> scalar or (fx, fy)."""
    lam, wts = quadrature(6)
    geo = _geometry(space.mesh)
    vals, _ = _scalar_basis(space, lam)
    p0 = space.mesh.vertices[space.mesh.triangles[:, 0]]
    xq = p0[:, None, :] + np.einsum("tab,qb->tqa", geo["jac"], lam[:, 1:])
    out = np.zeros(space.num_dofs)
    f = fn(xq[..., 0], xq[..., 1])
    if space.is_vector:
        ns = space.n_scalar
        for comp in range(2):
            elem = np.einsum("q,t,qi,tq->ti", wts, geo["area"], vals, np.asarray(f[comp]))
            np.add.at(out, space.cell_dofs + comp * ns, elem)
    else:
        elem = np.einsum("q,t,qi,tq->ti", wts, geo["area"], vals, np.asarray(f))
        np.add.at(out, space.cell_dofs, elem)
    return out


def assemble_boundary_traction(space: DofMap, tag: BoundaryTag, fn) -> np.ndarray:
    """Boundary load for a traction callable on a tagged boundary part.

    fn(x, y) -> (tx, ty); integrates t . v over the tagged edges with the
    quadratic trace basis (3-point Gauss per edge).
    """
    if not space.is_vector:
        raise SpaceMismatchError("boundary traction needs the vector space")
    mesh = space.mesh
    nv = mesh.num_vertices
    edge_ids = mesh.edge_index
    s = np.array([0.5 - np.sqrt(15.0) / 10.0, 0.5, 0.5 + np.sqrt(15.0) / 10.0])
    w = np.array([5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0])
    trace = np.column_stack([(1 - s) * (1 - 2 * s), s * (2 * s - 1), 4 * s * (1 - s)])
    out = np.zeros(space.num_dofs)
    ns = space.n_scalar
    rows = mesh.boundary_edges[mesh.boundary_tags == int(tag)]
    for a, b in rows:
        a, b = int(a), int(b)
        pa, pb = mesh.vertices[a], mesh.vertices[b]
        length = float(np.hypot(*(pb - pa)))
        xq = pa[None, :] + s[:, None] * (pb - pa)[None, :]
        tx, ty = fn(xq[:, 0], xq[:, 1])
        eid = nv + edge_ids[(a, b) if a < b else (b, a)]
        dofs = (a, b, eid)
        for comp, tvals in enumerate((np.asarray(tx), np.asarray(ty))):
            for i, dof in enumerate(dofs):
                out[dof + comp * ns] += length * float(np.sum(w * trace[:, i] * tvals))
    return out


# ---------------------------------------------------------------------------
# constraints and the linear solver
# ---------------------------------------------------------------------------

def merge_constraints(*constraint_maps) -> dict[int, float]:
    """Merge (dof, value) collections; later maps override earlier ones."""
    merged: dict[int, float] = {}
    for cmap in constraint_maps:
        items = cmap.items() if isinstance(cmap, dict) else cmap
        for dof, val in items:
            merged[int(dof)] = float(val)
    return merged


def apply_dirichlet(system: sp.spmatrix, rhs: np.ndarray, constraints):
    """Symmetric elimination of Dirichlet constraints.

    Constrained rows become identity rows with the constraint value on the
    right side; constrained columns are eliminated with right-side
    compensation so symmetry is preserved.  ``constraints`` is a dict or an
    iterable of (dof, value); duplicate dofs must agree to 1e-12.
    """
    items = constraints.items() if isinstance(constraints, dict) else list(constraints)
    cmap: dict[int, float] = {}
    for dof, val in items:
        dof = int(dof)
        if dof in cmap and abs(cmap[dof] - val) > 1e-12:
            raise ConstraintConflictError(
                f"dof {dof} constrained to both {cmap[dof]} and {val}")
        cmap[dof] = float(val)
    a = system.tocsr()
    n = a.shape[0]
    b = np.asarray(rhs, dtype=float).copy()
    if not cmap:
        return a, b
    cdofs = np.fromiter(cmap.keys(), dtype=np.int64)
    if cdofs.min() < 0 or cdofs.max() >= n:
        raise IndexError("constraint dof outside system dimension")
    cvals = np.fromiter(cmap.values(), dtype=float)
    g = np.zeros(n)
    g[cdofs] = cvals
    b -= a @ g
    free = np.ones(n)
    free[cdofs] = 0.0
    pf = sp.diags(free)
    a2 = (pf @ a @ pf).tocsr()
    a2 += sp.diags((1.0 - free))
    b[cdofs] = cvals
    out = a2.tocsr()
    out.sum_duplicates()
    return out, b


def solve_sparse(a: sp.spmatrix, b: np.ndarray) -> np.ndarray:
    """Direct sparse LU solve with partial pivoting."""
    a = a.tocsc()
    b = np.asarray(b, dtype=float)
    if a.shape[0] != a.shape[1]:
        raise SingularMatrixError(f"matrix is not square: {a.shape}")
    if a.shape[0] != b.shape[0]:
        raise SingularMatrixError(
            f"dimension mismatch: matrix {a.shape} vs rhs {b.shape}")
    try:
        lu = spla.splu(a)
        x = lu.solve(b)
    except RuntimeError as exc:
        pivot = -1
        msg = str(exc)
        for token in msg.replace("[", " ").replace("]", " ").split():
            if token.isdigit():
                pivot = int(token)
                break
        raise SingularMatrixError(f"sparse factorization failed: {msg}", pivot) from exc
    if not np.isfinite(x).all():
        raise SingularMatrixError("solution contains non-finite values (singular matrix)")
    return x


def factorize(a: sp.spmatrix):
    """LU factorization handle for repeated solves with one matrix."""
    try:
        return spla.splu(a.tocsc())
    except RuntimeError as exc:
        raise SingularMatrixError(f"sparse factorization failed: {exc}") from exc


# ---------------------------------------------------------------------------
# interpolation and evaluation
# ---------------------------------------------------------------------------

def interpolate(space: DofMap, fn) -> Field:
    """Nodal interpolation of fn(x, y) -> scalar or (fx, fy)."""
    coords = space.scalar_dof_coords()
    f = fn(coords[:, 0], coords[:, 1])
    if space.is_vector:
        values = np.concatenate([np.asarray(f[0], dtype=float),
                                 np.asarray(f[1], dtype=float)])
    else:
        values = np.asarray(f, dtype=float)
    return Field(space, values)


def _barycentric(mesh: TriMesh, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Containing triangle and barycentric coordinates for each point."""
    geo = _geometry(mesh)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tri_of = np.full(len(pts), -1, dtype=np.int64)
    lam_of = np.zeros((len(pts), 3))
    inv_jt = geo["inv_jt"]
    p0 = geo["p0"]
    for i, p in enumerate(pts):
        d = p[None, :] - p0
        xi = inv_jt[:, 0, 0] * d[:, 0] + inv_jt[:, 1, 0] * d[:, 1]
        eta = inv_jt[:, 0, 1] * d[:, 0] + inv_jt[:, 1, 1] * d[:, 1]
        lam0 = 1.0 - xi - eta
        tol = -1e-12
        ok = (xi >= tol) & (eta >= tol) & (lam0 >= tol)
        idx = np.nonzero(ok)[0]
        if len(idx) == 0:
            continue
        t = int(idx[0])
        tri_of[i] = t
        lam_of[i] = (lam0[t], xi[t], eta[t])
    return tri_of, lam_of


def evaluate(field: Field, points: np.ndarray) -> np.ndarray:
    """Point evaluation; scalar fields return (n,), vector fields (n, 2).

    Points outside the mesh evaluate to NaN.
    """
    space = field.dofmap
    tri_of, lam = _barycentric(space.mesh, points)
    npts = len(tri_of)
    out = np.full((npts, 2) if space.is_vector else (npts,), np.nan)
    for i in range(npts):
        t = tri_of[i]
        if t < 0:
            continue
        basis = p2_values(lam[i:i + 1])[0] if space.is_quadratic else lam[i]
        dofs = space.cell_dofs[t]
        if space.is_vector:
            out[i, 0] = float(basis @ field.values[dofs])
            out[i, 1] = float(basis @ field.values[dofs + space.n_scalar])
        else:
            out[i] = float(basis @ field.values[dofs])
    return out


def error_l2(field: Field, exact_fn, degree: int = 6) -> float:
    """L2 norm of (field - exact_fn) via element quadrature."""
    space = field.dofmap
    lam, wts = quadrature(degree)
    geo = _geometry(space.mesh)
    vals, _ = _scalar_basis(space, lam)
    p0 = space.mesh.vertices[space.mesh.triangles[:, 0]]
    xq = p0[:, None, :] + np.einsum("tab,qb->tqa", geo["jac"], lam[:, 1:])
    if space.is_vector:
        ux, uy = field.velocity_components()
        uh = np.stack([np.einsum("tl,ql->tq", ux[space.cell_dofs], vals),
                       np.einsum("tl,ql->tq", uy[space.cell_dofs], vals)], axis=-1)
        ex, ey = exact_fn(xq[..., 0], xq[..., 1])
        diff = (uh[..., 0] - ex) ** 2 + (uh[..., 1] - ey) ** 2
    else:
        uh = np.einsum("tl,ql->tq", field.values[space.cell_dofs], vals)
        diff = (uh - np.asarray(exact_fn(xq[..., 0], xq[..., 1]))) ** 2
    return float(np.sqrt(np.einsum("q,t,tq->", wts, geo["area"], diff)))


def norm_l2(field: Field, degree: int = 6) -> float:
    return error_l2(field, (lambda x, y: (0.0 * x, 0.0 * y)) if field.dofmap.is_vector
                    else (lambda x, y: 0.0 * x), degree)
