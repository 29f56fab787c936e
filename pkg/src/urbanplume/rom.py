"""Reduced-order modelling of the parametrized steady wind solve.

Offline: full-order solves over a sweep of the inflow factor, POD of the
homogenized velocity snapshots via the snapshot correlation matrix, and
empirical interpolation (DEIM) of the convection nonlinearity with greedy
index selection.  Online: a dense Newton iteration on the projected system
whose cost is independent of the full-order dof count; the convective term
enters through precomputed quadratic tensors in the reduced coordinates, so
evaluating it never touches full-order vectors.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import fem
from .errors import (
    DeimSingularError,
    NonconvergenceError,
    RankDeficiencyError,
    RomArtifactError,
    SingularMatrixError,
    SnapshotError,
)
from .fem import DofMap, FormKind
from .mesh import TriMesh
from .wind import InsParams, LiftingFunction, WindField, solve_steady_ins

ARTIFACT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ParameterSampler:
    """Equispaced parameter sweep over [mu_min, mu_max]."""

    mu_min: float
    mu_max: float
    count: int

    def samples(self) -> np.ndarray:
        if self.count < 1:
            raise ValueError("sampler needs at least one sample")
        if self.count == 1:
            return np.array([0.5 * (self.mu_min + self.mu_max)])
        return np.linspace(self.mu_min, self.mu_max, self.count)

    def midpoint_samples(self, count: int) -> np.ndarray:
        """Midpoints of this grid's intervals: always disjoint from training."""
        train = self.samples()
        mids = 0.5 * (train[:-1] + train[1:])
        if count >= len(mids):
            return mids
        idx = np.unique(np.round(np.linspace(0, len(mids) - 1, count)).astype(int))
        return mids[idx]


@dataclass
class FomContext:
    """Everything needed to run full-order solves during the offline phase."""

    mesh: TriMesh
    v_space: DofMap
    p_space: DofMap
    lifting: LiftingFunction
    nu: float
    base_inflow_speed: float = 1.0
    newton_tol: float = 1e-10
    newton_max_iter: int = 25

    def solve(self, mu: float) -> WindField:
        params = InsParams(nu=self.nu, mu=float(mu),
                           base_inflow_speed=self.base_inflow_speed,
                           newton_tol=self.newton_tol,
                           newton_max_iter=self.newton_max_iter)
        return solve_steady_ins(self.mesh, (self.v_space, self.p_space),
                                self.lifting, params)

    def velocity_mass_matrix(self):
        cached = self.__dict__.get("_mass")
        if cached is None:
            cached = fem.assemble(FormKind.MASS, self.v_space)
            self.__dict__["_mass"] = cached
        return cached

    def homogenize(self, wind: WindField) -> np.ndarray:
        return wind.velocity.values - wind.mu * self.lifting.velocity.values

    def nonlinearity(self, wind: WindField) -> np.ndarray:
        return fem.convection_residual(self.v_space, wind.velocity)


@dataclass
class SnapshotSet:
    """Homogenized velocity and convection snapshots over the mu samples."""

    mus: np.ndarray
    velocity: np.ndarray       # (ndof, n_samples)
    nonlinearity: np.ndarray   # (ndof, n_samples)
    failures: list[tuple[float, str]] = field(default_factory=list)


@dataclass
class ReducedBasis:
    """POD velocity modes with the correlation-matrix eigenvalue spectrum."""

    modes: np.ndarray          # (ndof, n_r), orthonormal in the chosen product
    eigenvalues: np.ndarray    # full non-increasing list, clipped at zero
    n_r: int

    @property
    def normalized_eigenvalues(self) -> np.ndarray:
        lam1 = self.eigenvalues[0] if len(self.eigenvalues) else 1.0
        return self.eigenvalues / lam1 if lam1 > 0 else self.eigenvalues


@dataclass
class DeimData:
    """Nonlinearity basis, interpolation indices, and the sampled factor."""

    basis: np.ndarray          # (ndof, n_m)
    indices: np.ndarray        # (n_m,) distinct dof indices
    sampled: np.ndarray        # basis[indices, :]
    lu: tuple                  # lu_factor of sampled

    def reconstruct(self, values: np.ndarray) -> np.ndarray:
        """Interpolate a full vector from its values at the DEIM indices."""
        coeff = sla.lu_solve(self.lu, np.asarray(values)[self.indices])
        return self.basis @ coeff


@dataclass
class RomOperators:
    """Projected operators; all online work happens in these dense arrays.

    The reduced residual at inflow factor mu is
        r(q) = a_hat q + mu*a_lift + mu^2*alpha + mu*beta q + gamma : (q x q)
    with gamma the quadratic convection tensor folded through the DEIM
    interpolant.
    """

    n_r: int
    n_m: int
    a_hat: np.ndarray          # (n_r, n_r) projected viscous block
    a_lift: np.ndarray         # (n_r,) viscous action of the unit lifting
    alpha: np.ndarray          # (n_r,) mu^2 convection term
    beta: np.ndarray           # (n_r, n_r) mu-linear convection block
    gamma: np.ndarray          # (n_r, n_r, n_r) quadratic convection tensor
    basis: np.ndarray          # (ndof, n_r) for reconstruction
    lifting_values: np.ndarray
    mu_range: tuple[float, float]
    training_mus: np.ndarray
    eigenvalues: np.ndarray
    deim_indices: np.ndarray
    mesh_hash: str = ""

    def truncate(self, n_r: int) -> "RomOperators":
        """Leading-subblock operators for a smaller basis (modes are nested)."""
        if n_r > self.n_r:
            raise ValueError(f"cannot truncate to {n_r} > {self.n_r}")
        r = n_r
        return RomOperators(
            n_r=r, n_m=self.n_m,
            a_hat=self.a_hat[:r, :r], a_lift=self.a_lift[:r],
            alpha=self.alpha[:r], beta=self.beta[:r, :r],
            gamma=self.gamma[:r, :r, :r],
            basis=self.basis[:, :r], lifting_values=self.lifting_values,
            mu_range=self.mu_range, training_mus=self.training_mus,
            eigenvalues=self.eigenvalues, deim_indices=self.deim_indices,
            mesh_hash=self.mesh_hash)


@dataclass
class RomSolution:
    mu: float
    u_hat: np.ndarray
    ops: RomOperators
    iterations: int
    residual_history: list[float]

    def velocity_values(self) -> np.ndarray:
        """Full-order reconstruction mu*u_lift + V u_hat (lazy, on demand)."""
        return self.mu * self.ops.lifting_values + self.ops.basis @ self.u_hat


# ---------------------------------------------------------------------------
# offline phase
# ---------------------------------------------------------------------------

def collect_snapshots(sampler: ParameterSampler, fom: FomContext) -> SnapshotSet:
    """Run the FOM over the sweep, storing homogenized velocity and convection.

    Failed solves are recorded and skipped; fewer than two successes abort.
    Duplicate parameter values are dropped with a warning.
    """
    mus = np.unique(sampler.samples())
    if len(mus) < len(sampler.samples()):
        warnings.warn("duplicate parameter samples were deduplicated", stacklevel=2)
    vel_cols, non_cols, kept, failures = [], [], [], []
    for mu in mus:
        try:
            wind = fom.solve(float(mu))
        except (NonconvergenceError, SingularMatrixError) as exc:
            failures.append((float(mu), str(exc)))
            continue
        vel_cols.append(fom.homogenize(wind))
        non_cols.append(fom.nonlinearity(wind))
        kept.append(float(mu))
    if len(kept) < 2:
        raise SnapshotError(
            f"only {len(kept)} snapshot(s) succeeded out of {len(mus)}; "
            f"failures: {failures}")
    return SnapshotSet(mus=np.array(kept),
                       velocity=np.column_stack(vel_cols),
                       nonlinearity=np.column_stack(non_cols),
                       failures=failures)


def _fix_signs(modes: np.ndarray) -> np.ndarray:
    """Deterministic sign convention: largest-magnitude entry positive."""
    for k in range(modes.shape[1]):
        idx = int(np.argmax(np.abs(modes[:, k])))
        if modes[idx, k] < 0:
            modes[:, k] = -modes[:, k]
    return modes


def pod(snapshots: SnapshotSet, n_r: int, mass_matrix=None) -> ReducedBasis:
    """Method of snapshots: eigendecomposition of the correlation matrix.

    ``mass_matrix`` selects the L2 (mass-weighted) inner product; None falls
    back to the Euclidean one.  Modes come out orthonormal in that product.
    """
    s = snapshots.velocity
    n_s = s.shape[1]
    if n_r > n_s:
        raise RankDeficiencyError(f"requested {n_r} modes from {n_s} snapshots")
    ms = mass_matrix @ s if mass_matrix is not None else s
    corr = s.T @ ms
    corr = 0.5 * (corr + corr.T)
    lam, vecs = np.linalg.eigh(corr)
    order = np.argsort(lam)[::-1]
    lam = lam[order]
    vecs = vecs[:, order]
    if lam[0] <= 0.0:
        raise RankDeficiencyError("snapshot correlation matrix has no positive eigenvalue")
    if lam[n_r - 1] < 1e-14 * lam[0]:
        rank = int(np.sum(lam > 1e-14 * lam[0]))
        raise RankDeficiencyError(
            f"eigenvalue {n_r} is below 1e-14 of the leading one; "
            f"numerical rank is ~{rank}, request fewer modes")
    modes = s @ (vecs[:, :n_r] / np.sqrt(lam[:n_r]))
    # near rank deficiency the snapshot combination loses orthogonality;
    # a Cholesky pass restores it without mixing later modes into earlier ones
    gram = modes.T @ (mass_matrix @ modes if mass_matrix is not None else modes)
    chol = np.linalg.cholesky(0.5 * (gram + gram.T))
    modes = sla.solve_triangular(chol, modes.T, lower=True).T
    return ReducedBasis(modes=_fix_signs(modes),
                        eigenvalues=np.clip(lam, 0.0, None),
                        n_r=n_r)


def deim(nonlinearity_snapshots: np.ndarray, n_m: int) -> DeimData:
    """Empirical interpolation of the nonlinearity snapshots.

    POD (Euclidean) of the snapshot columns gives the basis; the greedy pass
    picks each interpolation index at the largest residual between a mode
    and its interpolation on the indices selected so far.
    """
    f = np.asarray(nonlinearity_snapshots, dtype=float)
    if n_m > f.shape[1]:
        raise RankDeficiencyError(f"requested {n_m} DEIM modes from {f.shape[1]} snapshots")
    u_svd, svals, _ = np.linalg.svd(f, full_matrices=False)
    if svals[min(n_m, len(svals)) - 1] < 1e-14 * svals[0]:
        rank = int(np.sum(svals > 1e-14 * svals[0]))
        raise RankDeficiencyError(
            f"nonlinearity snapshots have numerical rank ~{rank} < {n_m}")
    basis = _fix_signs(u_svd[:, :n_m].copy())

    indices = [int(np.argmax(np.abs(basis[:, 0])))]
    for k in range(1, n_m):
        sub = basis[np.array(indices), :k]
        try:
            coeff = np.linalg.solve(sub, basis[np.array(indices), k])
        except np.linalg.LinAlgError as exc:
            raise DeimSingularError(f"sampled sub-matrix singular at mode {k}") from exc
        residual = basis[:, k] - basis[:, :k] @ coeff
        indices.append(int(np.argmax(np.abs(residual))))
    idx = np.array(indices, dtype=np.int64)
    if len(np.unique(idx)) != n_m:
        raise DeimSingularError("duplicate DEIM interpolation indices")
    sampled = basis[idx, :]
    try:
        lu = sla.lu_factor(sampled)
    except (ValueError, sla.LinAlgError) as exc:
        raise DeimSingularError(f"sampled sub-matrix is singular: {exc}") from exc
    if not np.isfinite(lu[0]).all() or np.abs(np.diag(lu[0])).min() < 1e-300:
        raise DeimSingularError("sampled sub-matrix is numerically singular")
    return DeimData(basis=basis, indices=idx, sampled=sampled, lu=lu)


def _deim_row_structures(v_space: DofMap, dof: int):
    """Element support of one velocity dof: (element, local index, component)."""
    ns = v_space.n_scalar
    comp = int(dof) // ns
    scalar = int(dof) % ns
    rows, locs = np.nonzero(v_space.cell_dofs == scalar)
    return comp, list(zip(rows.tolist(), locs.tolist()))


def project_operators(fom: FomContext, basis: ReducedBasis, deim_data: DeimData,
                      viscous_matrix=None) -> RomOperators:
    """Precompute every mu-affine reduced operator for the online phase.

    The convective term is expanded around u = mu*u_lift + V q: sampling it
    at the DEIM indices needs only element-local quadratic forms, which are
    folded here into constant/linear/quadratic tensors in (mu, q).
    """
    v = basis.modes
    n_r = basis.n_r
    n_m = len(deim_data.indices)
    u_l = fom.lifting.velocity.values
    a = viscous_matrix if viscous_matrix is not None else fem.assemble(
        FormKind.VISCOUS, fom.v_space, nu=fom.nu)
    a_hat = v.T @ (a @ v)
    a_lift = v.T @ (a @ u_l)

    # W = V^T U (P^T U)^{-1}: projection through the interpolant
    w = sla.lu_solve(deim_data.lu, (v.T @ deim_data.basis).T, trans=1).T

    alpha_rows = np.zeros(n_m)
    beta_rows = np.zeros((n_m, n_r))
    gamma_rows = np.zeros((n_m, n_r, n_r))
    cell_dofs = fom.v_space.cell_dofs
    ns = fom.v_space.n_scalar
    for m, dof in enumerate(deim_data.indices):
        comp, support = _deim_row_structures(fom.v_space, int(dof))
        for (elem, loc) in support:
            q_mat = fem.convection_row_quadratic(fom.v_space, elem, loc, comp)
            gdofs = np.concatenate([cell_dofs[elem], cell_dofs[elem] + ns])
            ul_loc = u_l[gdofs]
            v_loc = v[gdofs, :]
            alpha_rows[m] += ul_loc @ q_mat @ ul_loc
            beta_rows[m] += ul_loc @ (q_mat + q_mat.T) @ v_loc
            gamma_rows[m] += v_loc.T @ q_mat @ v_loc
    return RomOperators(
        n_r=n_r, n_m=n_m,
        a_hat=a_hat, a_lift=a_lift,
        alpha=w @ alpha_rows,
        beta=w @ beta_rows,
        gamma=np.einsum("rm,mij->rij", w, gamma_rows),
        basis=v,
        lifting_values=u_l.copy(),
        mu_range=(0.0, 0.0),  # filled in by build_rom from the snapshot sweep
        training_mus=np.array([]),
        eigenvalues=basis.eigenvalues.copy(),
        deim_indices=deim_data.indices.copy(),
        mesh_hash=fom.mesh.content_hash(),
    )


def build_rom(fom: FomContext, snapshots: SnapshotSet, n_r: int, n_m: int,
              inner_product: str = "mass") -> tuple[RomOperators, ReducedBasis, DeimData]:
    """POD + DEIM + projection in one go; records the training range."""
    mass = fom.velocity_mass_matrix() if inner_product == "mass" else None
    basis = pod(snapshots, n_r, mass_matrix=mass)
    deim_data = deim(snapshots.nonlinearity, n_m)
    ops = project_operators(fom, basis, deim_data)
    ops.mu_range = (float(snapshots.mus.min()), float(snapshots.mus.max()))
    ops.training_mus = snapshots.mus.copy()
    return ops, basis, deim_data


# ---------------------------------------------------------------------------
# online phase
# ---------------------------------------------------------------------------

def _reduced_residual(ops: RomOperators, mu: float, q: np.ndarray) -> np.ndarray:
    return (ops.a_hat @ q + mu * ops.a_lift + mu * mu * ops.alpha
            + mu * (ops.beta @ q) + np.einsum("rij,i,j->r", ops.gamma, q, q))


def _reduced_jacobian(ops: RomOperators, mu: float, q: np.ndarray) -> np.ndarray:
    return (ops.a_hat + mu * ops.beta
            + np.einsum("rij,i->rj", ops.gamma, q)
            + np.einsum("rij,j->ri", ops.gamma, q))


def solve_rom(mu: float, ops: RomOperators, *, newton_tol: float = 1e-11,
              max_iter: int = 50) -> RomSolution:
    """Dense reduced Newton solve at one inflow factor."""
    lo, hi = ops.mu_range
    if hi > lo:
        margin = 0.1 * (hi - lo)
        if mu < lo - margin or mu > hi + margin:
            warnings.warn(
                f"mu={mu} extrapolates beyond the sampled range [{lo}, {hi}]",
                stacklevel=2)
    q = np.zeros(ops.n_r)
    r = _reduced_residual(ops, mu, q)
    r0 = float(np.linalg.norm(r))
    if r0 == 0.0:
        return RomSolution(mu=mu, u_hat=q, ops=ops, iterations=0, residual_history=[0.0])
    history = [1.0]
    for it in range(1, max_iter + 1):
        try:
            delta = np.linalg.solve(_reduced_jacobian(ops, mu, q), -r)
        except np.linalg.LinAlgError as exc:
            raise NonconvergenceError(f"reduced Jacobian singular: {exc}", history) from exc
        alpha = 1.0
        rnorm_old = float(np.linalg.norm(r))
        for _ in range(5):
            q_new = q + alpha * delta
            r_new = _reduced_residual(ops, mu, q_new)
            if float(np.linalg.norm(r_new)) <= rnorm_old:
                break
            alpha *= 0.5
        q, r = q_new, r_new
        rel = float(np.linalg.norm(r)) / r0
        history.append(rel)
        if rel <= newton_tol:
            return RomSolution(mu=mu, u_hat=q, ops=ops, iterations=it,
                               residual_history=history)
    raise NonconvergenceError(
        f"reduced Newton did not reach {newton_tol} in {max_iter} iterations", history)


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

@dataclass
class RomBenchmark:
    mus: np.ndarray
    errors: np.ndarray         # relative velocity error at the full n_r
    t_fom: np.ndarray
    t_rom: np.ndarray
    speedups: np.ndarray
    n_r_grid: np.ndarray
    max_error_per_nr: np.ndarray
    min_speedup_per_nr: np.ndarray
    mean_speedup_per_nr: np.ndarray
    max_speedup_per_nr: np.ndarray
    eigenvalues: np.ndarray
    excluded: list[tuple[float, str]] = field(default_factory=list)


def _median_time(fn, reps: int):
    times = []
    result = None
    for _ in range(reps):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return result, float(np.median(times))


def benchmark(test_mus: np.ndarray, fom: FomContext, ops: RomOperators, *,
              n_r_grid=None, timing_reps: int = 5) -> RomBenchmark:
    """Error and speedup of the ROM against fresh FOM solves on a test set.

    The error is the mass-weighted relative L2 velocity error at the full
    reduced dimension; the error/speedup curves sweep nested truncations of
    the basis.  FOM failures exclude the sample and are reported.
    """
    test_mus = np.asarray(test_mus, dtype=float)
    if np.isin(test_mus, ops.training_mus).any():
        raise ValueError("test samples must be disjoint from the training set")
    if n_r_grid is None:
        n_r_grid = np.unique(np.clip(np.arange(2, ops.n_r + 1, 2), 2, ops.n_r))
    n_r_grid = np.asarray(sorted(set(int(r) for r in n_r_grid)))
    mass = fom.velocity_mass_matrix()

    def m_norm(vec):
        return float(np.sqrt(abs(vec @ (mass @ vec))))

    kept, errors, t_fom, t_rom, excluded = [], [], [], [], []
    fom_vals = []
    for mu in test_mus:
        try:
            wind, tf = _median_time(lambda m=mu: fom.solve(float(m)), timing_reps)
        except NonconvergenceError as exc:
            excluded.append((float(mu), str(exc)))
            continue
        sol, tr = _median_time(lambda m=mu: solve_rom(float(m), ops), timing_reps)
        err = m_norm(sol.velocity_values() - wind.velocity.values) / m_norm(wind.velocity.values)
        kept.append(float(mu))
        errors.append(err)
        t_fom.append(tf)
        t_rom.append(tr)
        fom_vals.append(wind.velocity.values)

    max_err_nr, min_sp_nr, mean_sp_nr, max_sp_nr = [], [], [], []
    for r in n_r_grid:
        sub = ops.truncate(int(r))
        errs_r, sps_r = [], []
        for mu, uf, tf in zip(kept, fom_vals, t_fom):
            sol, tr = _median_time(lambda m=mu, s=sub: solve_rom(float(m), s), timing_reps)
            errs_r.append(m_norm(sol.velocity_values() - uf) / m_norm(uf))
            sps_r.append(tf / tr if tr > 0 else np.inf)
        max_err_nr.append(max(errs_r))
        min_sp_nr.append(min(sps_r))
        mean_sp_nr.append(float(np.mean(sps_r)))
        max_sp_nr.append(max(sps_r))

    t_fom = np.array(t_fom)
    t_rom = np.array(t_rom)
    return RomBenchmark(
        mus=np.array(kept), errors=np.array(errors),
        t_fom=t_fom, t_rom=t_rom,
        speedups=t_fom / np.where(t_rom > 0, t_rom, np.inf),
        n_r_grid=n_r_grid,
        max_error_per_nr=np.array(max_err_nr),
        min_speedup_per_nr=np.array(min_sp_nr),
        mean_speedup_per_nr=np.array(mean_sp_nr),
        max_speedup_per_nr=np.array(max_sp_nr),
        eigenvalues=ops.eigenvalues.copy(),
        excluded=excluded,
    )


# ---------------------------------------------------------------------------
# artifact persistence
# ---------------------------------------------------------------------------

def save_rom_artifacts(path, ops: RomOperators, deim_data: DeimData | None = None) -> None:
    """Versioned binary container with header metadata and all payloads."""
    payload = dict(
        format_version=np.array([ARTIFACT_FORMAT_VERSION]),
        n_r=np.array([ops.n_r]),
        n_m=np.array([ops.n_m]),
        dof_count=np.array([len(ops.lifting_values)]),
        mesh_hash=np.frombuffer(ops.mesh_hash.encode(), dtype=np.uint8),
        a_hat=ops.a_hat, a_lift=ops.a_lift,
        alpha=ops.alpha, beta=ops.beta, gamma=ops.gamma,
        basis=ops.basis, lifting_values=ops.lifting_values,
        mu_range=np.array(ops.mu_range),
        training_mus=ops.training_mus,
        eigenvalues=ops.eigenvalues,
        deim_indices=ops.deim_indices,
    )
    if deim_data is not None:
        payload["deim_basis"] = deim_data.basis
    np.savez(path, **payload)


def load_rom_artifacts(path) -> RomOperators:
    try:
        with np.load(path) as data:
            version = int(data["format_version"][0])
            if version != ARTIFACT_FORMAT_VERSION:
                raise RomArtifactError(
                    f"artifact format {version} unsupported "
                    f"(expected {ARTIFACT_FORMAT_VERSION})")
            return RomOperators(
                n_r=int(data["n_r"][0]), n_m=int(data["n_m"][0]),
                a_hat=data["a_hat"], a_lift=data["a_lift"],
                alpha=data["alpha"], beta=data["beta"], gamma=data["gamma"],
                basis=data["basis"], lifting_values=data["lifting_values"],
                mu_range=(float(data["mu_range"][0]), float(data["mu_range"][1])),
                training_mus=data["training_mus"],
                eigenvalues=data["eigenvalues"],
                deim_indices=data["deim_indices"],
                mesh_hash=bytes(data["mesh_hash"]).decode(),
            )
    except OSError as exc:
        raise RomArtifactError(f"cannot read ROM artifact: {exc}") from exc


def load_rom_deim(path) -> DeimData:
    """Rebuild the DEIM interpolant from an artifact container."""
    try:
        with np.load(path) as data:
            if "deim_basis" not in data:
                raise RomArtifactError("artifact carries no DEIM basis payload")
            basis = data["deim_basis"]
            indices = data["deim_indices"]
    except OSError as exc:
        raise RomArtifactError(f"cannot read ROM artifact: {exc}") from exc
    sampled = basis[indices, :]
    return DeimData(basis=basis, indices=indices, sampled=sampled,
                    lu=sla.lu_factor(sampled))
