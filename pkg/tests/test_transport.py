"""Contaminant transport: stabilization, stepping, conservation, accuracy."""

import math

import numpy as np
import pytest

from urbanplume import fem, transport as tr
from urbanplume.errors import InstabilityError, PlumePlacementError
from urbanplume.fem import Field, FormKind, SpaceKind
from urbanplume.geo import DomainSpec
from urbanplume.mesh import structured_rectangle_mesh, tag_boundaries
from urbanplume.wind import WindField


def square_setup(size=20.0, n=30):
    domain = DomainSpec(bounds=(0.0, 0.0, size, size), wind_direction=(0.0, 1.0),
                        inflow_edge="bottom", outflow_edge="top",
                        noslip_edges=("left", "right"), characteristic_length=size)
    mesh = tag_boundaries(structured_rectangle_mesh(domain.bounds, n, n), domain)
    p1 = fem.build_space(mesh, SpaceKind.SCALAR_P1)
    v2 = fem.build_space(mesh, SpaceKind.VELOCITY_P2_VECTOR)
    pr = fem.build_space(mesh, SpaceKind.PRESSURE_P1)
    return domain, mesh, p1, v2, pr


def uniform_wind(mesh, v2, pr, ux, uy):
    velocity = fem.interpolate(v2, lambda x, y: (np.full_like(x, ux), np.full_like(y, uy)))
    return WindField(velocity=velocity, pressure=Field(pr, np.zeros(pr.num_dofs)),
                     mu=1.0, newton_iterations=0)


@pytest.fixture(scope="module")
def still_air():
    domain, mesh, p1, v2, pr = square_setup()
    return mesh, p1, uniform_wind(mesh, v2, pr, 0.0, 0.0)


class TestInitialPlume:
    def test_invariants(self):
        with pytest.raises(ValueError):
            tr.InitialPlume(center=(0, 0), amplitude=0.0, radius=2.0, width=1.0)
        with pytest.raises(ValueError):
            tr.InitialPlume(center=(0, 0), amplitude=1.0, radius=0.5, width=1.0)

    def test_peak_value(self, still_air):
        mesh, p1, _ = still_air
        plume = tr.InitialPlume(center=(10.0, 10.0), amplitude=1e4, radius=6.0, width=2.0)
        c0 = tr.gaussian_initial(mesh, p1, plume)
        assert c0.field.values.max() == pytest.approx(1e4)

    def test_truncation_beyond_radius(self, still_air):
        mesh, p1, _ = still_air
        plume = tr.InitialPlume(center=(10.0, 10.0), amplitude=1e4, radius=3.0, width=1.0)
        c0 = tr.gaussian_initial(mesh, p1, plume)
        r = np.hypot(mesh.vertices[:, 0] - 10.0, mesh.vertices[:, 1] - 10.0)
        assert np.abs(c0.field.values[r >= 3.0 + 1.0]).max() == 0.0

    def test_center_outside_domain_rejected(self, still_air):
        mesh, p1, _ = still_air
        plume = tr.InitialPlume(center=(50.0, 50.0), amplitude=1.0, radius=2.0, width=1.0)
        with pytest.raises(PlumePlacementError):
            tr.gaussian_initial(mesh, p1, plume)

    def test_center_inside_building_rejected(self, urban_mesh):
        p1 = fem.build_space(urban_mesh, SpaceKind.SCALAR_P1)
        plume = tr.InitialPlume(center=(-4.0, 0.0), amplitude=1.0, radius=2.0, width=1.0)
        with pytest.raises(PlumePlacementError):
            tr.gaussian_initial(urban_mesh, p1, plume)


class TestSupgTau:
    TRI = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

    def test_transient_limit(self):
        assert tr.supg_tau(self.TRI, [0.0, 0.0], k=0.0, dt=2.0) == pytest.approx(1.0)

    def test_advective_limit(self):
        tau = tr.supg_tau(self.TRI, [1e6, 0.0], k=0.0, dt=1e9)
        h = 1.0  # diameter along the x direction
        assert tau / (h / (2.0 * 1e6)) == pytest.approx(1.0, rel=1e-6)

    def test_diffusive_limit(self):
        tau = tr.supg_tau(self.TRI, [0.0, 0.0], k=0.5, dt=math.inf)
        h = math.sqrt(2.0)  # circumdiameter of the unit right triangle
        assert tau == pytest.approx(h * h / (4.0 * 0.5), rel=1e-12)


class TestAssembleAdSystem:
    def test_still_air_reduces_to_mass_plus_diffusion(self, still_air):
        mesh, p1, wind = still_air
        params = tr.AdParams(k=0.3, dt=0.1, t_final=0.1)
        lhs, rhs_op = tr.assemble_ad_system(mesh, p1, wind, params)
        m = fem.assemble(FormKind.MASS, p1)
        k_mat = fem.assemble(FormKind.VISCOUS, p1, nu=1.0)  # scalar stiffness
        expected = (m + params.dt * params.k * k_mat).tocsr()
        assert np.abs((lhs - expected).toarray()).max() < 1e-14
        assert np.abs((rhs_op - m).toarray()).max() < 1e-14

    def test_no_physics_step_is_identity(self, still_air):
        mesh, p1, wind = still_air
        params = tr.AdParams(k=0.0, dt=0.1, t_final=0.1)
        lhs, rhs_op = tr.assemble_ad_system(mesh, p1, wind, params)
        rng = np.random.default_rng(0)
        c = tr.ConcentrationField(Field(p1, rng.standard_normal(p1.num_dofs)), 0.0)
        c1 = tr.step(c, lhs, rhs_op, {}, params.dt)
        assert np.abs(c1.field.values - c.field.values).max() < 1e-10

    def test_supg_vanishes_with_zero_tau(self):
        """tau = 0 reproduces an unstabilized Galerkin assembly bit-exactly."""
        domain, mesh, p1, v2, pr = square_setup(n=10)
        wind = uniform_wind(mesh, v2, pr, 0.7, -0.3)
        k, dt = 0.2, 0.05
        zero_tau = np.zeros(mesh.num_triangles)
        lhs = fem.assemble(FormKind.AD_LHS, p1, wind=wind.velocity, k=k, dt=dt,
                           tau=zero_tau)
        rhs_op = fem.assemble(FormKind.AD_RHS_OP, p1, wind=wind.velocity, k=k, dt=dt,
                              tau=zero_tau)
        # direct Galerkin oracle: element tensors without any stabilization code,
        # at the same quadrature degree, scattered the same way
        lam, wts = fem.quadrature(6)
        geo = fem._geometry(mesh)
        vals, grads = fem._scalar_basis(p1, lam)
        u_q, _ = fem._wind_at_quadrature(wind.velocity, lam)
        wgrad = np.einsum("tqc,tqjc->tqj", u_q, grads)
        mass = np.einsum("q,t,qi,qj->tij", wts, geo["area"], vals, vals)
        adv = np.einsum("q,t,qi,tqj->tij", wts, geo["area"], vals, wgrad)
        stiff = np.einsum("q,t,tqia,tqja->tij", wts, geo["area"], grads, grads)
        rows, cols = fem._rows_cols(p1.cell_dofs, p1.cell_dofs)
        shape = (p1.num_dofs, p1.num_dofs)
        galerkin = fem._scatter(rows, cols, mass + dt * (adv + k * stiff), shape)
        mass_only = fem._scatter(rows, cols, mass, shape)
        assert np.abs((lhs - galerkin).toarray()).max() == 0.0
        assert np.abs((rhs_op - mass_only).toarray()).max() == 0.0

    def test_mesh_mismatch_rejected(self, still_air):
        mesh, p1, wind = still_air
        _, other_mesh, other_p1, _, _ = square_setup(n=4)
        with pytest.raises(fem.SpaceMismatchError):
            tr.assemble_ad_system(other_mesh, other_p1, wind,
                                  tr.AdParams(k=0.1, dt=0.1, t_final=0.1))


class TestStep:
    def test_zero_field_stays_zero(self, still_air):
        mesh, p1, wind = still_air
        params = tr.AdParams(k=0.2, dt=0.1, t_final=0.1)
        lhs, rhs_op = tr.assemble_ad_system(mesh, p1, wind, params)
        c = tr.ConcentrationField(Field(p1, np.zeros(p1.num_dofs)), 0.0)
        c1 = tr.step(c, lhs, rhs_op, {}, params.dt)
        assert np.abs(c1.field.values).max() == 0.0
        assert c1.time == pytest.approx(0.1)

    def test_constant_is_fixed_point(self):
        domain, mesh, p1, v2, pr = square_setup(n=12)
        wind = uniform_wind(mesh, v2, pr, 0.9, 0.4)
        params = tr.AdParams(k=0.0, dt=0.1, t_final=0.1)
        lhs, rhs_op = tr.assemble_ad_system(mesh, p1, wind, params)
        c = tr.ConcentrationField(Field(p1, np.ones(p1.num_dofs)), 0.0)
        c1 = tr.step(c, lhs, rhs_op, {}, params.dt)
        assert np.abs(c1.field.values - 1.0).max() <= 1e-10

    def test_diffusion_variance_growth(self, still_air):
        """Second moment grows by 2 k dt per step while boundaries are idle."""
        mesh, p1, wind = still_air
        params = tr.AdParams(k=0.1, dt=0.05, t_final=0.5)
        plume = tr.InitialPlume(center=(10.0, 10.0), amplitude=100.0, radius=6.0, width=1.5)
        c = tr.gaussian_initial(mesh, p1, plume)
        lhs, rhs_op = tr.assemble_ad_system(mesh, p1, wind, params)
        stepper = tr.TransportStepper(lhs, rhs_op, {}, params.dt)
        weights = fem.assemble(FormKind.MASS, p1) @ np.ones(p1.num_dofs)
        x = mesh.vertices[:, 0]

        def x_variance(vals):
            mass = weights @ vals
            mean = (weights * x) @ vals / mass
            return (weights * (x - mean) ** 2) @ vals / mass

        growths = []
        for _ in range(10):
            before = x_variance(c.field.values)
            c = stepper.step(c)
            growths.append(x_variance(c.field.values) - before)
        expected = 2.0 * params.k * params.dt
        assert np.mean(growths) == pytest.approx(expected, rel=0.05)

    def test_implicit_euler_unconditional_stability(self, still_air):
        """Pure diffusion: the max never grows, for dt spanning 4 decades."""
        mesh, p1, wind = still_air
        plume = tr.InitialPlume(center=(10.0, 10.0), amplitude=1.0, radius=5.0, width=1.5)
        c0 = tr.gaussian_initial(mesh, p1, plume)
        for dt in (1e-3, 1e-2, 1e-1, 1e0, 1e1):
            params = tr.AdParams(k=0.5, dt=dt, t_final=dt)
            lhs, rhs_op = tr.assemble_ad_system(mesh, p1, wind, params)
            c1 = tr.step(c0, lhs, rhs_op, {}, dt)
            assert c1.field.values.max() <= c0.field.values.max() * (1.0 + 1e-12), \
                f"max grew for dt={dt}"


class TestRunTransient:
    def test_step_bookkeeping(self, still_air):
        mesh, p1, wind = still_air
        plume = tr.InitialPlume(center=(10.0, 10.0), amplitude=10.0, radius=4.0, width=1.0)
        c0 = tr.gaussian_initial(mesh, p1, plume)
        params = tr.AdParams(k=0.05, dt=0.05, t_final=5.0)
        result = tr.run_transient(c0, wind, params, save_interval=10)
        assert len(result.records) == 100
        assert len(result.saved) == 11  # t = 0 included
        times = [r.time for r in result.records]
        assert all(b > a for a, b in zip(times, times[1:]))

    def test_mass_conservation_zero_velocity(self, still_air):
        mesh, p1, wind = still_air
        plume = tr.InitialPlume(center=(10.0, 10.0), amplitude=100.0, radius=5.0, width=1.5)
        c0 = tr.gaussian_initial(mesh, p1, plume)
        params = tr.AdParams(k=0.2, dt=0.02, t_final=2.0)
        result = tr.run_transient(c0, wind, params)
        m0 = tr.total_mass(c0)
        masses = np.array([r.mass for r in result.records])
        drift = np.abs(np.diff(np.concatenate([[m0], masses]))) / m0
        assert drift.max() <= 1e-9

    def test_probe_traces(self, still_air):
        mesh, p1, wind = still_air
        plume = tr.InitialPlume(center=(10.0, 10.0), amplitude=10.0, radius=4.0, width=1.0)
        c0 = tr.gaussian_initial(mesh, p1, plume)
        params = tr.AdParams(k=0.1, dt=0.1, t_final=1.0)
        result = tr.run_transient(c0, wind, params, probes=[(10.0, 10.0), (1.0, 1.0)])
        assert result.probe_traces.shape == (10, 2)
        assert result.probe_traces[:, 0].max() > result.probe_traces[:, 1].max()

    def test_probe_outside_rejected(self, still_air):
        mesh, p1, wind = still_air
        plume = tr.InitialPlume(center=(10.0, 10.0), amplitude=10.0, radius=4.0, width=1.0)
        c0 = tr.gaussian_initial(mesh, p1, plume)
        with pytest.raises(PlumePlacementError):
            tr.run_transient(c0, wind, tr.AdParams(k=0.1, dt=0.1, t_final=0.2),
                             probes=[(99.0, 99.0)])

    def test_instability_detected(self, still_air):
        mesh, p1, wind = still_air
        values = np.zeros(p1.num_dofs)
        values[0] = np.nan
        c0 = tr.ConcentrationField(Field(p1, values), 0.0)
        with pytest.raises(InstabilityError) as err:
            tr.run_transient(c0, wind, tr.AdParams(k=0.1, dt=0.1, t_final=0.5))
        assert err.value.step == 1

    def test_advection_phase_speed(self):
        """Center of mass of a pulse travels at the wind speed within 2%."""
        domain, mesh, p1, v2, pr = square_setup(size=20.0, n=30)
        wind = uniform_wind(mesh, v2, pr, 0.0, 1.0)
        plume = tr.InitialPlume(center=(10.0, 5.0), amplitude=1e4, radius=4.0, width=1.0)
        c0 = tr.gaussian_initial(mesh, p1, plume)
        params = tr.AdParams(k=1e-4, dt=0.1, t_final=5.0)
        lhs, rhs_op = tr.assemble_ad_system(mesh, p1, wind, params)
        stepper = tr.TransportStepper(lhs, rhs_op, {}, params.dt)
        weights = fem.assemble(FormKind.MASS, p1) @ np.ones(p1.num_dofs)
        y = mesh.vertices[:, 1]

        def center(vals):
            return (weights * y) @ vals / (weights @ vals)

        c = c0
        for _ in range(50):
            c = stepper.step(c)
        displacement = center(c.field.values) - center(c0.field.values)
        assert displacement == pytest.approx(5.0, rel=0.02)

    def test_dt_convergence_first_order(self, still_air):
        """Halving dt halves the time-stepping error of a smooth problem."""
        mesh, p1, wind = still_air
        plume = tr.InitialPlume(center=(10.0, 10.0), amplitude=1.0, radius=6.0, width=2.0)
        c0 = tr.gaussian_initial(mesh, p1, plume)
        t_final = 1.0

        def solve_with(dt):
            params = tr.AdParams(k=0.5, dt=dt, t_final=t_final)
            lhs, rhs_op = tr.assemble_ad_system(mesh, p1, wind, params)
            stepper = tr.TransportStepper(lhs, rhs_op, {}, dt)
            c = c0
            for _ in range(round(t_final / dt)):
                c = stepper.step(c)
            return c.field.values

        reference = solve_with(t_final / 64)
        err_coarse = np.linalg.norm(solve_with(t_final / 4) - reference)
        err_fine = np.linalg.norm(solve_with(t_final / 8) - reference)
        rate = np.log2(err_coarse / err_fine)
        assert rate == pytest.approx(1.0, abs=0.2), f"observed dt order {rate:.2f}"


class TestStagnation:
    def test_concentration_stagnates_in_low_circulation_zones(
            self, urban_mesh, urban_spaces, urban_lifting):
        """Late-time concentration persists where the air barely moves.

        Qualitative check: a release between the buildings leaves the sheltered
        low-velocity pocket far above the level of the well-ventilated flow.
        """
        from urbanplume import wind as uw
        wf = uw.solve_steady_ins(urban_mesh, urban_spaces, urban_lifting,
                                 uw.InsParams(nu=2.0, mu=2.0))
        scalar = fem.build_space(urban_mesh, SpaceKind.SCALAR_P1)
        plume = tr.InitialPlume(center=(0.5, -0.5), amplitude=1e4, radius=2.0, width=0.8)
        c0 = tr.gaussian_initial(urban_mesh, scalar, plume)
        params = tr.AdParams(k=0.05, dt=0.05, t_final=8.0, dirichlet_value=0.0)
        result = tr.run_transient(c0, wf, params, save_interval=160)
        final = result.saved[-1].field.values
        assert result.saved[-1].time == pytest.approx(8.0)

        ux, uy = wf.velocity.velocity_components()
        nv = urban_mesh.num_vertices
        speeds = np.hypot(ux[:nv], uy[:nv])  # vertex dofs lead the block layout
        slow = speeds <= np.percentile(speeds, 20)  # walls and sheltered pockets
        fast = speeds > np.percentile(speeds, 70)
        threshold = 1.0  # ppm, "potentially critical" level for the fixture
        stagnant_peak = float(final[slow].max())
        ventilated_peak = float(final[fast].max())
        assert stagnant_peak > threshold, \
            f"low-circulation peak {stagnant_peak:.2f} ppm fell below threshold"
        assert stagnant_peak > 5.0 * ventilated_peak, \
            (f"no stagnation contrast: slow-zone {stagnant_peak:.2f} ppm vs "
             f"ventilated {ventilated_peak:.2f} ppm")


class TestSuggestDt:
    def test_courant_bound(self):
        domain, mesh, p1, v2, pr = square_setup(size=10.0, n=10)
        wind = uniform_wind(mesh, v2, pr, 2.0, 0.0)
        dt = tr.suggest_dt(mesh, wind, courant=2.0)
        assert dt > 0.0
        # the defining property: max element Courant number equals the bound
        from urbanplume.mesh import circumradii
        h = 2.0 * circumradii(mesh)
        assert (2.0 * dt / h).max() == pytest.approx(2.0, rel=1e-9)
