import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.polynomial import legendre

from fmcrecon.acquisition import default_pulse
from fmcrecon.wavesim import (ElasticOperator, NodalMaterial, ReceiverSpec, Simulation,
                              Snapshots, SolverInstability, SourceTerm, SpectralMesh, TimeParams,
                              absorbing_profile, cfl_limit, default_sponge_strength, derivative_matrix,
                              gll_nodes, point_operator, snapshot_decimation, strip_points)

RHO, VP, VS = 2582.8, 6315.8, 3129.3


def gll_oracle(p):
    """Interior nodes are the roots of P_p'; weights 2 / (p (p+1) P_p(x)^2)."""
    c = np.zeros(p + 1)
    c[p] = 1
    inner = legendre.legroots(legendre.legder(c)) if p > 1 else np.array([])
    x = np.concatenate([[-1.0], np.sort(inner), [1.0]])
    w = 2.0 / (p * (p + 1) * legendre.legval(x, c) ** 2)
    return x, w


class TestGll:
    def test_p1(self):
        x, w = gll_nodes(1)
        assert np.allclose(x, [-1, 1]) and np.allclose(w, [1, 1])

    def test_p2(self):
        x, w = gll_nodes(2)
        assert np.allclose(x, [-1, 0, 1], atol=1e-15)
        assert np.allclose(w, [1 / 3, 4 / 3, 1 / 3])

    def test_p4(self):
        x, _ = gll_nodes(4)
        r = math.sqrt(3 / 7)
        assert np.allclose(x, [-1, -r, 0, r, 1], atol=1e-14)

    def test_p0_rejected(self):
        with pytest.raises(ValueError):
            gll_nodes(0)

    @given(st.integers(1, 12))
    def test_matches_oracle_and_properties(self, p):
        x, w = gll_nodes(p)
        xo, wo = gll_oracle(p)
        assert np.allclose(x, xo, atol=1e-12) and np.allclose(w, wo, atol=1e-12)
        assert np.allclose(x, -x[::-1], atol=1e-14)
        assert np.all(w > 0) and math.isclose(w.sum(), 2.0, rel_tol=1e-13)

    @given(st.integers(1, 8))
    def test_derivative_exact_on_polynomials(self, p):
        x, _ = gll_nodes(p)
        D = derivative_matrix(x)
        assert np.allclose(D @ x ** p, p * x ** (p - 1), atol=1e-10)


class TestMesh:
    def test_node_count_and_mass(self):
        m = SpectralMesh(3e-3, 2e-3, 3, 2, 4)
        assert m.n_nodes == (3 * 4 + 1) * (2 * 4 + 1)
        assert np.all(m.mass_weights > 0)
        assert m.mass_weights.sum() == pytest.approx(6e-6, rel=1e-12)

    def test_shared_nodes(self):
        m = SpectralMesh(2.0, 1.0, 2, 1, 3)
        # right edge of element 0 equals left edge of element 1
        assert np.array_equal(m.idx[0][:, -1], m.idx[1][:, 0])

    def test_interpolation_reproduces_linear_field(self):
        m = SpectralMesh(2.0, 1.0, 3, 2, 4)
        X, Y = m.node_coordinates()
        f = 2 * X - 3 * Y + 1
        pts = np.random.default_rng(1).uniform([0, 0], [2, 1], (50, 2))
        vals = m.interpolation_matrix(pts[:, 0], pts[:, 1]) @ f
        assert np.allclose(vals, 2 * pts[:, 0] - 3 * pts[:, 1] + 1)

    def test_for_wavelength_resolution(self):
        pulse = default_pulse()
        m = SpectralMesh.for_wavelength(67.25e-3, 45e-3, VS, pulse.f_95, 1.5, 4)
        size = VS / pulse.f_95 / 1.5
        assert m.hx <= size and m.hy <= size
        assert m.hx > 0.95 * size


class TestCfl:
    def setup_method(self):
        self.mesh = SpectralMesh(4e-3, 3e-3, 4, 3, 4)

    def test_vp_doubling_halves_limit(self):
        a = cfl_limit(self.mesh, NodalMaterial.homogeneous(self.mesh, RHO, VP, VS))
        b = cfl_limit(self.mesh, NodalMaterial.homogeneous(self.mesh, RHO, 2 * VP, VS))
        assert b == pytest.approx(a / 2, rel=1e-14)

    def test_uniform_density_scaling_leaves_limit(self):
        a = cfl_limit(self.mesh, NodalMaterial.homogeneous(self.mesh, RHO, VP, VS))
        b = cfl_limit(self.mesh, NodalMaterial.homogeneous(self.mesh, 0.1 * RHO, VP, VS))
        assert a == b

    def test_limit_below_measured_stability_edge(self):
        mat = NodalMaterial.homogeneous(self.mesh, RHO, VP, VS)
        lam = ElasticOperator(self.mesh, mat).max_eigenvalue(iters=400)
        # central differences are stable for dt < 2 / sqrt(lambda_max)
        assert cfl_limit(self.mesh, mat) < 2.0 / math.sqrt(lam)

    def test_density_contrast_limit_is_stable(self):
        mesh = self.mesh
        X, Y = mesh.node_coordinates()
        rho = np.where((X - 2e-3) ** 2 + (Y - 1.5e-3) ** 2 < (0.6e-3) ** 2, 0.01 * RHO, RHO)
        mat = NodalMaterial(rho, np.full_like(rho, VP), np.full_like(rho, VS))
        lam = ElasticOperator(mesh, mat).max_eigenvalue(iters=600)
        assert cfl_limit(mesh, mat) < 2.0 / math.sqrt(lam)

    def test_rejects_unstable_dt(self):
        mat = NodalMaterial.homogeneous(self.mesh, RHO, VP, VS)
        dt = 1.5 * cfl_limit(self.mesh, mat)
        with pytest.raises(ValueError, match="stability"):
            Simulation(self.mesh, mat, TimeParams(dt, 10 * dt))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_instability_detected_with_step_index(self):
        mat = NodalMaterial.homogeneous(self.mesh, RHO, VP, VS)
        dt = 3.0 * cfl_limit(self.mesh, mat)
        sim = Simulation(self.mesh, mat, TimeParams(dt, 3000 * dt), check_cfl=False)
        w = np.zeros(3001)
        w[1] = 1.0
        with pytest.raises(SolverInstability) as err:
            sim.run_forward([SourceTerm((2e-3, 0.0), w)], None)
        assert err.value.step > 0


class TestSponge:
    def test_zero_width(self):
        assert not np.any(absorbing_profile(np.linspace(0, 1, 11), 1.0, 0.0, 5.0))

    def test_interior_zero_edges_max(self):
        x = np.linspace(0, 10, 101)
        d = absorbing_profile(x, 10.0, 2.0, 7.0)
        assert np.all(d[(x > 2) & (x < 8)] == 0)
        assert d[0] == 7.0 and d[-1] == 7.0
        assert np.all(np.diff(d[x <= 2]) <= 0)

    def test_overlapping_layers_rejected(self):
        with pytest.raises(ValueError):
            absorbing_profile(np.zeros(3), 1.0, 0.6, 1.0)


def small_sim(damping=False, nex=8, ney=6, p=4, steps=400, courant=0.9):
    mesh = SpectralMesh(8e-3, 6e-3, nex, ney, p)
    mat = NodalMaterial.homogeneous(mesh, RHO, VP, VS)
    dt = courant * cfl_limit(mesh, mat)
    X, _ = mesh.node_coordinates()
    damp = absorbing_profile(X, 8e-3, 2e-3, default_sponge_strength(2e-3, VP)) if damping else None
    return Simulation(mesh, mat, TimeParams(dt, steps * dt), damp)


def pulse_on(sim, scale=0.5):
    return default_pulse(frequency_scale=scale).sampled(sim.time.dt, sim.time.n_samples)


class TestForward:
    def test_zero_source_zero_traces(self):
        sim = small_sim(steps=50)
        out = sim.run_forward([SourceTerm((4e-3, 0.0), np.zeros(51))], ReceiverSpec([(2e-3, 0.0)]))
        assert not np.any(out.traces)

    def test_symmetric_receivers(self):
        sim = small_sim(steps=300)
        w = pulse_on(sim)
        out = sim.run_forward([SourceTerm((4e-3, 0.0), w)], ReceiverSpec([(2.5e-3, 0.0), (5.5e-3, 0.0)]))
        a, b = out.traces
        assert np.linalg.norm(a - b) <= 1e-10 * np.linalg.norm(a)

    def test_reciprocity(self):
        sim = small_sim(damping=True, steps=400)
        w = pulse_on(sim)
        A, B = (2.0e-3, 0.0), (5.3e-3, 0.0)
        ab = sim.run_forward([SourceTerm(A, w)], ReceiverSpec([B])).traces[0]
        ba = sim.run_forward([SourceTerm(B, w)], ReceiverSpec([A])).traces[0]
        assert np.linalg.norm(ab - ba) / np.linalg.norm(ab) < 1e-6

    def test_reciprocity_oblique_directions(self):
        sim = small_sim(steps=300)
        w = pulse_on(sim)
        A, B = (2.2e-3, 1.1e-3), (6.1e-3, 3.7e-3)
        na, nb = (0.6, 0.8), (1.0, 0.0)
        ab = sim.run_forward([SourceTerm(A, w, na)], ReceiverSpec([B], [nb])).traces[0]
        ba = sim.run_forward([SourceTerm(B, w, nb)], ReceiverSpec([A], [na])).traces[0]
        assert np.linalg.norm(ab - ba) / np.linalg.norm(ab) < 1e-6

    def test_linearity_in_sources(self):
        sim = small_sim(steps=200)
        w = pulse_on(sim)
        rec = ReceiverSpec([(4e-3, 0.0)])
        a = sim.run_forward([SourceTerm((2e-3, 0.0), w)], rec).traces
        b = sim.run_forward([SourceTerm((6e-3, 0.0), w)], rec).traces
        ab = sim.run_forward([SourceTerm((2e-3, 0.0), w), SourceTerm((6e-3, 0.0), w)], rec).traces
        assert np.allclose(ab, a + b, rtol=0, atol=1e-12 * np.abs(ab).max())

    def test_energy_conserved_without_sponge(self):
        sim = small_sim(steps=1500)
        w = pulse_on(sim)
        out = sim.run_forward([SourceTerm((4e-3, 0.0), w)], None, store=10)
        snaps = out.snapshots
        t_quiet = 2 * 4.5 * 1.8741e-7 / 0.5
        energies = [sim.op.energy(snaps.u[j] + 0.5 * sim.time.dt * snaps.w[j], snaps.w[j])
                    for j in range(len(snaps) - 1) if snaps.steps[j] * sim.time.dt > t_quiet]
        energies = np.array(energies)
        assert energies.size > 50
        assert (energies.max() - energies.min()) / energies.mean() < 0.01

    def test_sponge_removes_energy(self):
        sim = small_sim(damping=True, steps=1500)
        w = pulse_on(sim)
        out = sim.run_forward([SourceTerm((4e-3, 0.0), w)], None, store=100)
        s = out.snapshots
        e = [sim.op.energy(s.u[j], s.w[j]) for j in range(len(s) - 1)]
        assert e[-1] < 0.2 * max(e)

    def test_deterministic(self):
        sim = small_sim(steps=100)
        w = pulse_on(sim)
        src = [SourceTerm((4e-3, 0.0), w)]
        rec = ReceiverSpec([(3e-3, 0.0)])
        a = sim.run_forward(src, rec).traces
        b = sim.run_forward(src, rec).traces
        assert a.tobytes() == b.tobytes()

    def test_snapshot_count(self):
        sim = small_sim(steps=100)
        out = sim.run_forward([SourceTerm((4e-3, 0.0), pulse_on(sim))], None, store=7)
        assert len(out.snapshots) == 100 // 7 + 1


class TestFiniteWidth:
    def test_zero_width_is_a_point(self):
        mesh = SpectralMesh(8e-3, 6e-3, 8, 6, 4)
        assert np.array_equal(strip_points(3.3e-3, 0.0, mesh), [3.3e-3])
        a = point_operator(mesh, [(3.3e-3, 0.0)], [(0.0, 1.0)])
        b = point_operator(mesh, [(3.3e-3, 0.0)], [(0.0, 1.0)], [0.0])
        assert (a != b).nnz == 0

    @given(st.floats(0.05e-3, 3e-3))
    def test_strip_points_cover_the_strip(self, width):
        mesh = SpectralMesh(8e-3, 6e-3, 8, 6, 4)
        xs = strip_points(4e-3, width, mesh)
        assert xs.size >= 2
        assert np.allclose(xs - 4e-3, -(xs[::-1] - 4e-3), atol=1e-18)
        assert np.all(np.diff(xs) <= 0.5 * mesh.min_node_spacing() + 1e-15)
        assert xs.min() > 4e-3 - width / 2 and xs.max() < 4e-3 + width / 2

    def test_rows_average_and_recover_linear_fields(self):
        mesh = SpectralMesh(8e-3, 6e-3, 8, 6, 4)
        X, Y = mesh.node_coordinates()
        op = point_operator(mesh, [(4e-3, 0.0), (2.2e-3, 1.0e-3)], [(0.0, 1.0), (0.0, 1.0)], [1.2e-3, 0.7e-3])
        u = np.zeros((mesh.n_nodes, 2))
        u[:, 1] = 1.0
        assert np.allclose(op @ u.ravel(), 1.0)
        u[:, 1] = 3 * X.ravel() - Y.ravel()
        assert np.allclose(op @ u.ravel(), [12e-3, 3 * 2.2e-3 - 1e-3], rtol=1e-12)

    def test_reciprocity_with_width(self):
        sim = small_sim(steps=300)
        w = pulse_on(sim)
        A, B = (2.0e-3, 0.0), (5.3e-3, 0.0)
        ab = sim.run_forward([SourceTerm(A, w, width=1.2e-3)], ReceiverSpec([B], widths=1.2e-3)).traces[0]
        ba = sim.run_forward([SourceTerm(B, w, width=1.2e-3)], ReceiverSpec([A], widths=1.2e-3)).traces[0]
        assert np.linalg.norm(ab - ba) / np.linalg.norm(ab) < 1e-6

    def test_negative_width_rejected(self):
        with pytest.raises(ValueError):
            SourceTerm((0.0, 0.0), np.zeros(3), width=-1e-3)
        with pytest.raises(ValueError):
            ReceiverSpec([(0.0, 0.0)], widths=-1.0)


class TestSnapshots:
    def test_round_trip(self, tmp_path):
        sim = small_sim(steps=40)
        out = sim.run_forward([SourceTerm((4e-3, 0.0), pulse_on(sim))], None, store=5)
        s = out.snapshots
        p = tmp_path / "snap.bin"
        s.save(p)
        back = Snapshots.load(p)
        assert back.u.shape == s.u.shape
        assert np.array_equal(back.u, s.u.astype("<f4").astype(float))
        assert back.dt_snap == pytest.approx(s.dt_snap)

    def test_decimation_default(self):
        # 20 snapshots per period
        assert snapshot_decimation(1e-9, 2.5e6) == 20


class TestAdjoint:
    def test_zero_adjoint_source_zero_kernel(self):
        sim = small_sim(steps=80)
        rec = ReceiverSpec([(3e-3, 0.0)])
        fwd = sim.run_forward([SourceTerm((4e-3, 0.0), pulse_on(sim))], rec, checkpoint=True)
        res = sim.run_adjoint(np.zeros((1, 81)), rec, fwd)
        assert not np.any(res.kernel)

    def test_rejects_wrong_length(self):
        sim = small_sim(steps=80)
        rec = ReceiverSpec([(3e-3, 0.0)])
        fwd = sim.run_forward([SourceTerm((4e-3, 0.0), pulse_on(sim))], rec, checkpoint=True)
        with pytest.raises(ValueError, match="shape"):
            sim.run_adjoint(np.zeros((1, 80)), rec, fwd)

    def test_requires_checkpoints(self):
        sim = small_sim(steps=20)
        rec = ReceiverSpec([(3e-3, 0.0)])
        fwd = sim.run_forward([SourceTerm((4e-3, 0.0), pulse_on(sim))], rec)
        with pytest.raises(ValueError, match="checkpoint"):
            sim.run_adjoint(np.zeros((1, 21)), rec, fwd)

    def test_discrete_adjoint_identity(self):
        """sum_k c_k g_k d_k == -dt sum_n f_n (P_A u_adj^n) for the stored backward field."""
        sim = small_sim(damping=True, nex=4, ney=3, p=3, steps=150)
        N = sim.time.n_steps
        rng = np.random.default_rng(7)
        f = rng.standard_normal(N + 1)
        g = rng.standard_normal(N + 1)
        A, B = (2.1e-3, 0.0), (5.9e-3, 2.6e-3)
        recB = ReceiverSpec([B], [(0.6, 0.8)])
        fwd = sim.run_forward([SourceTerm(A, f)], recB, checkpoint=True)
        lhs = np.sum(sim.time.trapezoid_weights() * g * fwd.traces[0])
        adj = sim.run_adjoint(g[None, :], recB, fwd, store=1)
        PA = point_operator(sim.mesh, [A], [(0.0, 1.0)])
        pa = np.array([PA @ adj.snapshots.u[n].ravel() for n in range(N + 1)])[:, 0]
        rhs = -sim.time.dt * np.dot(f, pa)
        assert abs(lhs - rhs) <= 1e-6 * abs(lhs)

    def test_kernel_matches_finite_difference(self):
        """Nodal density gradient m_hat * K against central differences of the misfit."""
        sim = small_sim(damping=True, nex=4, ney=3, p=3, steps=200, courant=0.5)
        mesh = sim.mesh
        rec = ReceiverSpec([(2e-3, 0.0), (6e-3, 0.0)])
        src = [SourceTerm((4e-3, 0.0), pulse_on(sim))]
        X, Y = mesh.node_coordinates()
        bump = np.exp(-((X - 4e-3) ** 2 + (Y - 3e-3) ** 2) / (1e-3) ** 2)
        rho_obs = RHO * (1 - 0.3 * bump)
        obs_sim = Simulation(mesh, sim.material.with_density(rho_obs), sim.time, sim.op.damping)
        obs = obs_sim.run_forward(src, rec).traces
        c = sim.time.trapezoid_weights()

        def chi(rho):
            s = Simulation(mesh, sim.material.with_density(rho), sim.time, sim.op.damping)
            return 0.5 * np.sum(c * (s.run_forward(src, rec).traces - obs) ** 2)

        fwd = sim.run_forward(src, rec, checkpoint=True)
        grad = sim.run_adjoint(fwd.traces - obs, rec, fwd).kernel * mesh.mass_weights
        direction = np.random.default_rng(3).standard_normal(mesh.n_nodes)
        h = 1e-3 * RHO
        fd = (chi(RHO + h * direction) - chi(RHO - h * direction)) / (2 * h)
        assert np.dot(grad, direction) == pytest.approx(fd, rel=1e-5)
