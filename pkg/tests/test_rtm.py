import json

import numpy as np
import pytest

from fmcrecon.model import RasterGrid
from fmcrecon.rtm import (AdjointSourceSet, build_adjoint_sources, finalize_rtm, project, rtm_classic,
                          rtm_density_kernel, stack_shots)
from fmcrecon.tfm import ImageGrid
from fmcrecon.wavesim import ReceiverSpec, Snapshots, SpectralMesh


def snaps(u, w=None, dt=1.0, decimation=1):
    u = np.asarray(u, float)
    w = np.zeros_like(u) if w is None else np.asarray(w, float)
    return Snapshots(u, w, np.arange(len(u)) * decimation, dt, decimation, (1, u.shape[1]))


class TestAdjointSources:
    def test_residual(self):
        rec = ReceiverSpec([(0.0, 0.0), (1.0, 0.0)])
        sim = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
        obs = np.array([[1.0, 1.0, 1.0], [1.0, 0.0, -1.0]])
        src = build_adjoint_sources(sim, obs, rec, 0.1)
        assert np.array_equal(src.series, [[0, 1, 2], [-1, 0, 1]])

    def test_window_enters_squared(self):
        rec = ReceiverSpec([(0.0, 0.0)])
        w = np.array([0.0, 0.5, 1.0])
        src = build_adjoint_sources(np.ones((1, 3)), np.zeros((1, 3)), rec, 1.0, w)
        assert np.allclose(src.series, [[0.0, 0.25, 1.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            build_adjoint_sources(np.zeros((1, 3)), np.zeros((1, 4)), ReceiverSpec([(0.0, 0.0)]), 1.0)

    def test_receiver_count_checked(self):
        with pytest.raises(ValueError):
            AdjointSourceSet(np.zeros((2, 3)), ReceiverSpec([(0.0, 0.0)]), 1.0)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            AdjointSourceSet(np.array([[np.nan]]), ReceiverSpec([(0.0, 0.0)]), 1.0)


class TestClassic:
    def test_hand_trapezoid(self):
        # one node, three snapshots: trapezoid of [1*2, 3*1, 0*5] with step 0.5
        fwd = snaps(np.array([[[1.0, 0.0]], [[3.0, 0.0]], [[0.0, 4.0]]]), dt=0.5)
        bwd = snaps(np.array([[[2.0, 7.0]], [[1.0, 0.0]], [[5.0, 0.0]]]), dt=0.5)
        assert rtm_classic(fwd, bwd) == pytest.approx([0.5 * (2 / 2 + 3 + 0 / 2)])

    def test_mismatched_pair(self):
        a = snaps(np.zeros((3, 2, 2)))
        b = snaps(np.zeros((4, 2, 2)))
        with pytest.raises(ValueError, match="share"):
            rtm_classic(a, b)


class TestDensityKernel:
    def test_rigid_motion_has_only_velocity_term(self):
        mesh = SpectralMesh(2e-3, 1e-3, 2, 1, 2)
        n = mesh.n_nodes
        vp, vs = np.full(n, 6000.0), np.full(n, 3000.0)
        # uniform translations: zero strain everywhere
        u = np.zeros((3, n, 2))
        u[:, :, 0] = np.array([0.0, 1.0, 2.0])[:, None]
        w = np.zeros((3, n, 2))
        w[:2, :, 0] = 1.0
        ua = np.zeros((3, n, 2))
        ua[:, :, 0] = 5.0
        wa = np.zeros((3, n, 2))
        wa[:2, :, 0] = -2.0
        fwd = Snapshots(u, w, np.arange(3), 0.1, 1, (0, 0))
        bwd = Snapshots(ua, wa, np.arange(3), 0.1, 1, (0, 0))
        k = rtm_density_kernel(fwd, bwd, mesh, vp, vs)
        # -sum dt * w . wa over the two moving snapshots = -2 * 0.1 * (1 * -2)
        assert np.allclose(k, 0.4, atol=1e-12)

    def test_linear_in_backward_field(self):
        mesh = SpectralMesh(2e-3, 2e-3, 2, 2, 3)
        rng = np.random.default_rng(0)
        n = mesh.n_nodes
        vp, vs = np.full(n, 6000.0), np.full(n, 3000.0)
        fwd = Snapshots(rng.standard_normal((4, n, 2)), rng.standard_normal((4, n, 2)), np.arange(4), 1e-8, 1, (0, 0))
        b1 = Snapshots(rng.standard_normal((4, n, 2)), rng.standard_normal((4, n, 2)), np.arange(4), 1e-8, 1, (0, 0))
        b2 = Snapshots(rng.standard_normal((4, n, 2)), rng.standard_normal((4, n, 2)), np.arange(4), 1e-8, 1, (0, 0))
        bsum = Snapshots(b1.u + 2 * b2.u, b1.w + 2 * b2.w, np.arange(4), 1e-8, 1, (0, 0))
        k1 = rtm_density_kernel(fwd, b1, mesh, vp, vs)
        k2 = rtm_density_kernel(fwd, b2, mesh, vp, vs)
        ks = rtm_density_kernel(fwd, bsum, mesh, vp, vs)
        assert np.allclose(ks, k1 + 2 * k2, rtol=1e-10, atol=1e-10 * np.abs(ks).max())


class TestProjection:
    def test_constant_field(self):
        mesh = SpectralMesh(4e-3, 2e-3, 4, 2, 4)
        grid = RasterGrid(17, 9, 0.2e-3, 0.2e-3, 0.1e-3)
        img = project(mesh, np.full(mesh.n_nodes, 3.25), grid)
        assert np.allclose(img.values, 3.25)

    def test_linear_field_is_exact(self):
        mesh = SpectralMesh(4e-3, 2e-3, 4, 2, 4)
        X, Y = mesh.node_coordinates()
        grid = RasterGrid(17, 9, 0.2e-3, 0.2e-3, 0.1e-3)
        img = project(mesh, 2 * X - Y, grid)
        xc, yc = grid.centers()
        assert np.allclose(img.values, 2 * xc - yc, atol=1e-15)


class TestFinalize:
    def test_impulse_peak(self):
        grid = RasterGrid(61, 61, 1.0)
        vals = np.zeros(grid.shape)
        vals[30, 30] = 1.0
        out = finalize_rtm([ImageGrid(grid, vals)], sigma=3.0).image.values
        assert out[30, 30] == pytest.approx(1 / (2 * np.pi * 9), rel=1e-3)
        assert out.sum() == pytest.approx(1.0, rel=1e-12)

    def test_mass_preserved_with_mirror_edges(self):
        grid = RasterGrid(20, 12, 1.0)
        vals = np.random.default_rng(3).random(grid.shape)
        out = finalize_rtm([ImageGrid(grid, vals)], sigma=2.0).image.values
        assert out.sum() == pytest.approx(vals.sum(), rel=1e-12)

    def test_shots_sum_before_absolute_value(self):
        grid = RasterGrid(5, 5, 1.0)
        a = np.ones(grid.shape)
        out = finalize_rtm([ImageGrid(grid, a), ImageGrid(grid, -a)], sigma=0.0)
        assert not np.any(out.image.values)
        assert out.shots == 2

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            finalize_rtm([ImageGrid(RasterGrid(2, 2, 1.0), np.zeros((2, 2)))], sigma=-1)

    def test_stack_checks_grids(self):
        with pytest.raises(ValueError):
            stack_shots([])
        with pytest.raises(ValueError, match="different grids"):
            stack_shots([ImageGrid(RasterGrid(2, 2, 1.0), np.zeros((2, 2))),
                         ImageGrid(RasterGrid(2, 2, 2.0), np.zeros((2, 2)))])

    def test_save_writes_meta(self, tmp_path):
        out = finalize_rtm([ImageGrid(RasterGrid(3, 2, 1.0), np.ones((2, 3)))], sigma=1.0, kernel="classic")
        out.save(tmp_path / "r.img")
        meta = json.loads((tmp_path / "r.img.meta.json").read_text())
        assert meta == {"kernel": "classic", "sigma": 1.0, "shots": 1}
        assert ImageGrid.load(tmp_path / "r.img").values.shape == (2, 3)
