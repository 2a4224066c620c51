"""Reverse time migration with the classic and the density-sensitivity imaging conditions."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .model import RasterGrid
from .tfm import ImageGrid
from .wavesim import ElasticOperator, NodalMaterial, ReceiverSpec, Snapshots, SpectralMesh


@dataclass(eq=False)
class AdjointSourceSet:
    """Per-receiver residual series injected along the receiver directions."""

    series: np.ndarray
    receivers: ReceiverSpec
    dt: float

    def __post_init__(self):
        self.series = np.asarray(self.series, float)
        if self.series.ndim != 2 or self.series.shape[0] != len(self.receivers):
            raise ValueError("one adjoint series per receiver required")
        if not np.all(np.isfinite(self.series)):
            raise ValueError("adjoint sources must be finite")


def build_adjoint_sources(sim: np.ndarray, obs: np.ndarray, receivers: ReceiverSpec, dt: float,
                          window: np.ndarray | None = None) -> AdjointSourceSet:
    """Residual ``sim - obs``; with a time window ``w`` the series is ``w * (w*sim - w*obs)``."""
    sim = np.asarray(sim, float)
    obs = np.asarray(obs, float)
    if sim.shape != obs.shape:
        raise ValueError(f"shape mismatch: sim {sim.shape} vs obs {obs.shape}")
    res = sim - obs
    if window is not None:
        res = res * np.asarray(window) ** 2
    return AdjointSourceSet(res, receivers, dt)


def _check_pair(fwd: Snapshots, bwd: Snapshots):
    if fwd.u.shape != bwd.u.shape or not np.array_equal(fwd.steps, bwd.steps) or fwd.dt != bwd.dt:
        raise ValueError("forward and backward snapshots do not share grid and times")


def rtm_classic(fwd: Snapshots, bwd: Snapshots) -> np.ndarray:
    """Zero-lag correlation ``int u . u_adj dt`` (trapezoid over snapshots), nodal."""
    _check_pair(fwd, bwd)
    w = np.full(len(fwd), fwd.dt_snap)
    w[0] *= 0.5
    w[-1] *= 0.5
    return np.einsum("s,snc,snc->n", w, fwd.u, bwd.u)


def rtm_density_kernel(fwd: Snapshots, bwd: Snapshots, mesh: SpectralMesh, vp: np.ndarray,
                       vs: np.ndarray, damping: np.ndarray | None = None) -> np.ndarray:
    """Density sensitivity ``int -v . v_adj + eps(u) : C~ : eps(u_adj) dt`` at mesh nodes.

    ``C~`` is the stiffness per unit density built from the local ``vp``, ``vs``. Velocities are
    the stored forward differences; the sponge contributes ``eta * u_adj . v`` where damping is
    active. Every snapshot gets weight ``dt_snap``; this equals the trapezoid rule because the
    integrand vanishes at both ends (rest at t=0, zero end condition of the adjoint field).
    """
    _check_pair(fwd, bwd)
    op = ElasticOperator(mesh, NodalMaterial(np.ones(mesh.n_nodes), vp, vs))
    eta = None if damping is None or not np.any(damping) else np.asarray(damping)[:, None]
    vel = np.zeros(mesh.n_nodes)
    strain = np.zeros(mesh.idx.shape)
    dts = fwd.dt_snap
    for j in range(len(fwd)):
        u, w = fwd.u[j], fwd.w[j]
        ua, wa = bwd.u[j], bwd.w[j]
        term = -(w * wa).sum(axis=1)
        if eta is not None:
            term += (eta * (ua + 0.5 * fwd.dt * wa) * w).sum(axis=1)
        vel += dts * term
        strain += dts * op.strain_energy_density_product(u, ua)
    return vel + mesh.assemble(strain) / mesh.mass_weights


def project(mesh: SpectralMesh, nodal: np.ndarray, grid: RasterGrid) -> ImageGrid:
    """Spectral-element interpolation of a nodal field onto pixel centers."""
    return ImageGrid(grid, (mesh.grid_interpolation(grid) @ nodal).reshape(grid.shape))


@dataclass(eq=False)
class RtmImage:
    image: ImageGrid
    kernel: str
    sigma: float
    shots: int

    def save(self, path: str | Path) -> None:
        path = Path(path)
        self.image.save(path)
        meta = {"kernel": self.kernel, "sigma": self.sigma, "shots": self.shots}
        path.with_suffix(path.suffix + ".meta.json").write_text(json.dumps(meta, indent=2))


def stack_shots(images: Sequence[ImageGrid]) -> ImageGrid:
    if not images:
        raise ValueError("no shot images")
    grid = images[0].grid
    if any(im.grid != grid for im in images):
        raise ValueError("shot images live on different grids")
    total = np.zeros(grid.shape)
    for im in images:
        total += im.values
    return ImageGrid(grid, total)


def finalize_rtm(images: Sequence[ImageGrid], sigma: float = 3.0, kernel: str = "density") -> RtmImage:
    """Sum shots, take the absolute value, blur with a Gaussian of ``sigma`` pixels.

    The blur is truncated at 4 sigma with mirror padding at the edges.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    total = stack_shots(images)
    vals = np.abs(total.values)
    if sigma > 0:
        vals = gaussian_filter(vals, sigma, mode="reflect", truncate=4.0)
    return RtmImage(ImageGrid(total.grid, vals, {"method": "rtm", "kernel": kernel}),
                    kernel, sigma, len(images))
