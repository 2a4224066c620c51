"""2D isotropic elastic spectral-element solver.

Structured quadrilateral mesh, Lagrange basis on Gauss-Lobatto-Legendre (GLL) points,
lumped (diagonal) mass, second-order central differences in time. Top and bottom are
traction free; optional sponge layers damp the left and right sides.

Displacement fields are arrays of shape ``(n_nodes, 2)``; ``y`` is depth (down).

The adjoint run is the exact discrete adjoint of the time stepping, so density
kernels accumulated here are exact gradients of the sampled trapezoidal L2 misfit.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from numpy.polynomial import legendre

from .model import MaterialModel, RasterGrid

log = logging.getLogger(__name__)

# dt_edge / min(node spacing / vp): lowest value over aspect ratios and vp/vs from 1.4 to 6
# (tests/test_wavesim.py re-measures it with an eigensolver)
_STABILITY_EDGE = {1: 0.82, 2: 0.65, 3: 0.63, 4: 0.62, 5: 0.61, 6: 0.61, 7: 0.61, 8: 0.61}
COURANT_SAFETY = 0.7


class SolverInstability(RuntimeError):
    def __init__(self, step: int, msg: str = ""):
        super().__init__(msg or f"non-finite wavefield at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# 1D GLL machinery

def gll_nodes(p: int) -> tuple[np.ndarray, np.ndarray]:
    """GLL nodes on [-1, 1] and their quadrature weights for degree ``p``."""
    if p < 1:
        raise ValueError(f"polynomial degree must be >= 1, got {p}")
    Pp = legendre.Legendre.basis(p)
    interior = np.sort(Pp.deriv().roots().real) if p > 1 else np.empty(0)
    x = np.concatenate([[-1.0], interior, [1.0]])
    # symmetrize round-off
    x = 0.5 * (x - x[::-1])
    w = 2.0 / (p * (p + 1) * Pp(x) ** 2)
    return x, w


def _barycentric_weights(x: np.ndarray) -> np.ndarray:
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    return 1.0 / diff.prod(axis=1)


def lagrange_basis(nodes: np.ndarray, x) -> np.ndarray:
    """Values of all Lagrange polynomials on ``nodes`` at points ``x``; shape ``(len(x), len(nodes))``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.ones((x.size, nodes.size))
    for j in range(nodes.size):
        for m in range(nodes.size):
            if m != j:
                out[:, j] *= (x - nodes[m]) / (nodes[j] - nodes[m])
    return out


def derivative_matrix(nodes: np.ndarray) -> np.ndarray:
    """``D[i, j] = l_j'(x_i)``."""
    c = _barycentric_weights(nodes)
    n = nodes.size
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                D[i, j] = c[j] / (c[i] * (nodes[i] - nodes[j]))
        D[i, i] = -D[i].sum()
    return D


# ---------------------------------------------------------------------------
# mesh

@dataclass(eq=False)
class SpectralMesh:
    """Structured ``nex x ney`` quad mesh of ``[0, width] x [0, height]`` with degree ``p``."""

    width: float
    height: float
    nex: int
    ney: int
    p: int = 4

    def __post_init__(self):
        if self.nex < 1 or self.ney < 1:
            raise ValueError("mesh needs at least one element per direction")
        self.xi, self.wq = gll_nodes(self.p)
        self.D = derivative_matrix(self.xi)
        self.hx = self.width / self.nex
        self.hy = self.height / self.ney
        P = self.p + 1
        self.nx_nodes = self.nex * self.p + 1
        self.ny_nodes = self.ney * self.p + 1
        self.n_nodes = self.nx_nodes * self.ny_nodes
        ex = np.arange(self.nex)
        ey = np.arange(self.ney)
        ix = ex[None, :, None, None] * self.p + np.arange(P)[None, None, None, :]
        iy = ey[:, None, None, None] * self.p + np.arange(P)[None, None, :, None]
        # element e = ey * nex + ex, local (b, a) = (y, x)
        self.idx = (iy * self.nx_nodes + ix).reshape(self.nex * self.ney, P, P)
        self.idx_flat = self.idx.ravel()
        self.jacobian = 0.25 * self.hx * self.hy
        self.w2 = np.outer(self.wq, self.wq)
        self.mass_weights = self.assemble(np.broadcast_to(self.w2 * self.jacobian, self.idx.shape))
        self.x_nodes = np.concatenate([e * self.hx + 0.5 * (self.xi[:-1] + 1) * self.hx
                                       for e in range(self.nex)] + [[self.width]])
        self.y_nodes = np.concatenate([e * self.hy + 0.5 * (self.xi[:-1] + 1) * self.hy
                                       for e in range(self.ney)] + [[self.height]])

    @classmethod
    def for_domain(cls, width: float, height: float, element_size: float, p: int = 4) -> "SpectralMesh":
        return cls(width, height, max(1, math.ceil(width / element_size - 1e-9)),
                   max(1, math.ceil(height / element_size - 1e-9)), p)

    @classmethod
    def for_wavelength(cls, width: float, height: float, vs: float, f95: float,
                       elements_per_wavelength: float = 1.5, p: int = 4) -> "SpectralMesh":
        """Mesh resolving the shear wavelength at ``f95`` with the given element count."""
        return cls.for_domain(width, height, vs / f95 / elements_per_wavelength, p)

    @property
    def n_elements(self) -> int:
        return self.nex * self.ney

    def refined(self, factor: int = 2) -> "SpectralMesh":
        return SpectralMesh(self.width, self.height, self.nex * factor, self.ney * factor, self.p)

    def node_coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        X, Y = np.meshgrid(self.x_nodes, self.y_nodes)
        return X.ravel(), Y.ravel()

    def min_node_spacing(self) -> float:
        return float(min(self.hx, self.hy) * 0.5 * (self.xi[1] - self.xi[0]))

    def assemble(self, local: np.ndarray) -> np.ndarray:
        """Sum element-local values ``(n_el, P, P)`` into global nodes (fixed order)."""
        return np.bincount(self.idx_flat, weights=np.ascontiguousarray(local).ravel(),
                           minlength=self.n_nodes)

    def locate(self, x: float, y: float) -> tuple[int, float, float]:
        """Element index and reference coordinates of a point."""
        if not (-1e-12 <= x <= self.width + 1e-12 and -1e-12 <= y <= self.height + 1e-12):
            raise ValueError(f"point ({x}, {y}) outside the mesh")
        ex = min(int(x / self.hx), self.nex - 1)
        ey = min(int(y / self.hy), self.ney - 1)
        xi = 2.0 * (x - ex * self.hx) / self.hx - 1.0
        eta = 2.0 * (y - ey * self.hy) / self.hy - 1.0
        return ey * self.nex + ex, float(np.clip(xi, -1, 1)), float(np.clip(eta, -1, 1))

    def point_weights(self, x: float, y: float, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
        """Global node indices and Lagrange weights interpolating a nodal field at ``(x, y)``."""
        e, xi, eta = self.locate(x, y)
        lx = lagrange_basis(self.xi, xi)[0]
        ly = lagrange_basis(self.xi, eta)[0]
        w = np.outer(ly, lx)
        nodes = self.idx[e]
        keep = np.abs(w) > tol
        return nodes[keep], w[keep]

    def interpolation_matrix(self, xs, ys) -> sp.csr_matrix:
        """Sparse ``(n_points, n_nodes)`` Lagrange interpolation operator."""
        xs = np.asarray(xs, float).ravel()
        ys = np.asarray(ys, float).ravel()
        P = self.p + 1
        ex = np.minimum((xs / self.hx).astype(int), self.nex - 1)
        ey = np.minimum((ys / self.hy).astype(int), self.ney - 1)
        xi = np.clip(2.0 * (xs - ex * self.hx) / self.hx - 1.0, -1, 1)
        eta = np.clip(2.0 * (ys - ey * self.hy) / self.hy - 1.0, -1, 1)
        lx = lagrange_basis(self.xi, xi)
        ly = lagrange_basis(self.xi, eta)
        w = ly[:, :, None] * lx[:, None, :]
        nodes = self.idx[ey * self.nex + ex]
        rows = np.repeat(np.arange(xs.size), P * P)
        return sp.csr_matrix((w.ravel(), (rows, nodes.reshape(xs.size, -1).ravel())),
                             shape=(xs.size, self.n_nodes))

    def grid_interpolation(self, grid: RasterGrid) -> sp.csr_matrix:
        xc, yc = grid.centers()
        return self.interpolation_matrix(xc, yc)


# ---------------------------------------------------------------------------
# material on mesh nodes

@dataclass(eq=False)
class NodalMaterial:
    rho: np.ndarray
    vp: np.ndarray
    vs: np.ndarray

    def __post_init__(self):
        self.rho = np.asarray(self.rho, float)
        self.vp = np.asarray(self.vp, float)
        self.vs = np.asarray(self.vs, float)
        if not (self.rho.shape == self.vp.shape == self.vs.shape):
            raise ValueError("nodal material arrays differ in shape")
        if not (np.all(self.rho > 0) and np.all(self.vp > 0) and np.all(self.vs >= 0)):
            raise ValueError("nodal material must be positive")

    @classmethod
    def homogeneous(cls, mesh: SpectralMesh, rho: float, vp: float, vs: float) -> "NodalMaterial":
        n = mesh.n_nodes
        return cls(np.full(n, rho), np.full(n, vp), np.full(n, vs))

    def with_density(self, rho: np.ndarray) -> "NodalMaterial":
        return NodalMaterial(rho, self.vp, self.vs)


def sample_material(mesh: SpectralMesh, model: MaterialModel) -> NodalMaterial:
    """Nearest-pixel sampling of a raster material at GLL node positions."""
    X, Y = mesh.node_coordinates()
    return NodalMaterial(*model.sample(X, Y))


def absorbing_profile(x, domain_width: float, layer_width: float, strength: float) -> np.ndarray:
    """Quadratic sponge damping (1/s): zero in the interior, ``strength`` at the side edges."""
    x = np.asarray(x, float)
    if layer_width <= 0 or strength == 0:
        return np.zeros_like(x)
    if 2 * layer_width > domain_width:
        raise ValueError("sponge layers overlap: layer_width exceeds half the domain width")
    d = np.minimum(x, domain_width - x)
    ramp = np.clip((layer_width - d) / layer_width, 0.0, 1.0)
    return strength * ramp ** 2


def default_sponge_strength(layer_width: float, vp: float, amplitude_decay: float = 1e-2) -> float:
    """Edge damping so a p-wave crossing the layer twice decays by ``amplitude_decay``."""
    if layer_width <= 0:
        return 0.0
    # amplitude ~ exp(-0.5 * int eta dt) per pass; quadratic ramp integrates to L/3
    return 3.0 * vp * math.log(1.0 / amplitude_decay) / layer_width


# ---------------------------------------------------------------------------
# stiffness operator

class ElasticOperator:
    """Assembled-on-the-fly stiffness action and lumped mass for one mesh/material pair."""

    def __init__(self, mesh: SpectralMesh, material: NodalMaterial, damping: np.ndarray | None = None):
        if material.rho.shape != (mesh.n_nodes,):
            raise ValueError("material is not sampled on this mesh")
        self.mesh = mesh
        self.material = material
        rq = material.rho[mesh.idx]
        vp2 = material.vp[mesh.idx] ** 2
        vs2 = material.vs[mesh.idx] ** 2
        jw = mesh.w2 * mesh.jacobian
        # density-normalized stiffness at quadrature points (C tilde)
        self.ct11 = vp2
        self.ct12 = vp2 - 2 * vs2
        self.ct66 = vs2
        self.jw = jw
        self.a11 = rq * vp2 * jw
        self.a12 = rq * (vp2 - 2 * vs2) * jw
        self.a66 = rq * vs2 * jw
        self.mass = mesh.mass_weights * material.rho
        self.inv_mass = 1.0 / self.mass
        self.damping = np.zeros(mesh.n_nodes) if damping is None else np.asarray(damping, float)
        if self.damping.shape != (mesh.n_nodes,):
            raise ValueError("damping must be a nodal field")
        self.sx = 2.0 / mesh.hx
        self.sy = 2.0 / mesh.hy
        self.DT = np.ascontiguousarray(mesh.D.T)

    def strains(self, u: np.ndarray):
        """Element-local strain components ``(exx, eyy, 2*exy)`` at quadrature points."""
        ue = u[self.mesh.idx]
        ux, uy = ue[..., 0], ue[..., 1]
        D, DT = self.mesh.D, self.DT
        exx = self.sx * (ux @ DT)
        eyy = self.sy * (D @ uy)
        gxy = self.sy * (D @ ux) + self.sx * (uy @ DT)
        return exx, eyy, gxy

    def apply(self, u: np.ndarray) -> np.ndarray:
        """Stiffness action ``K u``."""
        exx, eyy, gxy = self.strains(u)
        sxx = self.a11 * exx + self.a12 * eyy
        syy = self.a12 * exx + self.a11 * eyy
        sxy = self.a66 * gxy
        D, DT = self.mesh.D, self.DT
        fx = self.sx * (sxx @ D) + self.sy * (DT @ sxy)
        fy = self.sx * (sxy @ D) + self.sy * (DT @ syy)
        out = np.empty((self.mesh.n_nodes, 2))
        out[:, 0] = self.mesh.assemble(fx)
        out[:, 1] = self.mesh.assemble(fy)
        return out

    def strain_energy_density_product(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Element-local ``eps(u) : C~ : eps(v)`` times quadrature weights, shape ``(n_el, P, P)``."""
        a_xx, a_yy, a_g = self.strains(u)
        b_xx, b_yy, b_g = self.strains(v)
        return self.jw * (self.ct11 * (a_xx * b_xx + a_yy * b_yy)
                          + self.ct12 * (a_xx * b_yy + a_yy * b_xx) + self.ct66 * a_g * b_g)

    def energy(self, u: np.ndarray, v: np.ndarray) -> float:
        """``0.5 (v^T M v + u^T K u)``."""
        kin = 0.5 * float(np.sum(self.mass[:, None] * v * v))
        pot = 0.5 * float(np.sum(u * self.apply(u)))
        return kin + pot

    def max_eigenvalue(self, iters: int = 200, seed: int = 0) -> float:
        """Power-iteration estimate of the largest eigenvalue of ``M^-1 K``."""
        rng = np.random.default_rng(seed)
        sm = np.sqrt(self.mass)[:, None]
        x = rng.standard_normal((self.mesh.n_nodes, 2))
        lam = 0.0
        for _ in range(iters):
            x /= np.linalg.norm(x)
            y = self.apply(x / sm) / sm
            lam = float(np.sum(x * y))
            x = y
        return lam


# ---------------------------------------------------------------------------
# time stepping setup

@dataclass(frozen=True)
class TimeParams:
    dt: float
    t_end: float

    def __post_init__(self):
        if not self.dt > 0 or not self.t_end > 0:
            raise ValueError("dt and t_end must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def n_samples(self) -> int:
        return self.n_steps + 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_samples) * self.dt

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.n_samples, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w


def cfl_limit(mesh: SpectralMesh, material: NodalMaterial, courant: float | None = None) -> float:
    """Stable time step bound ``C * min(node spacing / effective vp)``.

    The effective speed of an element is its maximum ``vp`` scaled by the square root of
    its density contrast; sub-element density jumps stiffen light nodes by that factor.
    Uniform density changes leave the limit unchanged.
    """
    if courant is None:
        courant = COURANT_SAFETY * _STABILITY_EDGE.get(mesh.p, min(_STABILITY_EDGE.values()))
    rq = material.rho[mesh.idx].reshape(mesh.n_elements, -1)
    vq = material.vp[mesh.idx].reshape(mesh.n_elements, -1)
    contrast = np.sqrt(rq.max(axis=1) / rq.min(axis=1))
    v_eff = float(np.max(vq.max(axis=1) * contrast))
    return courant * mesh.min_node_spacing() / v_eff


@dataclass(eq=False)
class SourceTerm:
    """Point force. ``waveform`` is sampled on the simulation time axis.

    A positive ``width`` spreads the same total force uniformly along x over that width.
    """

    position: tuple[float, float]
    waveform: np.ndarray
    direction: tuple[float, float] = (0.0, 1.0)
    amplitude: float = 1.0
    width: float = 0.0

    def __post_init__(self):
        d = np.asarray(self.direction, float)
        if not math.isclose(float(np.linalg.norm(d)), 1.0, rel_tol=1e-9):
            raise ValueError("source direction must be a unit vector")
        if self.width < 0:
            raise ValueError("source width must be non-negative")
        self.waveform = np.asarray(self.waveform, float)
        if not np.all(np.isfinite(self.waveform)):
            raise ValueError("source waveform must be finite")


@dataclass(eq=False)
class ReceiverSpec:
    """Receivers sample ``u . n`` at a point, or its mean along x over ``widths``."""

    positions: np.ndarray
    directions: np.ndarray | None = None
    widths: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, float))
        if self.directions is None:
            self.directions = np.tile([0.0, 1.0], (len(self.positions), 1))
        self.directions = np.atleast_2d(np.asarray(self.directions, float))
        if self.directions.shape != self.positions.shape:
            raise ValueError("one direction per receiver required")
        if not np.allclose(np.linalg.norm(self.directions, axis=1), 1.0):
            raise ValueError("receiver directions must be unit vectors")
        self.widths = np.zeros(len(self.positions)) if self.widths is None else \
            np.broadcast_to(np.asarray(self.widths, float), (len(self.positions),)).copy()
        if np.any(self.widths < 0):
            raise ValueError("receiver widths must be non-negative")

    def __len__(self) -> int:
        return len(self.positions)


def strip_points(x: float, width: float, mesh: SpectralMesh) -> np.ndarray:
    """Midpoint-rule abscissae over ``[x - width/2, x + width/2]``, finer than half the
    smallest node spacing of ``mesh`` (a single point for zero width)."""
    if width <= 0:
        return np.array([x])
    n = max(2, math.ceil(width / (0.5 * mesh.min_node_spacing())))
    return x - 0.5 * width + width * (np.arange(n) + 0.5) / n


def point_operator(mesh: SpectralMesh, positions, directions, widths=None) -> sp.csr_matrix:
    """``(n_points, 2 n_nodes)`` operator sampling ``u(x_r) . n_r``; its transpose injects forces.

    With ``widths`` a row averages the samples along a strip in x instead.
    """
    widths = np.zeros(len(positions)) if widths is None else widths
    rows, cols, vals = [], [], []
    for r, ((x, y), n, width) in enumerate(zip(positions, directions, widths)):
        xs = strip_points(x, width, mesh)
        parts = [mesh.point_weights(xi, y) for xi in xs]
        nodes = np.concatenate([p[0] for p in parts])
        w = np.concatenate([p[1] for p in parts]) / xs.size
        for c in range(2):
            if n[c] != 0.0:
                rows.append(np.full(nodes.size, r))
                cols.append(2 * nodes + c)
                vals.append(w * n[c])
    if not rows:
        return sp.csr_matrix((len(positions), 2 * mesh.n_nodes))
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(len(positions), 2 * mesh.n_nodes))


# ---------------------------------------------------------------------------
# snapshots and results

@dataclass(eq=False)
class Snapshots:
    """Decimated displacement ``u^n`` and forward-difference velocity ``(u^{n+1}-u^n)/dt``."""

    u: np.ndarray
    w: np.ndarray
    steps: np.ndarray
    dt: float
    decimation: int
    shape: tuple[int, int]

    @property
    def dt_snap(self) -> float:
        return self.dt * self.decimation

    def __len__(self) -> int:
        return len(self.steps)

    def save(self, path: str | Path) -> None:
        """Little-endian float32 store; header ``SNP1, nx, ny, n_snapshots, dt_snap``."""
        ny, nx = self.shape
        with Path(path).open("wb") as fh:
            fh.write(b"SNP1")
            fh.write(struct.pack("<IIId", nx, ny, len(self), self.dt_snap))
            fh.write(struct.pack("<dI", self.dt, self.decimation))
            fh.write(self.steps.astype("<u4").tobytes())
            fh.write(self.u.astype("<f4").tobytes())
            fh.write(self.w.astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "Snapshots":
        raw = Path(path).read_bytes()
        if raw[:4] != b"SNP1":
            raise ValueError(f"{path}: not a snapshot file")
        nx, ny, n, _dt_snap = struct.unpack_from("<IIId", raw, 4)
        dt, dec = struct.unpack_from("<dI", raw, 24)
        off = 36
        steps = np.frombuffer(raw, "<u4", n, off).astype(int)
        off += 4 * n
        size = n * nx * ny * 2
        u = np.frombuffer(raw, "<f4", size, off).astype(float).reshape(n, nx * ny, 2)
        off += 4 * size
        w = np.frombuffer(raw, "<f4", size, off).astype(float).reshape(n, nx * ny, 2)
        return cls(u, w, steps, dt, dec, (ny, nx))


class _SnapshotRecorder:
    def __init__(self, mesh: SpectralMesh, n_steps: int, decimation: int, dt: float):
        self.decimation = decimation
        self.steps = np.arange(0, n_steps + 1, decimation)
        n = len(self.steps)
        self.u = np.zeros((n, mesh.n_nodes, 2))
        self.w = np.zeros((n, mesh.n_nodes, 2))
        self.dt = dt
        self.shape = (mesh.ny_nodes, mesh.nx_nodes)

    def record(self, n: int, u_n: np.ndarray, u_next: np.ndarray | None):
        if n % self.decimation:
            return
        j = n // self.decimation
        self.u[j] = u_n
        if u_next is not None:
            self.w[j] = (u_next - u_n) / self.dt

    def result(self) -> Snapshots:
        return Snapshots(self.u, self.w, self.steps, self.dt, self.decimation, self.shape)


@dataclass(eq=False)
class ForwardResult:
    traces: np.ndarray
    time: TimeParams
    snapshots: Snapshots | None = None
    checkpoints: dict[int, tuple[np.ndarray, np.ndarray]] | None = None
    checkpoint_interval: int = 0
    source_matrix: sp.csr_matrix | None = None
    source_waveforms: np.ndarray | None = None


@dataclass(eq=False)
class AdjointResult:
    """Nodal density kernel and its two parts (per unit area), plus optional backward snapshots."""

    kernel: np.ndarray
    velocity_term: np.ndarray
    strain_term: np.ndarray
    snapshots: Snapshots | None = None


# ---------------------------------------------------------------------------
# simulation

class Simulation:
    """A mesh, nodal material, sponge and time axis bundled for repeated runs."""

    def __init__(self, mesh: SpectralMesh, material: NodalMaterial, time: TimeParams,
                 damping: np.ndarray | None = None, check_cfl: bool = True, nan_check_every: int = 50):
        self.mesh = mesh
        self.time = time
        self.op = ElasticOperator(mesh, material, damping)
        self.nan_check_every = nan_check_every
        if check_cfl:
            limit = cfl_limit(mesh, material)
            if time.dt > limit:
                raise ValueError(f"dt={time.dt:.3e} s exceeds the stability limit {limit:.3e} s")
        half = 0.5 * time.dt * self.op.damping
        self._q = (1.0 / (1.0 + half))[:, None]
        self._b = (1.0 - half)[:, None]
        self._dt2_minv = (time.dt ** 2 * self.op.inv_mass)[:, None]

    @property
    def material(self) -> NodalMaterial:
        return self.op.material

    def _step(self, u: np.ndarray, u_prev: np.ndarray, force: np.ndarray | None) -> np.ndarray:
        rhs = -self.op.apply(u)
        if force is not None:
            rhs += force
        return (2.0 * u - self._b * u_prev + self._dt2_minv * rhs) * self._q

    def _check(self, n: int, u: np.ndarray):
        if n % self.nan_check_every == 0 and not np.all(np.isfinite(u)):
            raise SolverInstability(n)

    def _march(self, n_steps: int, force_at: Callable[[int], np.ndarray | None],
               on_state: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
               start: tuple[np.ndarray, np.ndarray] | None = None, n0: int = 0):
        """Generic marching from state ``(u^{n0-1}, u^{n0})`` for ``n_steps`` steps.

        ``on_state(n, u_n, u_next)`` is called after computing ``u^{n+1}``.
        """
        shape = (self.mesh.n_nodes, 2)
        if start is None:
            u_prev, u = np.zeros(shape), np.zeros(shape)
        else:
            u_prev, u = start[0].copy(), start[1].copy()
        for n in range(n0, n0 + n_steps):
            u_next = self._step(u, u_prev, force_at(n))
            self._check(n + 1, u_next)
            if on_state is not None:
                on_state(n, u, u_next)
            u_prev, u = u, u_next
        if not np.all(np.isfinite(u)):
            raise SolverInstability(n0 + n_steps)
        return u_prev, u

    def _forces(self, smat: sp.csr_matrix | None, waves: np.ndarray | None):
        if smat is None or waves is None or smat.nnz == 0:
            return lambda n: None
        shape = (self.mesh.n_nodes, 2)

        def force_at(n):
            if n >= waves.shape[1]:
                return None
            col = waves[:, n]
            if not col.any():
                return None
            return (smat @ col).reshape(shape)
        return force_at

    def source_matrix(self, sources: Sequence[SourceTerm]) -> tuple[sp.csr_matrix, np.ndarray]:
        n = self.time.n_samples
        if not sources:
            return sp.csr_matrix((2 * self.mesh.n_nodes, 0)), np.zeros((0, n))
        pos = [s.position for s in sources]
        dirs = [s.direction for s in sources]
        smat = point_operator(self.mesh, pos, dirs, [s.width for s in sources]).T.tocsr()
        waves = np.zeros((len(sources), n))
        for k, s in enumerate(sources):
            m = min(n, s.waveform.size)
            waves[k, :m] = s.amplitude * s.waveform[:m]
        return smat, waves

    def run_forward(self, sources: Sequence[SourceTerm], receivers: ReceiverSpec | None,
                    store: int | None = None, checkpoint: bool = False) -> ForwardResult:
        """Forward run from rest; traces ``u(x_r, t_k) . n_r`` for ``k = 0..n_steps``.

        ``store`` is a snapshot decimation factor; ``checkpoint`` keeps states for an adjoint run.
        """
        N = self.time.n_steps
        smat, waves = self.source_matrix(sources)
        rmat = point_operator(self.mesh, receivers.positions, receivers.directions, receivers.widths) \
            if receivers is not None and len(receivers) else None
        traces = np.zeros((0 if rmat is None else rmat.shape[0], N + 1))
        rec = _SnapshotRecorder(self.mesh, N, store, self.time.dt) if store else None
        interval = max(1, int(math.ceil(math.sqrt(N)))) if checkpoint else 0
        cps: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        if checkpoint:
            z = np.zeros((self.mesh.n_nodes, 2))
            cps[0] = (z, z.copy())

        def on_state(n, u_n, u_next):
            if rmat is not None:
                traces[:, n + 1] = rmat @ u_next.ravel()
            if rec is not None:
                rec.record(n, u_n, u_next)
            if checkpoint and (n + 1) % interval == 0:
                cps[n + 1] = (u_n.copy(), u_next.copy())

        _, u_last = self._march(N, self._forces(smat, waves), on_state)
        if rec is not None:
            rec.record(N, u_last, None)
        return ForwardResult(traces, self.time, rec.result() if rec else None,
                             cps if checkpoint else None, interval, smat, waves)

    def _replay(self, fwd: ForwardResult, lo: int, hi: int) -> list[np.ndarray]:
        """Recompute forward states ``u^lo .. u^hi`` from the checkpoint at ``lo``."""
        start = fwd.checkpoints[lo]
        states = [start[1].copy()]
        force_at = self._forces(fwd.source_matrix, fwd.source_waveforms)

        def keep(n, u_n, u_next):
            states.append(u_next)
        self._march(hi - lo, force_at, keep, start=start, n0=lo)
        return states

    def run_adjoint(self, adjoint_sources: np.ndarray, receivers: ReceiverSpec, forward: ForwardResult,
                    store: int | None = None) -> AdjointResult:
        """Backward run driven by ``adjoint_sources`` (one series per receiver, forward time axis).

        ``adjoint_sources`` is the derivative of the misfit integrand w.r.t. the traces, i.e. the
        (windowed) residual. The backward field is the Lagrange multiplier of the discrete
        forward problem, so it is driven by the negated, quadrature-weighted series. The
        returned kernel is the exact density gradient divided by the nodal quadrature weight.
        """
        N = self.time.n_steps
        if forward.checkpoints is None:
            raise ValueError("forward run was not checkpointed")
        if forward.time != self.time:
            raise ValueError("forward run used a different time axis")
        adj = np.asarray(adjoint_sources, float)
        if adj.shape != (len(receivers), N + 1):
            raise ValueError(f"adjoint sources shape {adj.shape} != {(len(receivers), N + 1)}")
        rmat = point_operator(self.mesh, receivers.positions, receivers.directions, receivers.widths)
        # trapezoid weights of the misfit quadrature; minus sign: multiplier convention
        wts = self.time.trapezoid_weights() / self.time.dt
        back_src = -(adj * wts[None, :])
        inj = rmat.T.tocsr()
        shape = (self.mesh.n_nodes, 2)

        def force_at(s):
            m = N - s
            col = back_src[:, m]
            if not col.any():
                return None
            return (inj @ col).reshape(shape)

        dt = self.time.dt
        eta = self.op.damping[:, None]
        vel_acc = np.zeros(self.mesh.n_nodes)
        strain_acc = np.zeros(self.mesh.idx.shape)
        has_damping = bool(self.op.damping.any())
        rec = _SnapshotRecorder(self.mesh, N, store, dt) if store else None

        interval = forward.checkpoint_interval
        seg_starts = sorted(forward.checkpoints)
        cache: dict[int, np.ndarray] = {}

        def fwd_pair(n):
            # states u^n, u^{n+1}; replays one checkpoint segment on a miss
            if n not in cache or n + 1 not in cache:
                cache.clear()
                lo = max(c for c in seg_starts if c <= n)
                hi = min(lo + interval, N)
                for k, st in enumerate(self._replay(forward, lo, hi)):
                    cache[lo + k] = st
            return cache[n], cache[n + 1]

        def on_state(s, phi_s, phi_next):
            n = N - s - 1
            ua_n, ua_np1 = phi_next, phi_s
            u_n, u_np1 = fwd_pair(n)
            w = (u_np1 - u_n) / dt
            wa = (ua_np1 - ua_n) / dt
            vel = -(w * wa).sum(axis=1)
            if has_damping:
                vel += (eta * 0.5 * (ua_n + ua_np1) * w).sum(axis=1)
            vel_acc[:] += dt * vel
            strain_acc[:] += dt * self.op.strain_energy_density_product(u_n, ua_n)
            if rec is not None:
                rec.record(n, ua_n, ua_np1)

        self._march(N, force_at, on_state)
        if rec is not None:
            rec.record(N, np.zeros(shape), None)
        mw = self.mesh.mass_weights
        strain_nodal = self.mesh.assemble(strain_acc) / mw
        kernel = vel_acc + strain_nodal
        return AdjointResult(kernel, vel_acc.copy(), strain_nodal, rec.result() if rec else None)


def run_forward(mesh: SpectralMesh, material: NodalMaterial, sources: Sequence[SourceTerm],
                receivers: ReceiverSpec | None, time: TimeParams, store: int | None = None,
                damping: np.ndarray | None = None) -> ForwardResult:
    return Simulation(mesh, material, time, damping).run_forward(sources, receivers, store)


def run_adjoint(sim: Simulation, adjoint_sources: np.ndarray, receivers: ReceiverSpec,
                forward: ForwardResult, store: int | None = None) -> AdjointResult:
    return sim.run_adjoint(adjoint_sources, receivers, forward, store)


def snapshot_decimation(dt: float, dominant_frequency: float, per_period: int = 20) -> int:
    """Largest step decimation keeping ``per_period`` snapshots per dominant period."""
    return max(1, int((1.0 / dominant_frequency) / (per_period * dt)))
