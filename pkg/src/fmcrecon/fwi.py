"""Density-only full waveform inversion.

The density inside a rectangular region of interest is a bilinear expansion on a regular
coefficient grid; outside it stays at background. The misfit is the sampled L2 waveform
difference, its gradient comes from one forward and one adjoint run per supershot, and
a bound-projected L-BFGS drives the iterations.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .acquisition import FmcDataset, array_receivers, array_sources
from .model import RasterGrid
from .rtm import build_adjoint_sources
from .tfm import ImageGrid
from .wavesim import (ForwardResult, NodalMaterial, ReceiverSpec, Simulation, SolverInstability,
                      SpectralMesh, TimeParams)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# parameterization

@dataclass(eq=False)
class DensityParameterization:
    """Bilinear nodal basis on coefficient nodes ``x0 + i*spacing``, ``y0 + j*spacing``.

    ``coefficients`` are densities in kg/m^3, shaped ``(ny, nx)``.
    """

    roi: tuple[float, float, float, float]
    spacing: float
    rho_background: float
    bounds: tuple[float, float]

    def __post_init__(self):
        x0, x1, y0, y1 = self.roi
        self.nx = int(round((x1 - x0) / self.spacing)) + 1
        self.ny = int(round((y1 - y0) / self.spacing)) + 1
        if self.nx < 2 or self.ny < 2:
            raise ValueError("region of interest needs at least 2x2 coefficient nodes")
        self.x = x0 + self.spacing * np.arange(self.nx)
        self.y = y0 + self.spacing * np.arange(self.ny)
        lo, hi = self.bounds
        if not 0 < lo <= self.rho_background <= hi:
            raise ValueError("background density must lie within the bounds")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    def background(self) -> np.ndarray:
        return np.full(self.shape, self.rho_background)

    def basis_matrix(self, xs, ys) -> sp.csr_matrix:
        """``(n_points, n_coef)`` bilinear weights; points outside the ROI get empty rows."""
        xs = np.asarray(xs, float).ravel()
        ys = np.asarray(ys, float).ravel()
        x0, x1, y0, y1 = self.x[0], self.x[-1], self.y[0], self.y[-1]
        inside = (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
        pts = np.nonzero(inside)[0]
        fx = (xs[pts] - x0) / self.spacing
        fy = (ys[pts] - y0) / self.spacing
        ix = np.minimum(np.floor(fx).astype(int), self.nx - 2)
        iy = np.minimum(np.floor(fy).astype(int), self.ny - 2)
        tx, ty = fx - ix, fy - iy
        rows = np.repeat(pts, 4)
        cols = np.stack([iy * self.nx + ix, iy * self.nx + ix + 1,
                         (iy + 1) * self.nx + ix, (iy + 1) * self.nx + ix + 1], axis=1).ravel()
        vals = np.stack([(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty], axis=1).ravel()
        return sp.csr_matrix((vals, (rows, cols)), shape=(xs.size, self.size))

    def roi_mask(self, xs, ys) -> np.ndarray:
        xs, ys = np.asarray(xs), np.asarray(ys)
        return (xs >= self.x[0]) & (xs <= self.x[-1]) & (ys >= self.y[0]) & (ys <= self.y[-1])

    def clip(self, coef: np.ndarray) -> np.ndarray:
        return np.clip(coef, *self.bounds)

    def in_bounds(self, coef: np.ndarray) -> bool:
        lo, hi = self.bounds
        return bool(np.all(coef >= lo) and np.all(coef <= hi))

    def contrast_image(self, coef: np.ndarray, grid: RasterGrid) -> ImageGrid:
        """``1 - rho / rho_bg`` at pixel centers (zero outside the ROI)."""
        xc, yc = grid.centers()
        B = self.basis_matrix(xc, yc)
        # interpolate the deviation so that background coefficients give exactly zero
        dev = B @ (coef.ravel() - self.rho_background)
        dev[~self.roi_mask(xc, yc).ravel()] = 0.0
        return ImageGrid(grid, (0.0 - dev / self.rho_background).reshape(grid.shape), {"method": "fwi"})


def reset_high_densities(coef: np.ndarray, rho_background: float, threshold: float = 0.9) -> np.ndarray:
    """Coefficients above ``threshold * rho_background`` go back to background."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    out = np.array(coef, float, copy=True)
    out[out > threshold * rho_background] = rho_background
    return out


def reset_bottom_band(coef: np.ndarray, param: DensityParameterization, fraction: float = 0.1) -> np.ndarray:
    """Back-wall artifact removal: coefficient rows in the deepest ``fraction`` of the ROI."""
    out = np.array(coef, float, copy=True)
    if fraction <= 0:
        return out
    y0, y1 = param.y[0], param.y[-1]
    rows = param.y >= y1 - fraction * (y1 - y0) - 1e-12
    out[rows, :] = param.rho_background
    return out


# ---------------------------------------------------------------------------
# data handling

@dataclass(eq=False)
class Supershot:
    members: tuple[int, ...]
    observed: np.ndarray


def stack_sources(fmc: FmcDataset, group_size: int, selection: Sequence[int] | None = None) -> list[Supershot]:
    """Contiguous groups of transmitters (by element position) fired simultaneously.

    The stacked observation is the sum of the members' rows of the information matrix.
    """
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    sel = list(range(fmc.n)) if selection is None else sorted(int(i) for i in selection)
    if not sel:
        raise ValueError("empty transmitter selection")
    shots = []
    for k in range(0, len(sel), group_size):
        members = tuple(sel[k:k + group_size])
        shots.append(Supershot(members, fmc.traces[list(members)].sum(axis=0)))
    return shots


def time_window_weights(times: np.ndarray, window: tuple[float, float] | None, taper: float = 0.0) -> np.ndarray:
    """Multiplier that zeroes ``[t_a, t_b]`` with cosine ramps of length ``taper`` outside it."""
    times = np.asarray(times, float)
    w = np.ones_like(times)
    if window is None:
        return w
    t_a, t_b = window
    if t_b < t_a:
        raise ValueError(f"inverted window {window}")
    w[(times >= t_a) & (times <= t_b)] = 0.0
    if taper > 0:
        up = (times > t_a - taper) & (times < t_a)
        w[up] = 0.5 * (1 + np.cos(np.pi * (times[up] - (t_a - taper)) / taper))
        down = (times > t_b) & (times < t_b + taper)
        w[down] = 0.5 * (1 - np.cos(np.pi * (times[down] - t_b) / taper))
    return w


def apply_time_window(traces: np.ndarray, times: np.ndarray, window: tuple[float, float] | None,
                      taper: float = 0.0) -> np.ndarray:
    if window is not None:
        if window[1] < window[0]:
            raise ValueError(f"inverted window {window}")
        if window[0] < times[0] - 1e-15 or window[0] > times[-1] + 1e-15:
            raise ValueError(f"window {window} starts outside the trace span")
    return np.asarray(traces) * time_window_weights(times, window, taper)


def misfit(sim: np.ndarray, obs: np.ndarray, time: TimeParams, window: np.ndarray | None = None) -> float:
    """``0.5 * sum_r int (w (sim - obs))^2 dt`` with the trapezoidal rule."""
    sim, obs = np.asarray(sim, float), np.asarray(obs, float)
    if sim.shape != obs.shape:
        raise ValueError(f"shape mismatch: {sim.shape} vs {obs.shape}")
    res = sim - obs
    if window is not None:
        res = res * window
    return 0.5 * float(np.sum(res ** 2 * time.trapezoid_weights()))


# ---------------------------------------------------------------------------
# problem

@dataclass(eq=False)
class FwiProblem:
    """Everything needed to evaluate misfit and gradient for density coefficients."""

    mesh: SpectralMesh
    background: NodalMaterial
    time: TimeParams
    wavelet: np.ndarray
    fmc: FmcDataset
    param: DensityParameterization
    damping: np.ndarray | None = None
    trace_scale: float = 1.0
    workers: int = 1

    def __post_init__(self):
        if self.fmc.n_t != self.time.n_samples or not math.isclose(self.fmc.dt, self.time.dt, rel_tol=1e-9):
            raise ValueError("observed data and simulation time axes differ")
        X, Y = self.mesh.node_coordinates()
        self._basis = self.param.basis_matrix(X, Y)
        self._in_roi = self.param.roi_mask(X, Y)
        self.receivers: ReceiverSpec = array_receivers(self.fmc.array)
        self.n_forward = 0
        self.n_adjoint = 0

    def nodal_density(self, coef: np.ndarray) -> np.ndarray:
        rho = self.background.rho.copy()
        rho[self._in_roi] = (self._basis @ coef.ravel())[self._in_roi]
        return rho

    def simulation(self, coef: np.ndarray) -> Simulation:
        return Simulation(self.mesh, self.background.with_density(self.nodal_density(coef)),
                          self.time, self.damping)

    def _forward(self, sim: Simulation, shot: Supershot, checkpoint: bool) -> ForwardResult:
        self.n_forward += 1
        src = array_sources(self.fmc.array, self.wavelet, shot.members)
        return sim.run_forward(src, self.receivers, checkpoint=checkpoint)

    def _map(self, fn, items):
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(it) for it in items]

    def evaluate(self, coef: np.ndarray, shots: Sequence[Supershot], window: np.ndarray | None = None,
                 checkpoint: bool = False):
        """Misfit summed over supershots, plus the forward results for a later gradient."""
        sim = self.simulation(coef)
        fwds = self._map(lambda s: self._forward(sim, s, checkpoint), shots)
        chi = sum(misfit(self.trace_scale * f.traces, s.observed, self.time, window)
                  for f, s in zip(fwds, shots))
        return chi, sim, fwds

    def gradient_from(self, sim: Simulation, fwds: Sequence[ForwardResult], shots: Sequence[Supershot],
                      window: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Coefficient gradient and nodal kernel from checkpointed forward runs."""
        def adjoint(pair):
            f, s = pair
            self.n_adjoint += 1
            src = build_adjoint_sources(self.trace_scale * f.traces, s.observed, self.receivers,
                                        self.time.dt, window)
            return sim.run_adjoint(self.trace_scale * src.series, self.receivers, f).kernel

        kernels = self._map(adjoint, list(zip(fwds, shots)))
        kernel = np.zeros(self.mesh.n_nodes)
        for k in kernels:  # fixed reduction order
            kernel += k
        nodal = kernel * self.mesh.mass_weights
        nodal_roi = np.where(self._in_roi, nodal, 0.0)
        grad = (self._basis.T @ nodal_roi).reshape(self.param.shape)
        return grad, kernel

    def gradient(self, coef: np.ndarray, shots: Sequence[Supershot], window: np.ndarray | None = None):
        """``(chi, coefficient gradient, nodal kernel)``."""
        chi, sim, fwds = self.evaluate(coef, shots, window, checkpoint=True)
        grad, kernel = self.gradient_from(sim, fwds, shots, window)
        return chi, grad, kernel


def gradient(problem: FwiProblem, coef: np.ndarray, shots: Sequence[Supershot],
             window: np.ndarray | None = None):
    return problem.gradient(coef, shots, window)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class MisfitRecord:
    iteration: int
    chi: float
    grad_norm: float
    step: float
    accepted: bool
    stage: int = 1


@dataclass
class InversionStageConfig:
    max_iters: int = 20
    group_size: int = 8
    time_window: tuple[float, float] | None = None
    taper: float = 0.0
    reset_threshold: float | None = None
    bottom_band: float = 0.0
    memory: int = 10
    initial_step: float = 0.1
    rel_tol: float = 1e-4
    max_backtracks: int = 8

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")


class ProjectedLBFGS:
    """Limited-memory BFGS on a box, with projected Armijo backtracking.

    Variables at a bound whose gradient pushes outward are frozen for the direction
    computation. Accepted values are monotonically non-increasing by construction.
    """

    def __init__(self, lower: float, upper: float, memory: int = 10, c1: float = 1e-4):
        self.lower, self.upper = lower, upper
        self.memory = memory
        self.c1 = c1
        self.s: list[np.ndarray] = []
        self.y: list[np.ndarray] = []

    def free_mask(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        at_lo = (x <= self.lower) & (g > 0)
        at_hi = (x >= self.upper) & (g < 0)
        return ~(at_lo | at_hi)

    def direction(self, g: np.ndarray, free: np.ndarray) -> np.ndarray:
        q = np.where(free, g, 0.0)
        alphas = []
        for s, y in zip(reversed(self.s), reversed(self.y)):
            rho = 1.0 / np.dot(y, s)
            a = rho * np.dot(s, q)
            q = q - a * y
            alphas.append((a, rho, s, y))
        if self.s:
            gamma = np.dot(self.s[-1], self.y[-1]) / np.dot(self.y[-1], self.y[-1])
            r = gamma * q
        else:
            r = q
        for a, rho, s, y in reversed(alphas):
            b = rho * np.dot(y, r)
            r = r + s * (a - b)
        return -np.where(free, r, 0.0)

    def update(self, s: np.ndarray, y: np.ndarray):
        if np.dot(s, y) > 1e-12 * np.dot(s, s) * max(1.0, np.linalg.norm(y) / max(np.linalg.norm(s), 1e-300)):
            self.s.append(s)
            self.y.append(y)
            if len(self.s) > self.memory:
                self.s.pop(0)
                self.y.pop(0)

    def reset(self):
        self.s.clear()
        self.y.clear()


def run_stage(problem: FwiProblem, coef0: np.ndarray, cfg: InversionStageConfig, stage: int = 1,
              callback=None) -> tuple[np.ndarray, list[MisfitRecord]]:
    """Minimize the misfit over density coefficients for at most ``cfg.max_iters`` iterations.

    Stops early when the line search finds no better model or the relative decrease drops
    below ``cfg.rel_tol``. Solver blow-ups end the stage with the best model so far.
    """
    param = problem.param
    if not param.in_bounds(coef0):
        raise ValueError("initial model violates the density bounds")
    rho_bg = param.rho_background
    shots = stack_sources(problem.fmc, cfg.group_size)
    window = None
    if cfg.time_window is not None:
        window = time_window_weights(problem.time.times, cfg.time_window, cfg.taper)
    lo, hi = param.bounds[0] / rho_bg, param.bounds[1] / rho_bg

    def to_coef(x):
        return np.clip(x.reshape(param.shape) * rho_bg, *param.bounds)

    x = coef0.ravel() / rho_bg
    records: list[MisfitRecord] = []
    if cfg.max_iters == 0:
        return coef0.copy(), records
    f, sim, fwds = problem.evaluate(to_coef(x), shots, window, checkpoint=True)
    g_c, _ = problem.gradient_from(sim, fwds, shots, window)
    g = g_c.ravel() * rho_bg
    records.append(MisfitRecord(0, f, float(np.linalg.norm(g)), 0.0, True, stage))
    opt = ProjectedLBFGS(lo, hi, cfg.memory)
    for it in range(1, cfg.max_iters + 1):
        if f == 0.0 or not np.any(g):
            break
        free = opt.free_mask(x, g)
        d = opt.direction(g, free)
        if not opt.s or np.dot(g, d) >= 0:
            opt.reset()
            gf = np.where(free, g, 0.0)
            gmax = np.max(np.abs(gf))
            if gmax == 0:
                break
            d = -gf * (cfg.initial_step * (hi - lo) / gmax)
        alpha = 1.0
        accepted = False
        for _ in range(cfg.max_backtracks + 1):
            x_t = np.clip(x + alpha * d, lo, hi)
            step = x_t - x
            if not np.any(step):
                break
            try:
                f_t, sim_t, fwds_t = problem.evaluate(to_coef(x_t), shots, window, checkpoint=True)
            except SolverInstability as exc:
                log.warning("stage %d iteration %d: %s", stage, it, exc)
                f_t = math.inf
            if f_t <= f + opt.c1 * np.dot(g, step):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            records.append(MisfitRecord(it, f, float(np.linalg.norm(g)), 0.0, False, stage))
            break
        g_c, _ = problem.gradient_from(sim_t, fwds_t, shots, window)
        g_t = g_c.ravel() * rho_bg
        opt.update(x_t - x, g_t - g)
        rel = (f - f_t) / f
        x, f, g = x_t, f_t, g_t
        records.append(MisfitRecord(it, f, float(np.linalg.norm(g)), float(np.max(np.abs(step))), True, stage))
        log.info("stage %d iteration %d: chi=%.6e step=%.3e", stage, it, f, np.max(np.abs(step)))
        if callback is not None:
            callback(it, to_coef(x), records[-1])
        if rel < cfg.rel_tol:
            break
    return to_coef(x), records


def backwall_window(height: float, vp: float, pulse_peak: float, period: float,
                    t_end: float) -> tuple[tuple[float, float], float]:
    """Exclusion window and taper for the first back-wall p echo.

    Starts two dominant periods before the zero-offset arrival ``2 H / vp`` (shifted by the
    pulse peak delay) and runs to the end of the record; the taper is one period.
    """
    t_bw = 2.0 * height / vp + pulse_peak
    return (max(0.0, t_bw - 2.0 * period), t_end), period


def default_stage_configs(height: float, vp: float, pulse_peak: float, period: float, t_end: float,
                          stage1_iters: int = 20, stage2_iters: int = 20):
    window, taper = backwall_window(height, vp, pulse_peak, period, t_end)
    s1 = InversionStageConfig(max_iters=stage1_iters, group_size=8, time_window=window, taper=taper)
    s2 = InversionStageConfig(max_iters=stage2_iters, group_size=2, reset_threshold=0.9, bottom_band=0.1)
    return s1, s2


@dataclass
class InversionResult:
    coefficients: np.ndarray
    image: ImageGrid
    history: list[MisfitRecord]
    stage1_coefficients: np.ndarray


def two_stage_inversion(problem: FwiProblem, stage1: InversionStageConfig, stage2: InversionStageConfig,
                        image_grid: RasterGrid, coef0: np.ndarray | None = None,
                        callback=None) -> InversionResult:
    """Stage 1 on stacked, back-wall-windowed data; reset; stage 2 on finer stacks and full data.

    ``callback(stage, iteration, coefficients, record)`` sees every accepted iterate.
    """
    param = problem.param
    coef = param.background() if coef0 is None else coef0

    def hook(stage):
        if callback is None:
            return None
        return lambda it, c, rec: callback(stage, it, c, rec)

    coef1, hist1 = run_stage(problem, coef, stage1, stage=1, callback=hook(1))
    coef = coef1
    if stage2.reset_threshold is not None:
        coef = reset_high_densities(coef, param.rho_background, stage2.reset_threshold)
    coef = reset_bottom_band(coef, param, stage2.bottom_band)
    coef2, hist2 = run_stage(problem, coef, stage2, stage=2, callback=hook(2))
    return InversionResult(coef2, param.contrast_image(coef2, image_grid), hist1 + hist2, coef1)
