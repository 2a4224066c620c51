"""Scenario-level setup shared by the command line and the tests.

Builds meshes, time axes, sponge layers and pulses for a scenario, synthesizes observed data
at reference resolution, and drives the per-shot RTM and the FWI problem.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Sequence

import numpy as np

from .acquisition import (FmcDataset, SourceTimeFunction, array_receivers, array_sources,
                          default_pulse, generate_fmc)
from .fwi import DensityParameterization, FwiProblem, InversionStageConfig, backwall_window
from .model import RasterGrid, ScenarioSpec, build_material_model
from .rtm import RtmImage, build_adjoint_sources, finalize_rtm, project, rtm_density_kernel, rtm_classic
from .tfm import ImageGrid
from .wavesim import (NodalMaterial, Simulation, SpectralMesh, TimeParams, absorbing_profile,
                      cfl_limit, default_sponge_strength, sample_material, snapshot_decimation)


@dataclass
class SimulationConfig:
    """Discretization choices; ``None`` fields are derived from the scenario."""

    p: int = 4
    elements_per_wavelength: float = 1.5
    frequency_scale: float = 1.0
    t_end: float | None = None
    dt: float | None = None
    sponge_width: float | None = None
    sponge_decay: float = 1e-2
    # the inversion time step stays stable down to this density ratio inside an element
    min_density_ratio: float = 0.1

    @classmethod
    def from_scenario(cls, spec: ScenarioSpec, **overrides) -> "SimulationConfig":
        names = {f.name for f in fields(cls)}
        vals = {k: v for k, v in spec.settings.items() if k in names}
        vals.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**vals)


@dataclass(eq=False)
class SimulationSetup:
    scenario: ScenarioSpec
    config: SimulationConfig
    mesh: SpectralMesh
    time: TimeParams
    pulse: SourceTimeFunction
    damping: np.ndarray

    @property
    def wavelet(self) -> np.ndarray:
        return self.pulse.sampled(self.time.dt, self.time.n_samples)

    def background_material(self) -> NodalMaterial:
        bg = self.scenario.background
        return NodalMaterial.homogeneous(self.mesh, bg.rho, bg.vp, bg.vs)

    def simulation(self, material: NodalMaterial | None = None, check_cfl: bool = True) -> Simulation:
        return Simulation(self.mesh, material or self.background_material(), self.time, self.damping,
                          check_cfl)

    def dominant_period(self) -> float:
        return 1.0 / self.pulse.f_max


def default_t_end(spec: ScenarioSpec, pulse: SourceTimeFunction) -> float:
    """Record long enough for the first back-wall echo plus three quarters of its travel time."""
    return 1.75 * 2.0 * spec.domain_height / spec.background.vp + pulse.peak_time()


def default_sponge_width(spec: ScenarioSpec) -> float:
    """80 % of the gap between each side wall and the nearest array element."""
    arr = spec.array
    gap = min(arr.first_element_x, spec.domain_width - arr.first_element_x - arr.aperture)
    return 0.8 * gap


def _pulse(cfg: SimulationConfig, dt: float) -> SourceTimeFunction:
    return default_pulse(dt=min(dt, 1e-9), frequency_scale=cfg.frequency_scale)


def inversion_setup(spec: ScenarioSpec, cfg: SimulationConfig | None = None) -> SimulationSetup:
    """Discretization used for inversion and imaging (and by default for synthesis)."""
    cfg = cfg or SimulationConfig.from_scenario(spec)
    bg = spec.background
    probe = default_pulse(frequency_scale=cfg.frequency_scale)
    mesh = SpectralMesh.for_wavelength(spec.domain_width, spec.domain_height, bg.vs, probe.f_95,
                                       cfg.elements_per_wavelength, cfg.p)
    t_end = cfg.t_end if cfg.t_end is not None else default_t_end(spec, probe)
    if cfg.dt is not None:
        dt = cfg.dt
    else:
        hom = NodalMaterial.homogeneous(mesh, bg.rho, bg.vp, bg.vs)
        dt_max = cfl_limit(mesh, hom) * math.sqrt(cfg.min_density_ratio)
        dt = t_end / math.ceil(t_end / dt_max)
    time = TimeParams(dt, t_end)
    width = cfg.sponge_width if cfg.sponge_width is not None else default_sponge_width(spec)
    X, _ = mesh.node_coordinates()
    damping = absorbing_profile(X, spec.domain_width, width,
                                default_sponge_strength(width, bg.vp, cfg.sponge_decay))
    pulse = probe if dt >= 1e-9 else _pulse(cfg, dt)
    return SimulationSetup(spec, cfg, mesh, time, pulse, damping)


@dataclass(eq=False)
class ReferenceSetup:
    setup: SimulationSetup
    material: NodalMaterial
    decimation: int


def reference_setup(spec: ScenarioSpec, base: SimulationSetup, refine: int = 2,
                    defect_density_factor: float = 0.01) -> ReferenceSetup:
    """Finer mesh (``refine`` x) and an integer fraction (at least 1/2) of the base time step.

    Traces are decimated back onto the base time axis, so reference data plug straight into
    an inversion on the base setup without sharing its discretization.
    """
    if refine < 2:
        raise ValueError("reference runs need a mesh refined at least 2x")
    return _synthesis_setup(spec, base, refine, defect_density_factor, min_substeps=2)


def _synthesis_setup(spec: ScenarioSpec, base: SimulationSetup, refine: int, defect_density_factor: float,
                     min_substeps: int) -> ReferenceSetup:
    mesh = base.mesh.refined(refine) if refine > 1 else base.mesh
    spacing = min(mesh.min_node_spacing(), 0.05e-3)
    if spec.defects:
        smallest = min(d.feature_size for d in spec.defects)
        spacing = min(spacing, smallest / 8)
    material = sample_material(mesh, build_material_model(spec, spacing, defect_density_factor))
    limit = cfl_limit(mesh, material)
    # strong contrasts can push the limit below the inversion step: substep and decimate
    k = max(min_substeps, math.ceil(base.time.dt / limit - 1e-12))
    time = TimeParams(base.time.dt / k, base.time.t_end)
    X, _ = mesh.node_coordinates()
    width = base.config.sponge_width if base.config.sponge_width is not None else default_sponge_width(spec)
    damping = absorbing_profile(X, spec.domain_width, width,
                                default_sponge_strength(width, spec.background.vp, base.config.sponge_decay))
    setup = SimulationSetup(spec, base.config, mesh, time, base.pulse, damping)
    return ReferenceSetup(setup, material, k)


def synthesize(spec: ScenarioSpec, cfg: SimulationConfig | None = None, reference: bool = True,
               workers: int = 1, defect_density_factor: float = 0.01) -> FmcDataset:
    """Observed FMC for a scenario on the inversion time axis.

    Without ``reference`` the data come from the inversion mesh itself (an inverse crime,
    useful for quick checks); the time step is still reduced when the defect contrast needs it.
    """
    base = inversion_setup(spec, cfg)
    if reference:
        ref = reference_setup(spec, base, defect_density_factor=defect_density_factor)
    else:
        ref = _synthesis_setup(spec, base, 1, defect_density_factor, min_substeps=1)
    sim = ref.setup.simulation(ref.material)
    fmc = generate_fmc(sim, spec.array, base.pulse, ref.decimation, workers)
    fmc.meta.update({"scenario": spec.name, "reference": reference,
                     "frequency_scale": base.config.frequency_scale})
    return fmc


def setup_for_data(spec: ScenarioSpec, fmc: FmcDataset, cfg: SimulationConfig | None = None) -> SimulationSetup:
    """Inversion setup whose time axis is the one of the recorded data."""
    base = inversion_setup(spec, cfg)
    t_end = fmc.dt * (fmc.n_t - 1)
    setup = replace(base, time=TimeParams(fmc.dt, t_end), pulse=_pulse(base.config, fmc.dt))
    if not math.isclose(setup.time.t_end, fmc.t0 + t_end) or fmc.t0 != 0.0:
        raise ValueError("recorded data must start at t = 0")
    hom = setup.background_material()
    limit = cfl_limit(setup.mesh, hom) * math.sqrt(setup.config.min_density_ratio)
    if fmc.dt > limit * (1 + 1e-9):
        raise ValueError(f"data sampling dt={fmc.dt:.3e} s exceeds the inversion stability limit "
                         f"{limit:.3e} s; resample the data")
    return setup


def excitation_delay(spec: ScenarioSpec, cfg: SimulationConfig | None = None) -> float:
    """Envelope peak time of the excitation pulse.

    Synthetic traces start when the pulse starts, so echoes peak this long after the travel
    time; TFM shifts its delays by it.
    """
    cfg = cfg or SimulationConfig.from_scenario(spec)
    return default_pulse(frequency_scale=cfg.frequency_scale).peak_time()


def check_geometry(spec: ScenarioSpec, fmc: FmcDataset) -> None:
    a, b = spec.array, fmc.array
    if a.n_elements != b.n_elements or not math.isclose(a.pitch, b.pitch) or \
            not math.isclose(a.first_element_x, b.first_element_x, abs_tol=1e-12) or \
            not math.isclose(a.element_width, b.element_width, abs_tol=1e-12):
        raise ValueError(f"array geometry of the data ({b.n_elements} elements, pitch {b.pitch}, "
                         f"first x {b.first_element_x}, width {b.element_width}) does not match the scenario")


# ---------------------------------------------------------------------------
# RTM

@dataclass(eq=False)
class RtmRun:
    image: RtmImage
    nodal: np.ndarray  # shot-summed kernel before absolute value and blur
    shot_images: list[ImageGrid]


def run_rtm(setup: SimulationSetup, fmc: FmcDataset, grid: RasterGrid, kernel: str = "density",
            sigma: float = 3.0, decimation: int | None = None, shots: Sequence[int] | None = None,
            trace_scale: float | None = None) -> RtmRun:
    """Residual RTM: background forward run per transmitter, residual back-propagated.

    Images are accumulated from stored snapshots every ``decimation`` steps (default: 20 per
    dominant period). With ``decimation=1`` the density image equals the FWI gradient kernel.
    """
    if kernel not in ("density", "classic"):
        raise ValueError(f"unknown kernel {kernel!r}")
    if decimation is None:
        decimation = snapshot_decimation(setup.time.dt, setup.pulse.f_max)
    scale = trace_scale if trace_scale is not None else 1.0 / max(float(np.max(np.abs(fmc.traces))), 1e-300)
    sim = setup.simulation()
    rec = array_receivers(fmc.array)
    wave = setup.wavelet
    mat = sim.material
    total = np.zeros(setup.mesh.n_nodes)
    shot_images = []
    for i in (range(fmc.n) if shots is None else shots):
        fwd = sim.run_forward(array_sources(fmc.array, wave, [i]), rec, store=decimation, checkpoint=True)
        src = build_adjoint_sources(scale * fwd.traces, scale * fmc.traces[i], rec, setup.time.dt)
        bwd = sim.run_adjoint(scale * src.series, rec, fwd, store=decimation)
        if kernel == "density":
            nodal = rtm_density_kernel(fwd.snapshots, bwd.snapshots, setup.mesh, mat.vp, mat.vs, setup.damping)
        else:
            nodal = rtm_classic(fwd.snapshots, bwd.snapshots)
        total += nodal
        shot_images.append(project(setup.mesh, nodal, grid))
    image = finalize_rtm(shot_images, sigma, kernel)
    return RtmRun(image, total, shot_images)


# ---------------------------------------------------------------------------
# FWI

@dataclass
class FwiConfig:
    """Inversion settings for the two-stage workflow; bounds are relative to the background density."""

    # None: 0.25 mm at full frequency, widened by 1 / frequency_scale to keep cells per wavelength
    grid_spacing: float | None = None
    bounds: tuple[float, float] = (0.1, 1.0)  # relative to the background density
    stage1_iters: int = 20
    stage1_group: int = 8
    stage2_iters: int = 20
    stage2_group: int = 2
    reset_threshold: float = 0.9
    bottom_band: float = 0.1
    backwall_exclusion: bool = True
    workers: int = 1

    def stages(self, setup: SimulationSetup) -> tuple[InversionStageConfig, InversionStageConfig]:
        spec = setup.scenario
        window, taper = None, 0.0
        if self.backwall_exclusion:
            window, taper = backwall_window(spec.domain_height, spec.background.vp, setup.pulse.peak_time(),
                                            setup.dominant_period(), setup.time.t_end)
        s1 = InversionStageConfig(max_iters=self.stage1_iters, group_size=self.stage1_group,
                                  time_window=window, taper=taper)
        s2 = InversionStageConfig(max_iters=self.stage2_iters, group_size=self.stage2_group,
                                  reset_threshold=self.reset_threshold, bottom_band=self.bottom_band)
        return s1, s2

    def spacing(self, setup: SimulationSetup) -> float:
        if self.grid_spacing is not None:
            return self.grid_spacing
        return 0.25e-3 / setup.config.frequency_scale

    def to_dict(self) -> dict:
        return asdict(self)


def fwi_problem(setup: SimulationSetup, fmc: FmcDataset, cfg: FwiConfig | None = None) -> FwiProblem:
    cfg = cfg or FwiConfig()
    spec = setup.scenario
    rho_bg = spec.background.rho
    param = DensityParameterization(spec.region_of_interest, cfg.spacing(setup), rho_bg,
                                    (cfg.bounds[0] * rho_bg, cfg.bounds[1] * rho_bg))
    obs = fmc.normalized()
    scale = obs.meta["normalization"]
    return FwiProblem(setup.mesh, setup.background_material(), setup.time, setup.wavelet, obs, param,
                      setup.damping, trace_scale=scale, workers=cfg.workers)
