"""Scenario geometry, material fields and ground-truth masks.

All lengths are in meters internally. Scenario files store millimeters.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import yaml

# AlMg3 specimen values
RHO_AL = 2582.8
VP_AL = 6315.8
VS_AL = 3129.3


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class RasterGrid:
    """Regular pixel grid. Pixel ``(iy, ix)`` has its center at
    ``(x0 + (ix + 0.5) * spacing, y0 + (iy + 0.5) * spacing)``; ``y`` is depth."""

    nx: int
    ny: int
    spacing: float
    x0: float = 0.0
    y0: float = 0.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"empty grid ({self.nx}x{self.ny})")
        if not self.spacing > 0:
            raise ValueError("grid spacing must be positive")

    @classmethod
    def covering(cls, x_range, y_range, spacing: float) -> "RasterGrid":
        """Smallest grid starting at the lower range bounds that covers both ranges."""
        nx = max(1, int(math.ceil((x_range[1] - x_range[0]) / spacing - 1e-9)))
        ny = max(1, int(math.ceil((y_range[1] - y_range[0]) / spacing - 1e-9)))
        return cls(nx, ny, spacing, float(x_range[0]), float(y_range[0]))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def x_centers(self) -> np.ndarray:
        return self.x0 + (np.arange(self.nx) + 0.5) * self.spacing

    @property
    def y_centers(self) -> np.ndarray:
        return self.y0 + (np.arange(self.ny) + 0.5) * self.spacing

    @property
    def extent(self) -> tuple[float, float, float, float]:
        return (self.x0, self.x0 + self.nx * self.spacing, self.y0, self.y0 + self.ny * self.spacing)

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-center coordinate arrays of shape ``(ny, nx)``."""
        return np.meshgrid(self.x_centers, self.y_centers)

    def pixel_index(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Nearest pixel indices for points, clipped to the grid."""
        ix = np.floor((np.asarray(x) - self.x0) / self.spacing).astype(int)
        iy = np.floor((np.asarray(y) - self.y0) / self.spacing).astype(int)
        return np.clip(iy, 0, self.ny - 1), np.clip(ix, 0, self.nx - 1)


@dataclass(frozen=True)
class Circle:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ScenarioError(f"circle radius must be positive, got {self.radius}")

    def contains(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return (x - self.center[0]) ** 2 + (y - self.center[1]) ** 2 < self.radius ** 2

    @property
    def area(self) -> float:
        return math.pi * self.radius ** 2

    @property
    def feature_size(self) -> float:
        return 2.0 * self.radius

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        cx, cy = self.center
        r = self.radius
        return (cx - r, cx + r, cy - r, cy + r)

    def to_dict(self) -> dict:
        return {"type": "circle", "center": [c * 1e3 for c in self.center], "radius": self.radius * 1e3}


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


@dataclass(frozen=True)
class Polygon:
    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        verts = tuple((float(a), float(b)) for a, b in self.vertices)
        object.__setattr__(self, "vertices", verts)
        if len(verts) < 3:
            raise ScenarioError("polygon needs at least 3 vertices")
        n = len(verts)
        for i in range(n):
            for j in range(i + 1, n):
                # adjacent edges share a vertex
                if j == i + 1 or (i == 0 and j == n - 1):
                    continue
                if _segments_cross(verts[i], verts[(i + 1) % n], verts[j], verts[(j + 1) % n]):
                    raise ScenarioError(f"polygon edges {i} and {j} intersect")
        if self.area <= 0:
            raise ScenarioError("degenerate polygon (zero area)")

    def contains(self, x, y) -> np.ndarray:
        """Even-odd ray casting, vectorized over points."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        inside = np.zeros(np.broadcast(x, y).shape, dtype=bool)
        v = np.asarray(self.vertices)
        xj, yj = v[-1]
        for xi, yi in v:
            crosses = (yi > y) != (yj > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                x_int = (xj - xi) * (y - yi) / (yj - yi) + xi
            inside ^= crosses & (x < x_int)
            xj, yj = xi, yi
        return inside

    @property
    def area(self) -> float:
        v = np.asarray(self.vertices)
        x, y = v[:, 0], v[:, 1]
        return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))

    @property
    def perimeter(self) -> float:
        v = np.asarray(self.vertices)
        return float(np.sum(np.hypot(*(np.roll(v, -1, axis=0) - v).T)))

    @property
    def feature_size(self) -> float:
        # equals the strip width for thin slots
        return 2.0 * self.area / self.perimeter

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        v = np.asarray(self.vertices)
        return (v[:, 0].min(), v[:, 0].max(), v[:, 1].min(), v[:, 1].max())

    def to_dict(self) -> dict:
        return {"type": "polygon", "vertices": [[a * 1e3, b * 1e3] for a, b in self.vertices]}


DefectShape = Union[Circle, Polygon]


def y_notch(center_x: float, junction_y: float, stem_length: float, arm_length: float,
            half_angle_deg: float, width: float) -> Polygon:
    """Y-shaped slot: a V of two arms opening towards the surface on top of a vertical stem.

    ``junction_y`` is the depth where the arms meet the stem; ``width`` is the slot width.
    """
    a = math.radians(half_angle_deg)
    w = 0.5 * width
    sa, ca = math.sin(a), math.cos(a)
    cx, yj = center_x, junction_y
    yb = yj + stem_length
    s = w * (1.0 - ca) / sa
    y_side = yj + w * sa - s * ca
    tip_r = (cx + arm_length * sa, yj - arm_length * ca)
    tip_l = (cx - arm_length * sa, yj - arm_length * ca)
    verts = [
        (cx - w, yb),
        (cx + w, yb),
        (cx + w, y_side),
        (tip_r[0] + w * ca, tip_r[1] + w * sa),
        (tip_r[0] - w * ca, tip_r[1] - w * sa),
        (cx, yj - w / sa),
        (tip_l[0] + w * ca, tip_l[1] - w * sa),
        (tip_l[0] - w * ca, tip_l[1] + w * sa),
        (cx - w, y_side),
    ]
    return Polygon(tuple(verts))


@dataclass(frozen=True)
class Background:
    rho: float = RHO_AL
    vp: float = VP_AL
    vs: float = VS_AL


@dataclass(frozen=True)
class ArraySpec:
    """Linear array on the top surface. Elements of nonzero width act as uniform strips of
    point forces (and average the received displacement over the same strip)."""

    n_elements: int = 64
    pitch: float = 0.75e-3
    first_element_x: float = 10e-3
    surface_y: float = 0.0
    element_width: float = 0.0  # 0 means point elements

    @property
    def aperture(self) -> float:
        return (self.n_elements - 1) * self.pitch

    @property
    def positions(self) -> np.ndarray:
        """Element positions, shape ``(n_elements, 2)``."""
        x = self.first_element_x + self.pitch * np.arange(self.n_elements)
        return np.column_stack([x, np.full(self.n_elements, self.surface_y)])

    @property
    def center_x(self) -> float:
        return self.first_element_x + 0.5 * self.aperture


@dataclass(frozen=True)
class ScenarioSpec:
    """Specimen geometry, defects, probe layout and evaluation region.

    ``roi`` is ``(x_min, x_max, y_min, y_max)`` in the local frame (``y = 0`` at the probe
    surface). ``settings`` carries free-form simulation/inversion options read from file.
    """

    name: str
    domain_width: float
    domain_height: float
    background: Background = Background()
    defects: tuple[DefectShape, ...] = ()
    array: ArraySpec = ArraySpec()
    roi: tuple[float, float, float, float] | None = None
    approximate: bool = False
    settings: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "defects", tuple(self.defects))
        if not (self.domain_width > 0 and self.domain_height > 0):
            raise ScenarioError("domain dimensions must be positive")
        bg = self.background
        if not (bg.rho > 0 and bg.vp > 0 and bg.vs > 0):
            raise ScenarioError("background material values must be positive")
        if bg.vp <= bg.vs * math.sqrt(2.0):
            raise ScenarioError(f"vp={bg.vp} must exceed sqrt(2)*vs={bg.vs * math.sqrt(2.0):.1f}")
        arr = self.array
        if arr.n_elements < 1 or not arr.pitch > 0:
            raise ScenarioError("array needs >= 1 element and positive pitch")
        if not 0 <= arr.element_width <= (arr.pitch if arr.n_elements > 1 else self.domain_width):
            raise ScenarioError("element width must lie in [0, pitch]")
        half = 0.5 * arr.element_width
        if arr.first_element_x - half < 0 or arr.first_element_x + arr.aperture + half > self.domain_width:
            raise ScenarioError("array aperture does not fit the domain width")
        for d in self.defects:
            x0, x1, y0, y1 = d.bounds
            if not (0 < x0 and x1 < self.domain_width and 0 < y0 and y1 < self.domain_height):
                raise ScenarioError(f"defect {d} is not strictly inside the domain")
        if self.roi is not None:
            x0, x1, y0, y1 = self.roi
            if not (0 <= x0 < x1 <= self.domain_width and 0 <= y0 < y1 <= self.domain_height):
                raise ScenarioError(f"roi {self.roi} outside the domain")

    @property
    def region_of_interest(self) -> tuple[float, float, float, float]:
        if self.roi is not None:
            return self.roi
        return (0.0, self.domain_width, 0.0, self.domain_height)

    def without_defects(self) -> "ScenarioSpec":
        return replace(self, defects=(), name=self.name + "-background")

    def roi_grid(self, spacing: float) -> RasterGrid:
        x0, x1, y0, y1 = self.region_of_interest
        return RasterGrid.covering((x0, x1), (y0, y1), spacing)

    def domain_grid(self, spacing: float) -> RasterGrid:
        return RasterGrid.covering((0.0, self.domain_width), (0.0, self.domain_height), spacing)


@dataclass(frozen=True, eq=False)
class MaterialModel:
    grid: RasterGrid
    rho: np.ndarray
    vp: np.ndarray
    vs: np.ndarray

    def __post_init__(self):
        for name in ("rho", "vp", "vs"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != self.grid.shape:
                raise ValueError(f"{name} has shape {arr.shape}, grid is {self.grid.shape}")
            if not np.all(arr > 0) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite and strictly positive")
            object.__setattr__(self, name, arr)

    def sample(self, x, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nearest-pixel lookup of ``(rho, vp, vs)`` at arbitrary points."""
        iy, ix = self.grid.pixel_index(x, y)
        return self.rho[iy, ix], self.vp[iy, ix], self.vs[iy, ix]


@dataclass(frozen=True, eq=False)
class GroundTruthMask:
    grid: RasterGrid
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.shape != self.grid.shape:
            raise ValueError("mask shape does not match grid")
        object.__setattr__(self, "mask", m.astype(np.uint8))


def defect_indicator(defects: Sequence[DefectShape], x, y) -> np.ndarray:
    inside = np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape, dtype=bool)
    for d in defects:
        inside |= d.contains(x, y)
    return inside


def rasterize_ground_truth(spec: ScenarioSpec, grid: RasterGrid) -> GroundTruthMask:
    """Binary mask, 1 where the pixel center lies inside any defect."""
    xc, yc = grid.centers()
    return GroundTruthMask(grid, defect_indicator(spec.defects, xc, yc))


def build_material_model(spec: ScenarioSpec, spacing: float, defect_density_factor: float = 0.01,
                         min_pixels: float = 4.0) -> MaterialModel:
    """Rasterize the scenario on a grid covering the domain.

    Defect pixels keep the background wave speeds and get ``rho * defect_density_factor``.
    """
    if not defect_density_factor > 0:
        raise ScenarioError(f"defect density factor must be positive, got {defect_density_factor}")
    for d in spec.defects:
        if d.feature_size < min_pixels * spacing:
            raise ScenarioError(
                f"spacing {spacing:.3e} m too coarse: smallest feature {d.feature_size:.3e} m "
                f"spans {d.feature_size / spacing:.2f} < {min_pixels} pixels")
    grid = spec.domain_grid(spacing)
    bg = spec.background
    rho = np.full(grid.shape, bg.rho)
    if spec.defects:
        xc, yc = grid.centers()
        rho[defect_indicator(spec.defects, xc, yc)] *= defect_density_factor
    return MaterialModel(grid, rho, np.full(grid.shape, bg.vp), np.full(grid.shape, bg.vs))


def constitutive_components(rho, vp, vs) -> dict[str, np.ndarray | float]:
    """Independent isotropic plane-strain stiffness components in Pa."""
    rho, vp, vs = np.asarray(rho, float), np.asarray(vp, float), np.asarray(vs, float)
    if np.any(vp ** 2 < 2 * vs ** 2):
        warnings.warn("vp^2 < 2 vs^2: negative first Lame parameter", RuntimeWarning, stacklevel=2)
    out = {"c1111": rho * vp ** 2, "c1122": rho * (vp ** 2 - 2 * vs ** 2), "c1212": rho * vs ** 2}
    return {k: (float(v) if np.ndim(v) == 0 else v) for k, v in out.items()}


def constitutive_tensor(rho: float, vp: float, vs: float) -> np.ndarray:
    """Full 2x2x2x2 tensor ``C_ijkl`` built from the Kronecker-delta form."""
    d = np.eye(2)
    lam = rho * (vp ** 2 - 2 * vs ** 2)
    mu = rho * vs ** 2
    return (lam * np.einsum("ij,kl->ijkl", d, d) + mu * np.einsum("ik,jl->ijkl", d, d)
            + mu * np.einsum("il,jk->ijkl", d, d))


# ---------------------------------------------------------------------------
# scenario files (YAML, millimeters)

def _defect_from_dict(d: dict) -> DefectShape:
    kind = d.get("type")
    if kind == "circle":
        return Circle(tuple(float(c) * 1e-3 for c in d["center"]), float(d["radius"]) * 1e-3)
    if kind == "polygon":
        return Polygon(tuple((float(a) * 1e-3, float(b) * 1e-3) for a, b in d["vertices"]))
    if kind == "y_notch":
        return y_notch(d["center_x"] * 1e-3, d["junction_y"] * 1e-3, d["stem_length"] * 1e-3,
                       d["arm_length"] * 1e-3, d["half_angle_deg"], d["width"] * 1e-3)
    raise ScenarioError(f"unknown defect type {kind!r}")


def scenario_from_dict(data: dict) -> ScenarioSpec:
    try:
        bg = data.get("background", {})
        arr = data.get("array", {})
        roi = data.get("roi")
        return ScenarioSpec(
            name=str(data["name"]),
            domain_width=float(data["domain"]["width"]) * 1e-3,
            domain_height=float(data["domain"]["height"]) * 1e-3,
            background=Background(float(bg.get("rho", RHO_AL)), float(bg.get("vp", VP_AL)),
                                  float(bg.get("vs", VS_AL))),
            defects=tuple(_defect_from_dict(d) for d in data.get("defects", []) or []),
            array=ArraySpec(int(arr.get("n_elements", 64)), float(arr.get("pitch", 0.75)) * 1e-3,
                            float(arr.get("first_element_x", 10.0)) * 1e-3,
                            float(arr.get("surface_y", 0.0)) * 1e-3,
                            float(arr.get("element_width", 0.0)) * 1e-3),
            roi=None if roi is None else tuple(float(v) * 1e-3 for v in
                                               (roi["x"][0], roi["x"][1], roi["y"][0], roi["y"][1])),
            approximate=bool(data.get("approximate", False)),
            settings=dict(data.get("settings", {}) or {}),
        )
    except KeyError as exc:
        raise ScenarioError(f"scenario is missing required key {exc}") from exc


def scenario_to_dict(spec: ScenarioSpec) -> dict:
    out = {
        "name": spec.name,
        "domain": {"width": spec.domain_width * 1e3, "height": spec.domain_height * 1e3},
        "background": {"rho": spec.background.rho, "vp": spec.background.vp, "vs": spec.background.vs},
        "array": {"n_elements": spec.array.n_elements, "pitch": spec.array.pitch * 1e3,
                  "first_element_x": spec.array.first_element_x * 1e3,
                  "surface_y": spec.array.surface_y * 1e3,
                  "element_width": spec.array.element_width * 1e3},
        "defects": [d.to_dict() for d in spec.defects],
        "approximate": spec.approximate,
    }
    if spec.roi is not None:
        x0, x1, y0, y1 = spec.roi
        out["roi"] = {"x": [x0 * 1e3, x1 * 1e3], "y": [y0 * 1e3, y1 * 1e3]}
    if spec.settings:
        out["settings"] = spec.settings
    return out


def load_scenario(path: str | Path) -> ScenarioSpec:
    path = Path(path)
    with path.open() as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ScenarioError(f"{path}: expected a mapping at top level")
    return scenario_from_dict(data)


def save_scenario(spec: ScenarioSpec, path: str | Path) -> None:
    with Path(path).open("w") as fh:
        yaml.safe_dump(scenario_to_dict(spec), fh, sort_keys=False)


# ---------------------------------------------------------------------------
# built-in scenario library

_FULL_W, _FULL_H = 67.25e-3, 45e-3
_FULL_ARRAY = ArraySpec(64, 0.75e-3, 10e-3, 0.0)
_FULL_ROI = (8.625e-3, 58.625e-3, 0.0, 25e-3)
_CX = _FULL_W / 2


def _full(name, defects) -> ScenarioSpec:
    return ScenarioSpec(name, _FULL_W, _FULL_H, Background(), tuple(defects), _FULL_ARRAY, _FULL_ROI,
                        approximate=True)


def _desk(name, defects, **settings) -> ScenarioSpec:
    return ScenarioSpec(name, 20e-3, 15e-3, Background(), tuple(defects),
                        ArraySpec(8, 1.5e-3, 4.75e-3, 0.0, 1.2e-3), (3e-3, 17e-3, 1e-3, 11e-3),
                        approximate=True, settings=dict(frequency_scale=0.5, **settings))


def builtin_scenarios() -> dict[str, ScenarioSpec]:
    """Hole and notch configurations, plus scaled-down ``desk-*`` variants.

    Full-scale dimensions are estimates of drawn specimens (no tabulated values exist),
    so every entry is flagged ``approximate``.
    """
    lib = {
        "hole1": _full("hole1", [Circle((_CX, 10e-3), 1.0e-3), Circle((_CX, 18e-3), 1.0e-3)]),
        "hole2": _full("hole2", [Circle((_CX - 4e-3, 10e-3), 1.5e-3), Circle((_CX + 4e-3, 18e-3), 1.5e-3)]),
        "hole3": _full("hole3", [Circle((_CX, 9e-3), 2.5e-3), Circle((_CX, 19e-3), 1.0e-3)]),
        "notch1": _full("notch1", [y_notch(_CX, 16e-3, 5e-3, 7e-3, 45.0, 0.5e-3)]),
        "notch2": _full("notch2", [y_notch(_CX, 14e-3, 6e-3, 6e-3, 45.0, 0.5e-3)]),
        "notch3": _full("notch3", [y_notch(_CX, 14e-3, 6e-3, 7e-3, 20.0, 0.5e-3)]),
        "desk-hole": _desk("desk-hole", [Circle((10e-3, 6e-3), 1.5e-3)]),
        "desk-hole2": _desk("desk-hole2", [Circle((8.5e-3, 5e-3), 1.0e-3), Circle((11.5e-3, 8.5e-3), 1.0e-3)]),
        "desk-notch": _desk("desk-notch", [y_notch(10e-3, 7e-3, 2e-3, 3e-3, 45.0, 0.6e-3)]),
        "desk-null": _desk("desk-null", []),
    }
    return lib


def get_scenario(name: str) -> ScenarioSpec:
    lib = builtin_scenarios()
    if name not in lib:
        raise ScenarioError(f"unknown scenario {name!r}; known: {', '.join(sorted(lib))}")
    return lib[name]
