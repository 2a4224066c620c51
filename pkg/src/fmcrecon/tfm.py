"""Complex total focusing method (delay-and-sum of the analytic FMC matrix)."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .acquisition import FmcDataset
from .model import RasterGrid


def analytic_signal(x, axis: int = -1) -> np.ndarray:
    """Analytic signal by FFT: positive frequencies doubled, negative ones zeroed.

    DC and (for even lengths) the Nyquist bin are kept unchanged.
    """
    x = np.asarray(x, float)
    n = x.shape[axis]
    if n < 2:
        raise ValueError("need at least two samples")
    spec = np.fft.fft(x, axis=axis)
    h = np.zeros(n)
    h[0] = 1.0
    if n % 2 == 0:
        h[n // 2] = 1.0
        h[1:n // 2] = 2.0
    else:
        h[1:(n + 1) // 2] = 2.0
    shape = [1] * x.ndim
    shape[axis] = n
    return np.fft.ifft(spec * h.reshape(shape), axis=axis)


def envelope(x, axis: int = -1) -> np.ndarray:
    return np.abs(analytic_signal(x, axis))


def travel_time(tx, pixel, rx, c: float):
    """Direct-path time transmitter -> pixel -> receiver at speed ``c``."""
    if not c > 0:
        raise ValueError("sound speed must be positive")
    tx, pixel, rx = (np.asarray(a, float) for a in (tx, pixel, rx))
    s1 = np.hypot(pixel[..., 0] - tx[..., 0], pixel[..., 1] - tx[..., 1])
    s2 = np.hypot(pixel[..., 0] - rx[..., 0], pixel[..., 1] - rx[..., 1])
    return (s1 + s2) / c


@dataclass(frozen=True)
class TfmConfig:
    """Delay-and-sum settings; ``time_offset`` is added to every travel time (pulse delay)."""

    grid: RasterGrid
    c: float
    interpolation: str = "linear"
    time_offset: float = 0.0

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("c must be positive")
        if self.interpolation not in ("linear", "nearest"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")


@dataclass(eq=False)
class ImageGrid:
    """Scalar image on a raster grid, values shaped ``(ny, nx)``."""

    grid: RasterGrid
    values: np.ndarray
    meta: dict | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"image shape {self.values.shape} != grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("image values must be finite")

    def normalized(self) -> "ImageGrid":
        """Min-max scaled copy in [0, 1] (constant images map to 0)."""
        lo, hi = float(self.values.min()), float(self.values.max())
        span = hi - lo
        vals = (self.values - lo) / span if span > 0 else np.zeros_like(self.values)
        return ImageGrid(self.grid, vals, self.meta)

    def argmax_position(self) -> tuple[float, float]:
        iy, ix = np.unravel_index(np.argmax(self.values), self.values.shape)
        return float(self.grid.x_centers[ix]), float(self.grid.y_centers[iy])

    # --- portable float grid: magic, nx, ny, x0, y0, spacing, f32 values

    def save(self, path: str | Path) -> None:
        g = self.grid
        with Path(path).open("wb") as fh:
            fh.write(b"IMG1")
            fh.write(struct.pack("<IIddd", g.nx, g.ny, g.x0, g.y0, g.spacing))
            fh.write(np.ascontiguousarray(self.values, "<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "ImageGrid":
        raw = Path(path).read_bytes()
        if raw[:4] != b"IMG1":
            raise ValueError(f"{path}: not an image grid file")
        nx, ny, x0, y0, spacing = struct.unpack_from("<IIddd", raw, 4)
        off = 4 + struct.calcsize("<IIddd")
        vals = np.frombuffer(raw, "<f4", nx * ny, off).astype(float).reshape(ny, nx)
        return cls(RasterGrid(nx, ny, spacing, x0, y0), vals)

    def save_png(self, path: str | Path) -> None:
        from PIL import Image
        v = self.normalized().values
        Image.fromarray(np.round(255 * v).astype(np.uint8), mode="L").save(path)


def tfm_image(fmc: FmcDataset, cfg: TfmConfig, chunk: int = 65536) -> ImageGrid:
    """Envelope of the delay-and-sum over all transmitter/receiver pairs.

    Delays outside the recorded span contribute zero. The pair loop runs in fixed ``(i, j)``
    order, so the result does not depend on the pixel chunking.
    """
    g = cfg.grid
    if g.nx * g.ny == 0:
        raise ValueError("empty grid")
    X = analytic_signal(fmc.traces, axis=-1)
    xc, yc = g.centers()
    px, py = xc.ravel(), yc.ravel()
    elems = fmc.array.positions
    n_t = fmc.n_t
    out = np.empty(px.size)
    for lo in range(0, px.size, chunk):
        sl = slice(lo, min(lo + chunk, px.size))
        # one-way times element -> pixel, (n, n_pix)
        t1 = np.hypot(px[None, sl] - elems[:, :1], py[None, sl] - elems[:, 1:]) / cfg.c
        acc = np.zeros(t1.shape[1], complex)
        for i in range(fmc.n):
            for j in range(fmc.n):
                s = (t1[i] + t1[j] + cfg.time_offset - fmc.t0) / fmc.dt
                trace = X[i, j]
                if cfg.interpolation == "nearest":
                    k = np.rint(s).astype(np.int64)
                    ok = (k >= 0) & (k < n_t)
                    acc[ok] += trace[k[ok]]
                else:
                    k = np.floor(s).astype(np.int64)
                    ok = (k >= 0) & (k < n_t - 1)
                    frac = s[ok] - k[ok]
                    kk = k[ok]
                    acc[ok] += trace[kk] * (1.0 - frac) + trace[kk + 1] * frac
        out[sl] = np.abs(acc)
    return ImageGrid(g, out.reshape(g.shape), {"method": "tfm", "c": cfg.c})
