"""Full-matrix-capture synthesis, source time functions and the FMC file format."""
from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal.windows import tukey

from .model import ArraySpec
from .wavesim import ReceiverSpec, Simulation, SourceTerm

# Gaussian-modulated sine whose power spectrum peaks at 2.296 MHz with 95 % of the
# energy below 3.284 MHz
PULSE_CENTER_FREQUENCY = 2.29617e6
PULSE_SIGMA = 1.8741e-7

FMC_MAGIC = b"FMC1"


def spectrum_stats(samples, dt: float, resolution: float = 1e3) -> tuple[float, float]:
    """``(f_max, f_95)``: power-spectrum peak and the frequency below which 95 % of the energy lies.

    The signal is zero-padded so that FFT bins are at most ``resolution`` Hz wide.
    """
    x = np.asarray(samples, float)
    if x.size == 0 or not np.any(x):
        raise ValueError("spectrum of an all-zero signal is undefined")
    n_fft = 1 << int(math.ceil(math.log2(max(x.size, 1.0 / (dt * resolution)))))
    power = np.abs(np.fft.rfft(x, n_fft)) ** 2
    freqs = np.fft.rfftfreq(n_fft, dt)
    cum = np.cumsum(power)
    cum /= cum[-1]
    return float(freqs[np.argmax(power)]), float(freqs[np.searchsorted(cum, 0.95)])


def fft_bin_width(n: int, dt: float, resolution: float = 1e3) -> float:
    n_fft = 1 << int(math.ceil(math.log2(max(n, 1.0 / (dt * resolution)))))
    return 1.0 / (n_fft * dt)


@dataclass(eq=False)
class SourceTimeFunction:
    samples: np.ndarray
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, float)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("source time function must be finite")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def stats(self) -> dict[str, float]:
        f_max, f_95 = spectrum_stats(self.samples, self.dt)
        return {"f_max": f_max, "f_95": f_95}

    @property
    def f_max(self) -> float:
        return self.stats["f_max"]

    @property
    def f_95(self) -> float:
        return self.stats["f_95"]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.samples.size)

    def peak_time(self) -> float:
        """Time of the envelope maximum."""
        from .tfm import analytic_signal
        return float(self.times[np.argmax(np.abs(analytic_signal(self.samples)))])

    def sampled(self, dt: float, n: int) -> np.ndarray:
        """Linear resampling onto ``k * dt``, ``k < n``; zero outside the support."""
        t = np.arange(n) * dt
        return np.interp(t, self.times, self.samples, left=0.0, right=0.0)


def default_pulse(dt: float = 1e-9, duration: float = 5e-6, frequency_scale: float = 1.0,
                  delay: float | None = None) -> SourceTimeFunction:
    """Shipped excitation pulse; ``frequency_scale`` stretches it for scaled-down models."""
    sigma = PULSE_SIGMA / frequency_scale
    fc = PULSE_CENTER_FREQUENCY * frequency_scale
    if delay is None:
        delay = 4.5 * sigma
    t = np.arange(int(round(duration / frequency_scale / dt))) * dt
    x = np.exp(-0.5 * ((t - delay) / sigma) ** 2) * np.sin(2 * np.pi * fc * (t - delay))
    return SourceTimeFunction(x / np.max(np.abs(x)), dt)


def estimate_stf(trace, dt: float, window: tuple[float, float], taper: float = 0.25,
                 t0: float = 0.0) -> SourceTimeFunction:
    """Cut ``window`` out of a measured trace, apply a cosine (Tukey) taper and peak-normalize."""
    trace = np.asarray(trace, float)
    t_a, t_b = window
    if t_b <= t_a:
        raise ValueError("empty window")
    t_end = t0 + dt * (trace.size - 1)
    if t_a < t0 - 1e-15 or t_b > t_end + 1e-15:
        raise ValueError(f"window {window} outside trace span [{t0}, {t_end}]")
    i0 = int(math.ceil((t_a - t0) / dt - 1e-9))
    i1 = int(math.floor((t_b - t0) / dt + 1e-9)) + 1
    seg = trace[i0:i1]
    if seg.size < 2:
        raise ValueError("empty window")
    seg = seg * tukey(seg.size, taper)
    peak = np.max(np.abs(seg))
    if peak == 0:
        raise ValueError("window contains an all-zero pulse")
    return SourceTimeFunction(seg / peak, dt, t0 + i0 * dt)


@dataclass(eq=False)
class FmcDataset:
    """Information matrix ``traces[i, j, k]``: transmitter ``i``, receiver ``j``, sample ``k``."""

    traces: np.ndarray
    dt: float
    array: ArraySpec
    t0: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.traces = np.asarray(self.traces, float)
        if self.traces.ndim != 3 or self.traces.shape[0] != self.traces.shape[1]:
            raise ValueError(f"FMC traces must be (n, n, n_t), got {self.traces.shape}")
        if self.traces.shape[0] != self.array.n_elements:
            raise ValueError("FMC size does not match the array element count")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def n(self) -> int:
        return self.traces.shape[0]

    @property
    def n_t(self) -> int:
        return self.traces.shape[2]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_t)

    def normalized(self) -> "FmcDataset":
        """Scale to ``max |amplitude| = 1``; the factor is kept in ``meta['normalization']``."""
        peak = float(np.max(np.abs(self.traces)))
        if peak == 0:
            return self
        scale = self.meta.get("normalization", 1.0) / peak
        return replace(self, traces=self.traces / peak, meta={**self.meta, "normalization": scale})

    def scaled(self, factor: float) -> "FmcDataset":
        return replace(self, traces=self.traces * factor)

    def decimated(self, factor: int) -> "FmcDataset":
        if factor < 1:
            raise ValueError("decimation factor must be >= 1")
        meta = {**self.meta, "decimation": self.meta.get("decimation", 1) * factor}
        return replace(self, traces=self.traces[:, :, ::factor].copy(), dt=self.dt * factor, meta=meta)

    def __sub__(self, other: "FmcDataset") -> "FmcDataset":
        if self.traces.shape != other.traces.shape or not math.isclose(self.dt, other.dt):
            raise ValueError("datasets are not compatible")
        return replace(self, traces=self.traces - other.traces)

    # --- files

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("wb") as fh:
            fh.write(FMC_MAGIC)
            fh.write(struct.pack("<IIdddd", self.n, self.n_t, self.dt, self.t0,
                                 self.array.pitch, self.array.first_element_x))
            fh.write(np.ascontiguousarray(self.traces, dtype="<f8").tobytes())
        meta = {**self.meta, "surface_y": self.array.surface_y, "element_width": self.array.element_width}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "FmcDataset":
        path = Path(path)
        raw = path.read_bytes()
        if raw[:4] != FMC_MAGIC:
            raise ValueError(f"{path}: not an FMC1 file")
        n, n_t, dt, t0, pitch, first_x = struct.unpack_from("<IIdddd", raw, 4)
        hdr = 4 + struct.calcsize("<IIdddd")
        expected = hdr + 8 * n * n * n_t
        if len(raw) != expected:
            raise ValueError(f"{path}: truncated file ({len(raw)} of {expected} bytes)")
        traces = np.frombuffer(raw, "<f8", n * n * n_t, hdr).reshape(n, n, n_t).copy()
        side = path.with_suffix(path.suffix + ".json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        surface_y = float(meta.pop("surface_y", 0.0))
        width = float(meta.pop("element_width", 0.0))
        return cls(traces, dt, ArraySpec(n, pitch, first_x, surface_y, width), t0, meta)

    def to_csv(self, path: str | Path) -> None:
        """Long-format CSV ``tx,rx,t,amplitude`` (intended for small datasets)."""
        i, j, k = np.meshgrid(np.arange(self.n), np.arange(self.n), np.arange(self.n_t), indexing="ij")
        rows = np.column_stack([i.ravel(), j.ravel(), self.times[k.ravel()], self.traces.ravel()])
        np.savetxt(path, rows, delimiter=",", header="tx,rx,t,amplitude", comments="",
                   fmt=["%d", "%d", "%.9e", "%.12e"])


def array_receivers(array: ArraySpec) -> ReceiverSpec:
    return ReceiverSpec(array.positions, np.tile([0.0, 1.0], (array.n_elements, 1)),
                        np.full(array.n_elements, array.element_width))


def array_sources(array: ArraySpec, waveform: np.ndarray, members) -> list[SourceTerm]:
    pos = array.positions
    return [SourceTerm((float(pos[i, 0]), float(pos[i, 1])), waveform, width=array.element_width)
            for i in members]


def generate_fmc(sim: Simulation, array: ArraySpec, stf: SourceTimeFunction,
                 output_decimation: int = 1, workers: int = 1) -> FmcDataset:
    """One forward run per transmitter, each recorded on every element.

    ``output_decimation`` keeps every k-th sample (used when reference runs take smaller steps
    than the inversion). Results do not depend on ``workers``.
    """
    time = sim.time
    wave = stf.sampled(time.dt, time.n_samples)
    rec = array_receivers(array)

    def shot(i):
        return sim.run_forward(array_sources(array, wave, [i]), rec).traces

    idx = range(array.n_elements)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(shot, idx))
    else:
        rows = [shot(i) for i in idx]
    traces = np.stack(rows)[:, :, ::output_decimation]
    meta = {"decimation": output_decimation, "solver_dt": time.dt, "normalization": 1.0}
    return FmcDataset(traces, time.dt * output_decimation, array, 0.0, meta)
