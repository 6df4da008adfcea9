"""Two-sided noise paths with bit-exact shifts.

Every path is built from increments on a fixed lattice of width
``spec.resolution`` (the finest bucket).  Increments of bucket ``j``, i.e. of the
interval ``(j*res, (j+1)*res]``, come from a Philox generator keyed by
``(seed, stream, j // CHUNK)``, so they do not depend on the requested window
or time step.  Values are prefix sums running outward from ``t = 0`` (which
pins ``N_0 = 0``), so coarser grids are exact subsamples of finer ones and the
value at a time is the same whatever window it was sampled in.

A shifted path ``theta_s omega`` keeps the same underlying values and only
records the integer origin offset; its values are ``N_{t+s} - N_s`` evaluated
from the unshifted array, which makes composition of shifts bitwise exact.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .grid import GridSpec, norm_lalpha, norm_w1alpha

KINDS = ("wiener_v", "levy_v", "scalar_bm", "zero")
CHUNK = 1024
_JUMP_STREAM = 1 << 20
_INDEX_OFFSET = 1 << 62


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "zero"
    modes: int = 1
    mode_amplitudes: tuple = (1.0,)
    jump_rate: float = 0.0
    jump_amplitude: float = 0.0
    mu: float = 0.0
    seed: int = 0
    resolution: float = 2.0**-10

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "mode_amplitudes", tuple(float(q) for q in self.mode_amplitudes))
        if self.kind in ("wiener_v", "levy_v"):
            if self.modes < 1 or len(self.mode_amplitudes) != self.modes:
                raise ValueError("mode_amplitudes must list one amplitude per mode")
            if any(q < 0 for q in self.mode_amplitudes):
                raise ValueError("mode amplitudes must be nonnegative")
        if self.jump_rate < 0 or self.jump_amplitude < 0:
            raise ValueError("jump_rate and jump_amplitude must be nonnegative")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def is_scalar(self) -> bool:
        return self.kind == "scalar_bm"


def _generator(seed: int, stream: int, chunk: int) -> np.random.Generator:
    key = np.random.SeedSequence([int(seed), int(stream), int(chunk) + _INDEX_OFFSET]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def bucket_normals(seed: int, stream: int, j0: int, j1: int) -> np.ndarray:
    """Standard normals attached to buckets ``j0 <= j < j1`` of one stream."""
    if j1 <= j0:
        return np.zeros(0)
    c0, c1 = j0 // CHUNK, (j1 - 1) // CHUNK
    blocks = [_generator(seed, stream, c).standard_normal(CHUNK) for c in range(c0, c1 + 1)]
    flat = np.concatenate(blocks)
    start = j0 - c0 * CHUNK
    return flat[start:start + (j1 - j0)]


def _two_sided_cumsum(incr: np.ndarray, j0: int, m_lo: int, m_hi: int) -> np.ndarray:
    """Values at lattice points ``m_lo..m_hi`` from increments of buckets ``j0..``.

    ``incr[i]`` is the increment over bucket ``j0 + i``; ``m_lo <= 0 <= m_hi``
    is required (the caller extends the range to contain the origin).
    """
    out = np.zeros(m_hi - m_lo + 1)
    if m_hi > 0:
        pos = incr[0 - j0:m_hi - j0]
        out[1 - m_lo:] = np.cumsum(pos)
    if m_lo < 0:
        neg = incr[m_lo - j0:0 - j0][::-1]
        out[:-m_lo][::-1] = -np.cumsum(neg)
    return out


def sine_basis(grid: GridSpec, k: int) -> np.ndarray:
    return np.sqrt(2.0) * np.sin(k * np.pi * grid.x / grid.length)


def _bump_slope_bound() -> float:
    r = np.linspace(-1 + 1e-9, 1 - 1e-9, 200001)
    b = np.exp(1.0 - 1.0 / (1.0 - r * r))
    return float(np.max(np.abs(np.gradient(b, r))))


_BUMP_SLOPE = _bump_slope_bound() * 1.01


def _bump(x, center, width):
    r = (x - center) / width
    out = np.zeros_like(x)
    inside = np.abs(r) < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - r[inside] ** 2))
    return out


@dataclass(frozen=True)
class JumpRecord:
    time: float
    bucket: int
    center: float
    width: float
    amplitude: float


def _jumps(spec: NoiseSpec, grid: GridSpec, j0: int, j1: int) -> list:
    """Compound-Poisson marks for buckets ``j0 <= j < j1`` sorted by time."""
    res = spec.resolution
    length = grid.length
    scale = max(1.0, length)
    records = []
    for c in range(j0 // CHUNK, (j1 - 1) // CHUNK + 1):
        gen = _generator(spec.seed, _JUMP_STREAM, c)
        count = gen.poisson(spec.jump_rate * CHUNK * res)
        offsets = gen.uniform(0.0, CHUNK, count)
        widths = gen.uniform(0.05, 0.2, count) * length
        centers = widths + gen.uniform(0.0, 1.0, count) * (length - 2 * widths)
        signs = np.where(gen.uniform(0.0, 1.0, count) < 0.5, -1.0, 1.0)
        mags = gen.uniform(0.0, 1.0, count)
        for off, w, ctr, sg, mg in zip(offsets, widths, centers, signs, mags):
            bucket = c * CHUNK + int(np.floor(off))
            if not j0 <= bucket < j1:
                continue
            # sup|b| = 1 and sup|b'| <= slope/w; both bound every V-norm on [0, L]
            amp = sg * mg * spec.jump_amplitude / (scale * max(1.0, _BUMP_SLOPE / w))
            records.append(JumpRecord((c * CHUNK + off) * res, bucket, ctr, w, amp))
    records.sort(key=lambda r: r.time)
    return records


@dataclass(frozen=True, eq=False)
class NoisePath:
    """Sampled path on the uniform grid ``(index0 + k*step) * res``.

    ``base`` holds the unshifted values ``N_t(omega)``; ``shift_index`` is the
    accumulated origin shift in lattice units.
    """

    kind: str
    res: float
    step: int
    index0: int
    base: np.ndarray
    grid: Optional[GridSpec] = None
    shift_index: int = 0
    jumps: tuple = ()
    values: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.shift_index == 0:
            values = self.base
        else:
            k = self._k_of_lattice(self.shift_index)
            values = self.base - self.base[k]
        object.__setattr__(self, "values", values)

    # ---- grid bookkeeping -------------------------------------------------
    def _k_of_lattice(self, m: int) -> int:
        q, r = divmod(m - self.index0, self.step)
        if r != 0 or not 0 <= q < len(self.base):
            raise ValueError(f"time {m * self.res!r} is not on the path grid")
        return q

    @property
    def dt(self) -> float:
        return self.step * self.res

    @property
    def n_times(self) -> int:
        return len(self.base)

    @property
    def times(self) -> np.ndarray:
        return (self.index0 - self.shift_index + self.step * np.arange(self.n_times)) * self.res

    @property
    def origin_shift(self) -> float:
        return self.shift_index * self.res

    @property
    def t_min(self) -> float:
        return (self.index0 - self.shift_index) * self.res

    @property
    def t_max(self) -> float:
        return (self.index0 - self.shift_index + self.step * (self.n_times - 1)) * self.res

    @property
    def is_scalar(self) -> bool:
        return self.base.ndim == 1

    def lattice(self, t: float) -> int:
        m = round(t / self.res)
        if abs(m * self.res - t) > 1e-9 * self.res:
            raise ValueError(f"time {t!r} is not on the noise lattice")
        return m

    def index(self, t: float) -> int:
        """Position of time ``t`` (current coordinates) in ``values``."""
        return self._k_of_lattice(self.lattice(t) + self.shift_index)

    def at(self, t: float):
        """``N_t`` with the piecewise-constant cadlag convention between grid points."""
        m = self.lattice(t) + self.shift_index
        q = (m - self.index0) // self.step
        if not 0 <= q < self.n_times:
            raise ValueError(f"time {t!r} outside the sampled window")
        return self.values[q]

    @classmethod
    def from_values(cls, times: Sequence[float], values, grid: Optional[GridSpec] = None) -> "NoisePath":
        """Wrap a prescribed path (test paths, imported data) on a uniform grid."""
        times = np.asarray(times, dtype=float)
        values = np.array(values, dtype=float)
        if len(times) < 2:
            raise ValueError("need at least two time points")
        dt = times[1] - times[0]
        if not np.allclose(np.diff(times), dt, rtol=0, atol=1e-12 * max(1.0, abs(dt))):
            raise ValueError("times must be uniform")
        index0 = round(times[0] / dt)
        if abs(index0 * dt - times[0]) > 1e-9 * dt:
            raise ValueError("first time must be a multiple of dt")
        kind = "scalar_bm" if values.ndim == 1 else "wiener_v"
        return cls(kind=kind, res=float(dt), step=1, index0=index0, base=values, grid=grid)


def _lattice_window(spec: NoiseSpec, window, dt):
    t_min, t_max = (float(w) for w in window)
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    if not t_min < t_max:
        raise ValueError(f"empty window [{t_min}, {t_max}]")
    res = spec.resolution
    step = round(dt / res)
    if step < 1 or abs(step * res - dt) > 1e-12 * dt:
        raise ValueError(f"dt={dt!r} must be a positive multiple of the noise resolution {res!r}")
    n_steps = round((t_max - t_min) / dt)
    if abs(n_steps * dt - (t_max - t_min)) > 1e-9 * dt:
        raise ValueError("dt must divide the window length")
    m0 = round(t_min / res)
    if abs(m0 * res - t_min) > 1e-9 * res:
        raise ValueError("window start must lie on the noise lattice")
    return res, step, m0, n_steps


def sample_path(spec: NoiseSpec, window, dt: float, grid: Optional[GridSpec] = None) -> NoisePath:
    """Sample ``N`` on ``[t_min, t_max]`` with step ``dt``.

    ``grid`` is required for the V-valued kinds (``wiener_v``, ``levy_v``) and
    for ``zero`` unless a scalar zero path is wanted.
    """
    res, step, m0, n_steps = _lattice_window(spec, window, dt)
    m_last = m0 + step * n_steps
    lat = m0 + step * np.arange(n_steps + 1)
    lo, hi = min(m0, 0), max(m_last, 0)

    if spec.kind == "scalar_bm":
        incr = bucket_normals(spec.seed, 0, lo, hi) * np.sqrt(res)
        vals = _two_sided_cumsum(incr, lo, lo, hi)
        return NoisePath("scalar_bm", res, step, m0, vals[lat - lo])

    if grid is None:
        if spec.kind == "zero":
            return NoisePath("zero", res, step, m0, np.zeros(n_steps + 1))
        raise ValueError(f"noise kind {spec.kind!r} needs a grid")
    if spec.kind == "zero":
        return NoisePath("zero", res, step, m0, np.zeros((n_steps + 1, grid.size)), grid=grid)

    base = np.zeros((n_steps + 1, grid.size))
    for k in range(1, spec.modes + 1):
        q = spec.mode_amplitudes[k - 1]
        if q == 0.0:
            continue
        incr = bucket_normals(spec.seed, k, lo, hi) * np.sqrt(res)
        beta = _two_sided_cumsum(incr, lo, lo, hi)[lat - lo]
        base += (q * beta)[:, None] * sine_basis(grid, k)[None, :]

    jumps = ()
    if spec.kind == "levy_v" and spec.jump_rate > 0 and spec.jump_amplitude > 0:
        records = _jumps(spec, grid, lo, hi)
        jumps = tuple(r for r in records if m0 < r.bucket + 1 <= m_last)
        base = base + _jump_values(grid, records, lat)
    return NoisePath(spec.kind, res, step, m0, base, grid=grid, jumps=jumps)


def _jump_values(grid: GridSpec, records, lat) -> np.ndarray:
    """Compound-Poisson part at lattice points ``lat`` (jump in bucket j lands at j+1)."""
    out = np.zeros((len(lat), grid.size))
    pos = [r for r in records if r.bucket >= 0]
    neg = [r for r in records if r.bucket < 0][::-1]
    for side, recs in ((1, pos), (-1, neg)):
        if not recs:
            continue
        profiles = np.array([r.amplitude * _bump(grid.x, r.center, r.width) for r in recs])
        partial = np.cumsum(profiles, axis=0)
        landing = np.array([r.bucket + 1 for r in recs])
        if side > 0:
            # number of jumps landed at or before m
            idx = np.searchsorted(landing, lat, side="right")
            sel = (lat > 0) & (idx > 0)
            out[sel] += partial[idx[sel] - 1]
        else:
            # for m <= 0: minus the jumps in buckets m..-1, i.e. landing in (m, 0]
            idx = np.searchsorted(-landing, -lat, side="left")
            sel = (lat < 0) & (idx > 0)
            out[sel] -= partial[idx[sel] - 1]
    return out


def shift_path(path: NoisePath, s: float) -> NoisePath:
    """Path of ``theta_s omega``: times move by ``-s`` and ``N_0`` is re-pinned."""
    m = path.lattice(s)
    path.index(s)  # raises when s is off the sampled grid
    return replace(path, shift_index=path.shift_index + m)


def geometric_factor(path: NoisePath, mu: float, t: float) -> float:
    if not path.is_scalar:
        raise ValueError("geometric factor needs a scalar Brownian path")
    return float(np.exp(-mu * path.at(t)))


def geometric_factors(path: NoisePath, mu: float) -> np.ndarray:
    if not path.is_scalar:
        raise ValueError("geometric factor needs a scalar Brownian path")
    return np.exp(-mu * path.values)


def _v_norms(path: NoisePath, alpha: float, norm: str) -> np.ndarray:
    if path.is_scalar or path.grid is None:
        raise ValueError("growth diagnostic needs a V-valued path")
    fn = {"lalpha": norm_lalpha, "w1alpha": norm_w1alpha}[norm]
    return np.array([fn(path.grid, v, alpha) for v in path.values])


def growth_diagnostic(path: NoisePath, alpha: float, norm: str = "lalpha") -> float:
    """``sup_t ||N_t||_V / (1 + |t|)^{1/(2-alpha)}`` over the sampled window."""
    weights = (1.0 + np.abs(path.times)) ** (1.0 / (2.0 - alpha))
    return float(np.max(_v_norms(path, alpha, norm) / weights))


def growth_profile(path: NoisePath, alpha: float, edges, norm: str = "lalpha") -> np.ndarray:
    """Windowed sups of the growth ratio over consecutive blocks of ``|t|``.

    ``edges`` are increasing ``|t|`` breakpoints; block ``i`` covers
    ``edges[i] <= |t| < edges[i+1]``.  A decreasing profile is the finite-window
    proxy for sublinear growth at ``t -> -infinity``.
    """
    ratio = _v_norms(path, alpha, norm) / (1.0 + np.abs(path.times)) ** (1.0 / (2.0 - alpha))
    at = np.abs(path.times)
    out = []
    for a, b in zip(edges[:-1], edges[1:]):
        sel = (at >= a) & (at < b)
        out.append(np.max(ratio[sel]) if np.any(sel) else np.nan)
    return np.array(out)


def write_path_csv(path: NoisePath, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    if path.is_scalar:
        writer.writerow(["t", "beta"])
        for t, v in zip(path.times, path.values):
            writer.writerow([f"{t:.17g}", f"{v:.17g}"])
        return
    writer.writerow(["t"] + [f"n{i}" for i in range(1, path.values.shape[1] + 1)])
    for t, row in zip(path.times, path.values):
        writer.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])
