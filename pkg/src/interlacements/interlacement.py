"""Window-restricted random interlacements, coupled across levels by labels.

A soup on the window B_N holds K ~ Poisson(u_max * cap) trajectories with
i.i.d. uniform labels in (0, u_max].  Each enters the window at a site drawn
from the normalized equilibrium measure and runs until it leaves the guard
box B_M.  Capacity and entry law are those of the walk killed outside B_M,
so a soup samples the interlacement of that killed walk exactly; it differs
from the interlacement on Z^d only through excursions that leave B_M and come
back, which have probability O(N/M) each in d = 3.

Occupancy at level u is read from the first-visit label map ``tau``: a window
site is occupied at level u iff ``tau <= u``.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _rng, _walk
from .lattice import EquilibriumMeasure, LatticeBox, PotentialEstimate, jump_tables, origin_box, window_equilibrium

log = logging.getLogger(__name__)

DEFAULT_GUARD = 8
DUMP_MAGIC = b"RISOUP\x00\x00"
DUMP_VERSION = 1


@dataclass(frozen=True)
class TrajectorySoup:
    window: LatticeBox
    guard: LatticeBox
    u_max: float
    labels: np.ndarray  # ascending
    entries: np.ndarray  # (K, d)
    trace_sites: np.ndarray = field(repr=False)  # flat window indices, per trajectory
    trace_offsets: np.ndarray = field(repr=False)
    tau: np.ndarray = field(repr=False)  # smallest label visiting each site, inf if none
    cap_estimate: PotentialEstimate = None
    intensity: float = float("nan")  # Poisson mean of the trajectory count
    seed: int | None = None
    stream: str | None = None

    @property
    def count(self) -> int:
        return len(self.labels)

    def trace(self, i: int) -> np.ndarray:
        """Window sites visited by trajectory ``i`` (coordinates)."""
        idx = self.trace_sites[self.trace_offsets[i] : self.trace_offsets[i + 1]]
        return unflatten(idx, self.window.radius, self.window.d)

    def trace_indices(self, i: int) -> np.ndarray:
        return self.trace_sites[self.trace_offsets[i] : self.trace_offsets[i + 1]]


@dataclass(frozen=True)
class OccupancyGrid:
    window: LatticeBox
    level: float
    occupied: np.ndarray  # bool, shape (2N+1,)*d

    @property
    def vacant(self) -> np.ndarray:
        return ~self.occupied


@dataclass(frozen=True)
class ClusterReport:
    labels: np.ndarray  # component id per site, 0 on occupied sites
    sizes: np.ndarray  # sizes[i] = size of component i+1
    origin_in_vacant: bool
    origin_connected_to_boundary: bool
    probe_radius: int


def unflatten(idx, N: int, d: int) -> np.ndarray:
    W = 2 * N + 1
    return np.stack(np.unravel_index(np.asarray(idx), (W,) * d), axis=-1).astype(np.int64) - N


@dataclass(frozen=True)
class WindowGeometry:
    """Per-window lookup arrays for the search kernels."""

    N: int
    d: int
    strides: np.ndarray
    rad: np.ndarray  # sup-norm radius of each flat site


_GEOMETRY: dict = {}


def window_geometry(N: int, d: int) -> WindowGeometry:
    key = (N, d)
    if key not in _GEOMETRY:
        W = 2 * N + 1
        strides = np.array([W ** (d - 1 - q) for q in range(d)], dtype=np.int64)
        r = np.abs(np.arange(-N, N + 1))
        rad = r
        for _ in range(d - 1):
            rad = np.maximum.outer(rad, r)
        _GEOMETRY[key] = WindowGeometry(N, d, strides, np.ascontiguousarray(rad.ravel().astype(np.int64)))
    return _GEOMETRY[key]


def soup_equilibrium(window: LatticeBox, m: int, eq_seed: int = 0, eq_samples: int | None = None):
    if m < 4:
        raise ValueError(f"guard factor m={m} must be >= 4")
    if any(window.center):
        raise ValueError("windows must be centred at the origin")
    return window_equilibrium(window.d, window.radius, m * max(window.radius, 1), eq_samples, eq_seed)


def _draw(meas: EquilibriumMeasure, u_max: float, rng):
    """Trajectory count, ascending labels in (0, u_max] and entry sites."""
    mean = u_max * meas.killed_capacity
    K = int(rng.poisson(mean))
    labels = np.sort(u_max * (1.0 - rng.random(K)))
    entries = meas.sample(rng, K)
    return mean, labels, np.ascontiguousarray(entries)


def _run(window, M, labels, entries, rng, record, accelerate=True):
    t = jump_tables(window.d)
    return _walk.soup_traces(entries, labels, _rng.kernel_key(rng), window.radius, M, accelerate, record, *t.args())


def sample_soup(
    window: LatticeBox,
    u_max: float,
    m: int = DEFAULT_GUARD,
    rng=None,
    *,
    equilibrium=None,
    seed: int | None = None,
    stream: str | None = None,
    record: bool = True,
) -> TrajectorySoup:
    """Draw one soup on ``window`` resolving all levels up to ``u_max``.

    ``equilibrium`` is an ``(estimate, measure)`` pair from ``equilibrium_sample``
    with escape radius equal to the guard radius; by default it is computed
    (and cached) with a fixed seed.
    """
    if not u_max > 0:
        raise ValueError("u_max must be positive")
    if rng is None:
        raise ValueError("rng is required")
    est, meas = equilibrium if equilibrium is not None else soup_equilibrium(window, m)
    M = meas.escape_radius
    if M < 4 * window.radius:
        raise ValueError("guard radius must be at least 4 window radii")
    mean, labels, entries = _draw(meas, u_max, rng)
    tau, flat, offs = _run(window, M, labels, entries, rng, record)
    return TrajectorySoup(
        window=window,
        guard=origin_box(M, window.d),
        u_max=float(u_max),
        labels=labels,
        entries=entries,
        trace_sites=flat,
        trace_offsets=offs,
        tau=tau,
        cap_estimate=est,
        intensity=mean,
        seed=seed,
        stream=stream,
    )


def first_visit_labels(meas: EquilibriumMeasure, window: LatticeBox, u_max: float, rng):
    """Label map and trajectory count of one soup, without storing traces."""
    mean, labels, entries = _draw(meas, u_max, rng)
    tau, _, _ = _run(window, meas.escape_radius, labels, entries, rng, False)
    return tau, len(labels)


def occupancy_at_level(soup: TrajectorySoup, u: float) -> OccupancyGrid:
    if u < 0:
        raise ValueError("level must be nonnegative")
    if u > soup.u_max:
        raise ValueError(f"level {u} exceeds the soup's u_max={soup.u_max}")
    W = soup.window.side
    occ = (soup.tau <= u).reshape((W,) * soup.window.d)
    return OccupancyGrid(soup.window, float(u), occ)


_NEIGHBOURS = {}


def cluster_report(grid: OccupancyGrid, L: int) -> ClusterReport:
    """Nearest-neighbour vacant components and the crossing event 0 <-> dB_L."""
    N = grid.window.radius
    d = grid.window.d
    if not 0 <= L <= N:
        raise ValueError(f"probe radius {L} must lie in [0, {N}]")
    if d not in _NEIGHBOURS:
        _NEIGHBOURS[d] = ndimage.generate_binary_structure(d, 1)
    labels, n = ndimage.label(grid.vacant, structure=_NEIGHBOURS[d])
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    o = labels[(N,) * d]
    connected = False
    if o:
        geo = window_geometry(N, d)
        connected = bool(np.any(geo.rad[labels.ravel() == o] >= L))
    return ClusterReport(labels, sizes, bool(o), connected, int(L))


# --- binary dump ------------------------------------------------------------


def _runs(idx: np.ndarray) -> np.ndarray:
    s = np.sort(idx)
    if len(s) == 0:
        return np.zeros((0, 2), np.uint64)
    brk = np.flatnonzero(np.diff(s) != 1) + 1
    starts = s[np.r_[0, brk]]
    lens = np.diff(np.r_[0, brk, len(s)])
    return np.stack([starts, lens], axis=1).astype("<u8")


def dump_soup(soup: TrajectorySoup, fh) -> None:
    """Write a soup in the little-endian binary format; ``fh`` is a path or binary file."""
    if isinstance(fh, (str, bytes)) or hasattr(fh, "__fspath__"):
        with open(fh, "wb") as f:
            return dump_soup(soup, f)
    est = soup.cap_estimate
    stream = (soup.stream or "").encode()
    fh.write(DUMP_MAGIC)
    fh.write(struct.pack("<QQQQd", DUMP_VERSION, soup.window.d, soup.window.radius, soup.guard.radius, soup.u_max))
    fh.write(struct.pack("<ddddQ", est.value, est.stderr, est.killed_value, soup.intensity, est.samples))
    fh.write(struct.pack("<qQ", -1 if soup.seed is None else soup.seed, len(stream)))
    fh.write(stream)
    fh.write(struct.pack("<Q", soup.count))
    for i in range(soup.count):
        runs = _runs(soup.trace_indices(i))
        fh.write(struct.pack("<d", soup.labels[i]))
        fh.write(soup.entries[i].astype("<i8").tobytes())
        fh.write(struct.pack("<Q", len(runs)))
        fh.write(runs.tobytes())


def load_soup(fh) -> TrajectorySoup:
    """Read a soup written by ``dump_soup``; traces come back as sorted site sets."""
    if isinstance(fh, (str, bytes)) or hasattr(fh, "__fspath__"):
        with open(fh, "rb") as f:
            return load_soup(io.BytesIO(f.read()))

    def read(fmt):
        return struct.unpack(fmt, fh.read(struct.calcsize(fmt)))

    if fh.read(8) != DUMP_MAGIC:
        raise ValueError("not a soup dump")
    version, d, N, M, u_max = read("<QQQQd")
    if version != DUMP_VERSION:
        raise ValueError(f"unsupported soup dump version {version}")
    cap, cap_se, killed, intensity, samples = read("<ddddQ")
    seed, slen = read("<qQ")
    stream = fh.read(slen).decode() or None
    (K,) = read("<Q")
    labels = np.empty(K)
    entries = np.empty((K, d), np.int64)
    offs = np.zeros(K + 1, np.int64)
    chunks = []
    for i in range(K):
        (labels[i],) = read("<d")
        entries[i] = np.frombuffer(fh.read(8 * d), "<i8")
        (nr,) = read("<Q")
        runs = np.frombuffer(fh.read(16 * nr), "<u8").reshape(nr, 2).astype(np.int64)
        sites = np.concatenate([np.arange(s, s + n) for s, n in runs]) if nr else np.zeros(0, np.int64)
        chunks.append(sites)
        offs[i + 1] = offs[i] + len(sites)
    window = origin_box(N, d)
    flat = np.concatenate(chunks) if chunks else np.zeros(0, np.int64)
    tau = np.full(window.size, np.inf)
    # labels ascend, so assigning in reverse leaves the smallest label per site
    for i in range(K - 1, -1, -1):
        tau[chunks[i]] = labels[i]
    est = PotentialEstimate(cap, cap_se, samples, M, killed_value=killed)
    return TrajectorySoup(
        window, origin_box(M, d), u_max, labels, entries, flat, offs, tau, est, intensity, None if seed < 0 else seed, stream
    )
