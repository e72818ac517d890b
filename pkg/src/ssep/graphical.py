"""Harris graphical construction on a finite torus.

Every unordered pair ``{x, y}`` with ``p(x, y) > 0`` carries a Poisson clock
of rate ``p(x, y)`` (tag ``N``) and, in coupling mode, an independent second
clock of the same rate (tag ``N0``). The stirring maps ``xi^s_t`` are built
from the ``N`` rings in a window with the argument-side update
``xi <- xi o (x y)``, which gives the cocycle

    xi^s_{t+u} = xi^s_t o xi^{s+t}_u,

and the exclusion process ``eta_t(x) = eta(xi^0_t(x))``. Dual walks
``X^{x,t}_s = xi^{t-s}_s(x)`` are read off the same realization by scanning
the rings backward from time ``t``.

Sites are flat torus indices (``np.ravel_multi_index`` over ``(L,)*d``).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import (
    DomainMismatch,
    DuplicateSites,
    HorizonTooLarge,
    PreconditionError,
    WindowOutOfRange,
)
from .kernel import Kernel
from .measures import LatticeConfiguration

__all__ = [
    "TAG_N",
    "TAG_N0",
    "ClockStream",
    "DualPath",
    "StirringMap",
    "dual_walks",
    "evolve_configuration",
    "sample_clock_stream",
    "stirring_map",
    "torus_edges",
]

TAG_N = 0
TAG_N0 = 1
DEFAULT_MAX_EVENTS = 20_000_000


def torus_edges(kernel: Kernel, L: int):
    """Unordered pairs ``(a, b)`` of flat sites with their rates ``p(a, b)``.

    Rates of displacements that wrap onto the same pair are added; with
    ``L > 2 * radius`` that never happens, and smaller tori are rejected.
    """
    if L <= 2 * kernel.radius:
        raise PreconditionError("torus side must exceed twice the kernel radius")
    d = kernel.d
    coords = np.stack(np.unravel_index(np.arange(L ** d), (L,) * d), axis=-1)
    acc = {}
    for z, r in kernel.half_support():
        b = np.ravel_multi_index(tuple(np.mod(coords[:, i] + z[i], L) for i in range(d)), (L,) * d)
        for a_, b_ in zip(range(L ** d), b.tolist()):
            key = (a_, b_) if a_ < b_ else (b_, a_)
            acc[key] = acc.get(key, 0.0) + r
    keys = sorted(acc)
    a = np.array([k[0] for k in keys], dtype=np.int64)
    b = np.array([k[1] for k in keys], dtype=np.int64)
    rates = np.array([acc[k] for k in keys])
    return a, b, rates


@dataclass(frozen=True, eq=False)
class ClockStream:
    """A realized set of Poisson rings on the torus over ``(0, T]``.

    ``times`` is nondecreasing; equal times (a floating-point accident) keep
    their generation order. ``a < b`` are the flat sites of the ringing pair.
    """

    L: int
    d: int
    kernel: Kernel
    T: float
    seed: object
    times: np.ndarray
    a: np.ndarray
    b: np.ndarray
    tags: np.ndarray

    def __len__(self):
        return self.times.size

    @property
    def n_sites(self):
        return self.L ** self.d

    def window(self, s, t, tag=TAG_N):
        """Index range of ``tag`` rings with time in ``(s, s + t]``."""
        lo = np.searchsorted(self.times, s, side="right")
        hi = np.searchsorted(self.times, s + t, side="right")
        idx = np.arange(lo, hi)
        if tag is not None:
            idx = idx[self.tags[idx] == tag]
        return idx

    def to_csv(self, path):
        """Write ``time,x,y,tag`` rows (times in shortest round-trip form)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "x", "y", "tag"])
            for t, a, b, g in zip(self.times.tolist(), self.a.tolist(), self.b.tolist(), self.tags.tolist()):
                w.writerow([repr(t), a, b, "N" if g == TAG_N else "N0"])


def sample_clock_stream(kernel: Kernel, L: int, T: float, seed, with_N0: bool = False,
                        max_events: int = DEFAULT_MAX_EVENTS) -> ClockStream:
    """Independent Poisson clocks of rate ``p(x, y)`` on every torus pair.

    Counts are drawn per pair, ring times uniformly within ``(0, T]`` and all
    rings merged by a stable sort, so the result is an exact sample and a
    pure function of ``seed``.
    """
    if T < 0:
        raise ValueError("horizon must be nonnegative")
    a, b, rates = _edges_cached(kernel, L)
    n_tags = 2 if with_N0 else 1
    expected = n_tags * T * rates.sum()
    if expected > max_events:
        raise HorizonTooLarge(f"about {expected:.3g} rings expected, budget {max_events}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    parts_t, parts_a, parts_b, parts_g = [], [], [], []
    for tag in range(n_tags):
        counts = rng.poisson(rates * T)
        tot = int(counts.sum())
        parts_t.append(T * (1.0 - rng.random(tot)))  # in (0, T]
        parts_a.append(np.repeat(a, counts))
        parts_b.append(np.repeat(b, counts))
        parts_g.append(np.full(tot, tag, dtype=np.int8))
    times = np.concatenate(parts_t)
    order = np.argsort(times, kind="stable")
    return ClockStream(
        L=L, d=kernel.d, kernel=kernel, T=float(T),
        seed=None if isinstance(seed, np.random.Generator) else seed,
        times=times[order],
        a=np.concatenate(parts_a)[order],
        b=np.concatenate(parts_b)[order],
        tags=np.concatenate(parts_g)[order],
    )


_EDGE_CACHE: dict = {}


def _edges_cached(kernel, L):
    key = (id(kernel), L)
    hit = _EDGE_CACHE.get(key)
    if hit is None or hit[0] is not kernel:
        hit = (kernel, torus_edges(kernel, L))
        _EDGE_CACHE[key] = hit
    return hit[1]


@dataclass(frozen=True, eq=False)
class StirringMap:
    """``xi^s_t`` as a forward image table with its inverse."""

    s: float
    t: float
    image: np.ndarray
    inverse: np.ndarray
    n_events: int

    def __call__(self, x):
        return self.image[x]

    def sign(self) -> int:
        """Permutation sign from its cycle decomposition."""
        seen = np.zeros(self.image.size, dtype=bool)
        cycles = 0
        for i in range(self.image.size):
            if not seen[i]:
                cycles += 1
                j = i
                while not seen[j]:
                    seen[j] = True
                    j = self.image[j]
        return -1 if (self.image.size - cycles) % 2 else 1

    def compose(self, other: StirringMap) -> StirringMap:
        """``self o other`` (``(f o g)(z) = f(g(z))``)."""
        img = self.image[other.image]
        inv = np.empty_like(img)
        inv[img] = np.arange(img.size)
        return StirringMap(self.s, self.t + other.t, img, inv, self.n_events + other.n_events)


def stirring_map(c: ClockStream, s: float, t: float, check: bool = False) -> StirringMap:
    """``xi^s_t``: apply ``xi <- xi o (x y)`` for each ``N`` ring in ``(s, s+t]``."""
    if s < 0 or t < 0 or s + t > c.T * (1 + 1e-15):
        raise WindowOutOfRange(f"window ({s}, {s + t}] outside (0, {c.T}]")
    idx = c.window(s, t)
    xi = list(range(c.n_sites))
    for a, b in zip(c.a[idx].tolist(), c.b[idx].tolist()):
        xi[a], xi[b] = xi[b], xi[a]
    img = np.array(xi, dtype=np.int64)
    inv = np.empty_like(img)
    inv[img] = np.arange(img.size)
    if check and not np.array_equal(np.sort(img), np.arange(img.size)):
        raise AssertionError("stirring map is not a bijection")
    return StirringMap(float(s), float(t), img, inv, int(idx.size))


def evolve_configuration(eta: LatticeConfiguration, c: ClockStream, t: float) -> LatticeConfiguration:
    """``eta_t(x) = eta(xi^0_t(x))`` on the stream's torus."""
    if eta.kind != "explicit" or eta.L != c.L or eta.d != c.d:
        raise DomainMismatch("configuration must be an explicit array on the stream's torus")
    xi = stirring_map(c, 0.0, t)
    flat = eta.array.ravel()[xi.image]
    return LatticeConfiguration.explicit(flat.reshape(eta.array.shape))


@dataclass(frozen=True, eq=False)
class DualPath:
    """Piecewise-constant path ``s -> X^{x,t}_s`` on ``[0, t]``.

    ``positions[k]`` holds on ``[jumps[k-1], jumps[k])`` with ``jumps[-1]``
    read as ``0`` and the last position held up to ``t``.
    """

    start: int
    t: float
    jumps: np.ndarray
    positions: np.ndarray

    @property
    def end(self) -> int:
        return int(self.positions[-1])

    def at(self, s) -> int:
        k = int(np.searchsorted(self.jumps, s, side="right"))
        return int(self.positions[k])


def _site_event_index(c: ClockStream, idx):
    # CSR over sites: which of the selected rings touch each site (time order)
    ends = np.concatenate([c.a[idx], c.b[idx]])
    ev = np.concatenate([idx, idx])
    order = np.lexsort((ev, ends))
    ends, ev = ends[order], ev[order]
    ptr = np.searchsorted(ends, np.arange(c.n_sites + 1))
    return ptr, ev


def dual_walks(c: ClockStream, t: float, sites, check: bool = True):
    """Dual exclusion walks ``X^{x_i, t}_s`` for ``s`` in ``[0, t]``.

    The walkers scan the ``N`` rings of ``(0, t]`` backward in time; a walker
    sitting at an end of a ringing pair moves to the other end. Only rings that
    touch a walker are visited.
    """
    sites = [int(x) for x in np.atleast_1d(sites)]
    if len(set(sites)) != len(sites):
        raise DuplicateSites("dual walk starting sites must be distinct")
    if t < 0 or t > c.T * (1 + 1e-15):
        raise WindowOutOfRange(f"t={t} outside [0, {c.T}]")
    idx = c.window(0.0, t)
    ptr, ev = _site_event_index(c, idx)
    n = len(sites)
    pos = list(sites)
    jumps = [[] for _ in range(n)]
    paths = [[x] for x in sites]
    # next ring (in backward order) for each walker: the latest ring index
    # strictly before `cursor` touching its site
    cursor = np.iinfo(np.int64).max

    def latest_before(site, bound):
        lo, hi = ptr[site], ptr[site + 1]
        k = np.searchsorted(ev[lo:hi], bound, side="left") - 1
        return int(ev[lo + k]) if k >= 0 else -1

    while True:
        cand = [latest_before(p, cursor) for p in pos]
        e = max(cand)
        if e < 0:
            break
        cursor = e
        a, b = int(c.a[e]), int(c.b[e])
        s = t - float(c.times[e])
        for i in range(n):
            if pos[i] == a or pos[i] == b:
                pos[i] = b if pos[i] == a else a
                jumps[i].append(s)
                paths[i].append(pos[i])
        if check and len(set(pos)) != n:
            raise AssertionError("dual walkers collided")
    return [
        DualPath(x, float(t), np.array(j, dtype=float), np.array(p, dtype=np.int64))
        for x, j, p in zip(sites, jumps, paths)
    ]
