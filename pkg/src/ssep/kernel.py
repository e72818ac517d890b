"""Jump kernels and single-walk transition distributions.

A :class:`Kernel` is a symmetric, translation-invariant jump law ``p(z)`` on
``Z^d`` with finite support, total rate one and a support that generates the
whole lattice. Time-``t`` transition probabilities ``p_t(0, x)`` are computed by
uniformization of the rate-one jump chain,

    p_t = sum_k e^{-t} t^k / k! * p^{*k},

truncated where the Poisson tail drops below the requested tolerance. The
dropped Poisson mass (plus, on ``Z^d``, whatever mass walked out of the
computational box) is returned as a certified ``tail_bound``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import NamedTuple

import numpy as np

from ._poisson import DEFAULT_MAX_TERMS, poisson_cutoff
from .errors import (
    AsymmetricKernel,
    Decomposable,
    InvalidKernel,
    NotNormalized,
    ZeroDisplacement,
)

__all__ = [
    "GradientSums",
    "Kernel",
    "TransitionDistribution",
    "gradient_sums",
    "kernel_from_json",
    "make_kernel",
    "nearest_neighbor",
    "sample_increments",
    "sample_walk_increment",
    "transition_distribution",
]

_RATE_ATOL = 1e-12


def _int_det(rows):
    """Exact integer determinant (Bareiss fraction-free elimination)."""
    m = [list(r) for r in rows]
    n = len(m)
    sign, prev = 1, 1
    for k in range(n - 1):
        if m[k][k] == 0:
            for r in range(k + 1, n):
                if m[r][k] != 0:
                    m[k], m[r] = m[r], m[k]
                    sign = -sign
                    break
            else:
                return 0
        for i in range(k + 1, n):
            for j in range(k + 1, n):
                m[i][j] = (m[i][j] * m[k][k] - m[i][k] * m[k][j]) // prev
        prev = m[k][k]
    return sign * m[n - 1][n - 1]


def _generates_lattice(vectors, d):
    # The subgroup generated by the vectors is Z^d iff the gcd of all d x d
    # minors equals 1.
    vecs = [tuple(int(c) for c in v) for v in vectors]
    g = 0
    for combo in combinations(vecs, d):
        g = math.gcd(g, abs(_int_det(combo)))
        if g == 1:
            return True
    return False


@dataclass(frozen=True, eq=False)
class Kernel:
    """Validated symmetric jump kernel with finite support.

    Build instances with :func:`make_kernel`; the constructor does not validate.
    """

    d: int
    displacements: np.ndarray  # (m, d) int64
    rates: np.ndarray  # (m,) float64
    second_moment: float
    _lookup: dict = field(repr=False, default_factory=dict)

    @property
    def radius(self) -> int:
        """Largest sup-norm length of a support displacement."""
        return int(np.abs(self.displacements).max())

    @property
    def max_rate(self) -> float:
        return float(self.rates.max())

    def rate(self, z) -> float:
        """``p(z)``; zero off the support."""
        return self._lookup.get(tuple(int(c) for c in np.atleast_1d(z)), 0.0)

    def half_support(self):
        """One representative per ``{z, -z}`` class, with its rate."""
        out = []
        for z, r in zip(self.displacements, self.rates):
            if tuple(z) > tuple(-z):
                out.append((z.copy(), float(r)))
        return out

    def torus_rates(self, L: int) -> np.ndarray:
        """``p_L(0, x)`` on the torus ``(Z/LZ)^d`` with wrap-around rates added."""
        out = np.zeros((L,) * self.d)
        for z, r in zip(self.displacements, self.rates):
            out[tuple(np.mod(z, L))] += r
        return out

    def to_json(self) -> dict:
        return {
            "d": self.d,
            "support": [[z.tolist(), float(r)] for z, r in zip(self.displacements, self.rates)],
        }

    def __repr__(self):
        sup = ", ".join(f"{tuple(z.tolist())}: {r:g}" for z, r in zip(self.displacements, self.rates))
        return f"Kernel(d={self.d}, {{{sup}}})"


def make_kernel(d, support) -> Kernel:
    """Validate a kernel given as ``[(z, rate), ...]``.

    Raises
    ------
    ZeroDisplacement
        ``0`` appears in the support.
    AsymmetricKernel
        ``p(z) != p(-z)`` for some support element.
    NotNormalized
        Rates do not sum to one (within 1e-12).
    Decomposable
        The support does not generate ``Z^d``.
    """
    d = int(d)
    if d < 1:
        raise InvalidKernel("dimension must be positive")
    support = list(support)
    if not support:
        raise InvalidKernel("support must be nonempty")
    lookup = {}
    for z, r in support:
        zt = tuple(int(c) for c in np.atleast_1d(z))
        if len(zt) != d:
            raise InvalidKernel(f"displacement {zt} is not {d}-dimensional")
        if all(c == 0 for c in zt):
            raise ZeroDisplacement("0 may not be in the support")
        r = float(r)
        if not (r > 0.0) or r > 1.0 or not math.isfinite(r):
            raise InvalidKernel(f"rate {r} for {zt} must lie in (0, 1]")
        if zt in lookup:
            raise InvalidKernel(f"displacement {zt} listed twice")
        lookup[zt] = r
    for zt, r in lookup.items():
        neg = tuple(-c for c in zt)
        if neg not in lookup or abs(lookup[neg] - r) > _RATE_ATOL:
            raise AsymmetricKernel(f"p{zt} = {r} but p{neg} = {lookup.get(neg, 0.0)}")
    total = math.fsum(lookup.values())
    if abs(total - 1.0) > _RATE_ATOL:
        raise NotNormalized(f"rates sum to {total!r}, not 1")
    if not _generates_lattice(lookup.keys(), d):
        raise Decomposable("support does not generate Z^d")
    keys = sorted(lookup)
    disp = np.array(keys, dtype=np.int64).reshape(len(keys), d)
    rates = np.array([lookup[k] for k in keys])
    m2 = math.fsum(r * sum(c * c for c in k) for k, r in zip(keys, rates))
    return Kernel(d=d, displacements=disp, rates=rates, second_moment=m2, _lookup=lookup)


def nearest_neighbor(d=1) -> Kernel:
    """Rate-one nearest-neighbour kernel, ``p(+-e_i) = 1/(2d)``."""
    sup = []
    for i in range(d):
        e = [0] * d
        e[i] = 1
        sup.append((e, 1.0 / (2 * d)))
        sup.append(([-c for c in e], 1.0 / (2 * d)))
    return make_kernel(d, sup)


def kernel_from_json(obj) -> Kernel:
    """Parse ``{"d": 1, "support": [[[1], 0.5], [[-1], 0.5]]}``.

    The shortcut ``{"d": 2, "nearest_neighbor": true}`` is also accepted.
    """
    d = int(obj["d"])
    if obj.get("nearest_neighbor"):
        return nearest_neighbor(d)
    return make_kernel(d, [(z, r) for z, r in obj["support"]])


@dataclass(frozen=True, eq=False)
class TransitionDistribution:
    """``p_t(0, .)`` either on a torus or on a box of ``Z^d``.

    On a torus ``probs`` has shape ``(L,)*d`` and is indexed by ``x mod L``.
    On ``Z^d`` it has shape ``(2R+1,)*d`` and index ``x + R``; every stored
    entry is a lower bound for the true probability and the total missing
    mass is at most ``tail_bound``.
    """

    t: float
    d: int
    probs: np.ndarray
    tail_bound: float
    L: int | None = None
    radius: int | None = None

    @property
    def on_torus(self) -> bool:
        return self.L is not None

    @property
    def mass(self) -> float:
        return math.fsum(self.probs.ravel())

    def prob(self, x) -> np.ndarray:
        """Vectorized lookup; ``x`` has shape ``(..., d)`` (or ``(...)`` when d=1)."""
        x = np.asarray(x, dtype=np.int64)
        if self.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        if self.on_torus:
            idx = tuple(np.mod(x[..., i], self.L) for i in range(self.d))
            return self.probs[idx]
        R = self.radius
        inside = np.all(np.abs(x) <= R, axis=-1)
        xc = np.clip(x, -R, R) + R
        vals = self.probs[tuple(xc[..., i] for i in range(self.d))]
        return np.where(inside, vals, 0.0)

    def centered(self) -> np.ndarray:
        """Array centred on the origin (torus arrays are rolled by ``L//2``)."""
        if not self.on_torus:
            return self.probs
        return np.roll(self.probs, (self.L // 2,) * self.d, axis=tuple(range(self.d)))


def _box_shift_add(out, v, z, rate):
    # out[x + z] += rate * v[x], zero outside the box
    src, dst = [], []
    for c in z:
        c = int(c)
        if c >= 0:
            src.append(slice(0, v.shape[0] - c))
            dst.append(slice(c, None))
        else:
            src.append(slice(-c, None))
            dst.append(slice(0, v.shape[0] + c))
    out[tuple(dst)] += rate * v[tuple(src)]


def _uniformize_torus(kernel, t, L, tol, max_terms):
    K, w, tail = poisson_cutoff(t, tol, max_terms)
    axes = tuple(range(kernel.d))
    v = np.zeros((L,) * kernel.d)
    v[(0,) * kernel.d] = 1.0
    acc = w[0] * v
    for k in range(1, K + 1):
        nxt = np.zeros_like(v)
        for z, r in zip(kernel.displacements, kernel.rates):
            nxt += r * np.roll(v, tuple(int(c) for c in z), axis=axes)
        v = nxt
        acc += w[k] * v
    return acc, tail


def _uniformize_box(kernel, t, R, tol, max_terms):
    K, w, tail = poisson_cutoff(t, tol, max_terms)
    d = kernel.d
    n = 2 * R + 1
    v = np.zeros((n,) * d)
    v[(R,) * d] = 1.0
    acc = w[0] * v
    escaped = 0.0
    # mask of cells whose z-neighbour leaves the box, one per displacement
    leave = []
    for z in kernel.displacements:
        m = np.zeros((n,) * d, dtype=bool)
        for i, c in enumerate(z):
            sl = [slice(None)] * d
            c = int(c)
            if c > 0:
                sl[i] = slice(n - c, None)
            elif c < 0:
                sl[i] = slice(0, -c)
            else:
                continue
            m[tuple(sl)] = True
        leave.append(m)
    lost_so_far = 0.0
    for k in range(1, K + 1):
        nxt = np.zeros_like(v)
        lost = 0.0
        for z, r, m in zip(kernel.displacements, kernel.rates, leave):
            _box_shift_add(nxt, v, z, r)
            lost += r * math.fsum(v[m])
        v = nxt
        lost_so_far += lost
        acc += w[k] * v
        escaped += w[k] * lost_so_far
    # mass walked out after step K is covered by the Poisson tail
    return acc, tail, escaped, K


def transition_distribution(
    kernel: Kernel,
    t: float,
    *,
    L: int | None = None,
    tol: float = 1e-12,
    max_terms: int = DEFAULT_MAX_TERMS,
) -> TransitionDistribution:
    """Transition probabilities ``p_t(0, .)`` of the rate-one ``kernel`` walk.

    Parameters
    ----------
    L
        Torus side. When given, the walk lives on ``(Z/LZ)^d`` and the result
        is exact up to the Poisson truncation. Otherwise it lives on ``Z^d``
        and is stored on a box large enough that the mass leaving it is also
        below ``tol``.
    tol
        Certified bound on the total missing probability.
    """
    t = float(t)
    if t < 0:
        raise ValueError("time must be nonnegative")
    d = kernel.d
    if L is not None:
        if L < 3:
            raise ValueError("torus side must be at least 3")
        if L <= 2 * kernel.radius:
            raise ValueError("torus side must exceed twice the kernel radius")
        probs, tail = _uniformize_torus(kernel, t, int(L), tol, max_terms)
        return TransitionDistribution(t=t, d=d, probs=probs, tail_bound=tail, L=int(L))
    if not (0 < tol <= 1e-6):
        raise ValueError("tol must lie in (0, 1e-6] on Z^d")
    if t == 0.0:
        probs = np.ones((1,) * d)
        return TransitionDistribution(t=t, d=d, probs=probs, tail_bound=0.0, radius=0)
    K, _, _ = poisson_cutoff(t, tol / 2, max_terms)
    r = kernel.radius
    s2 = max(float(np.dot(kernel.rates, kernel.displacements[:, i] ** 2)) for i in range(d))
    R = math.ceil(1.25 * math.sqrt(2.0 * t * s2 * math.log(4.0 * d / tol)) + 4 * r + 2)
    while True:
        R = min(R, K * r)
        probs, tail, escaped, _ = _uniformize_box(kernel, t, R, tol / 2, max_terms)
        if escaped <= tol / 2 or R >= K * r:
            break
        R *= 2
    return TransitionDistribution(
        t=t, d=d, probs=probs, tail_bound=float(tail + escaped), radius=R
    )


class GradientSums(NamedTuple):
    s1: float
    s2: float
    error_bound: float


def gradient_sums(kernel: Kernel, t: float, axis: int = 0, tol: float = 1e-11) -> GradientSums:
    """First-difference sums of ``p_t(0, .)`` along lattice direction ``axis``.

    ``s1 = sum_x |p_t(x + e_i) - p_t(x)|`` and ``s2`` is the same sum of
    squares, both on ``Z^d``. ``error_bound`` is ``4 * tail_bound``.
    """
    if tol > 1e-10:
        raise ValueError("gradient sums need tol <= 1e-10")
    td = transition_distribution(kernel, t, tol=tol)
    pad = [(0, 0)] * kernel.d
    pad[axis] = (1, 1)
    p = np.pad(td.probs, pad)
    diff = np.diff(p, axis=axis)
    s1 = math.fsum(np.abs(diff).ravel())
    s2 = math.fsum((diff * diff).ravel())
    return GradientSums(s1, s2, 4.0 * float(td.tail_bound))


def _cdf(kernel):
    c = np.cumsum(kernel.rates)
    c[-1] = 1.0
    return c


def sample_walk_increment(kernel: Kernel, rng: np.random.Generator) -> np.ndarray:
    """One displacement drawn from ``p`` by CDF inversion."""
    j = int(np.searchsorted(_cdf(kernel), rng.random(), side="right"))
    return kernel.displacements[j].copy()


def sample_increments(kernel: Kernel, rng: np.random.Generator, size) -> np.ndarray:
    """``size`` displacements, shape ``(size, d)``."""
    j = np.searchsorted(_cdf(kernel), rng.random(size), side="right")
    return kernel.displacements[j]

