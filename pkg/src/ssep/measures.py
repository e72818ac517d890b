"""Initial configurations and initial measures.

Configurations are deterministic occupation rules ``eta: Z^d -> {0, 1}``;
measures are translation-invariant laws with closed-form cylinder
probabilities ``nu{eta(y_1) = ... = eta(y_n) = 1}``:

* Bernoulli product measures,
* local-rule fields: ``eta(x) = rule(b restricted to x + [-R, R]^d)`` for an
  i.i.d. fair-bit field ``b``. Sites farther than ``2R`` apart (sup norm)
  read disjoint bits, so correlations vanish exactly beyond that distance,
* point masses at a configuration.
"""

from __future__ import annotations

import itertools
from collections.abc import Callable
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DomainMismatch, PreconditionError, WindowTooLarge

__all__ = [
    "LOCAL_RULES",
    "Bernoulli",
    "BoundProfile",
    "InitialMeasure",
    "LatticeConfiguration",
    "LocalRuleField",
    "PointMass",
    "XphiReport",
    "check_Xphi_membership",
    "configuration_from_json",
    "correlation_table",
    "cylinder_prob",
    "measure_from_json",
    "power_profile",
    "sample_configuration",
    "torus_representatives",
]

MAX_WINDOW_BITS = 22


def torus_representatives(L):
    """Integer representative in ``(-L/2, L/2]`` of each torus coordinate."""
    i = np.arange(L)
    return np.where(i <= L // 2, i, i - L)


def _as_sites(sites, d):
    x = np.asarray(sites, dtype=np.int64)
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if x.shape[-1] != d:
        raise ValueError(f"sites must have trailing dimension {d}")
    return x


@dataclass(frozen=True, eq=False)
class LatticeConfiguration:
    """A configuration ``eta`` in ``{0,1}^{Z^d}``.

    ``kind`` is one of ``"explicit"`` (a torus array, extended periodically
    when evaluated on ``Z^d``), ``"step"`` (``eta(x) = 1`` iff
    ``x[axis] >= threshold``), ``"periodic"`` (a pattern repeated with the
    pattern's shape as period) or ``"constant"``.
    """

    kind: str
    d: int
    array: np.ndarray | None = None
    axis: int = 0
    threshold: int = 1
    value: int = 0

    @classmethod
    def explicit(cls, array):
        a = np.asarray(array)
        if a.size == 0 or not np.all((a == 0) | (a == 1)):
            raise ValueError("explicit configuration entries must be 0 or 1")
        if len(set(a.shape)) != 1:
            raise ValueError("torus arrays must have equal sides")
        a = a.astype(np.uint8)
        a.setflags(write=False)
        return cls("explicit", a.ndim, array=a)

    @classmethod
    def from_string(cls, bits: str):
        """1-d explicit configuration from a string such as ``"111000"``."""
        return cls.explicit([int(c) for c in bits])

    @classmethod
    def step(cls, d=1, axis=0, threshold=1):
        return cls("step", d, axis=axis, threshold=threshold)

    @classmethod
    def periodic(cls, pattern):
        a = np.asarray(pattern)
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("pattern entries must be 0 or 1")
        a = a.astype(np.uint8)
        a.setflags(write=False)
        return cls("periodic", a.ndim, array=a)

    @classmethod
    def constant(cls, value, d=1):
        if value not in (0, 1):
            raise ValueError("constant configuration must be 0 or 1")
        return cls("constant", d, value=int(value))

    @property
    def L(self):
        if self.kind != "explicit":
            raise DomainMismatch("only explicit configurations live on a torus")
        return self.array.shape[0]

    @property
    def is_constant(self):
        if self.kind == "constant":
            return True
        if self.kind in ("explicit", "periodic"):
            return bool(self.array.min() == self.array.max())
        return False

    def __call__(self, sites) -> np.ndarray:
        x = _as_sites(sites, self.d)
        if self.kind == "constant":
            return np.full(x.shape[:-1], self.value, dtype=np.uint8)
        if self.kind == "step":
            return (x[..., self.axis] >= self.threshold).astype(np.uint8)
        shape = self.array.shape
        idx = tuple(np.mod(x[..., i], shape[i]) for i in range(self.d))
        return self.array[idx]

    def on_torus(self, L) -> LatticeConfiguration:
        """Restriction to the torus window with representatives in ``(-L/2, L/2]``."""
        if self.kind == "explicit":
            if self.L != L:
                raise DomainMismatch(f"configuration lives on L={self.L}, not {L}")
            return self
        if self.kind == "periodic" and any(L % s for s in self.array.shape):
            raise DomainMismatch("torus side must be a multiple of the period")
        reps = torus_representatives(L)
        grids = np.meshgrid(*([reps] * self.d), indexing="ij")
        sites = np.stack(grids, axis=-1)
        return LatticeConfiguration.explicit(self(sites))

    def to_json(self):
        if self.kind == "explicit":
            return {"type": "config", "rule": "explicit", "pattern": self.array.tolist()}
        if self.kind == "periodic":
            return {"type": "config", "rule": "periodic", "pattern": self.array.tolist()}
        if self.kind == "step":
            return {"type": "config", "rule": "step", "d": self.d, "axis": self.axis,
                    "threshold": self.threshold}
        return {"type": "config", "rule": "constant", "d": self.d, "value": self.value}


def configuration_from_json(obj) -> LatticeConfiguration:
    rule = obj["rule"]
    if rule == "step":
        return LatticeConfiguration.step(obj.get("d", 1), obj.get("axis", 0), obj.get("threshold", 1))
    if rule == "periodic":
        return LatticeConfiguration.periodic(obj["pattern"])
    if rule == "explicit":
        return LatticeConfiguration.explicit(obj["pattern"])
    if rule == "constant":
        return LatticeConfiguration.constant(obj["value"], obj.get("d", 1))
    raise ValueError(f"unknown configuration rule {rule!r}")


# -- local rules -------------------------------------------------------------

def _majority(bits):
    return (2 * bits.sum(axis=-1) > bits.shape[-1]).astype(np.uint8)


def _identity(bits):
    return bits[..., bits.shape[-1] // 2].astype(np.uint8)


def _and_all(bits):
    return np.all(bits == 1, axis=-1).astype(np.uint8)


def _or_all(bits):
    return np.any(bits == 1, axis=-1).astype(np.uint8)


# name -> (rule on the flattened window, default range)
LOCAL_RULES: dict[str, tuple[Callable, int]] = {
    "majority3": (_majority, 1),
    "majority": (_majority, 1),
    "identity": (_identity, 0),
    "and": (_and_all, 1),
    "or": (_or_all, 1),
}


class InitialMeasure:
    """Base class; subclasses define sampling and cylinder probabilities."""

    d: int

    @property
    def density(self) -> float:
        raise NotImplementedError

    def sample_torus(self, L, rng, size=None) -> np.ndarray:
        """Raw samples as uint8 arrays of shape ``(L,)*d`` or ``(size, L**d)``."""
        raise NotImplementedError

    def cylinder_prob(self, sites) -> float:
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Bernoulli(InitialMeasure):
    rho: float
    d: int = 1

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("density must lie in [0, 1]")

    @property
    def density(self):
        return float(self.rho)

    def sample_torus(self, L, rng, size=None):
        if size is None:
            return (rng.random((L,) * self.d) < self.rho).astype(np.uint8)
        return (rng.random((size, L ** self.d)) < self.rho).astype(np.uint8)

    def cylinder_prob(self, sites):
        x = _as_sites(sites, self.d).reshape(-1, self.d)
        n = len({tuple(r) for r in x.tolist()})
        return float(self.rho) ** n

    def to_json(self):
        return {"type": "bernoulli", "rho": self.rho, "d": self.d}


@dataclass(frozen=True)
class LocalRuleField(InitialMeasure):
    """``eta(x) = rule(b[x + w], w in [-R, R]^d)`` for i.i.d. fair bits ``b``."""

    rule: str = "majority3"
    R: int = 1
    d: int = 1
    _fn: Callable = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.rule not in LOCAL_RULES:
            raise ValueError(f"unknown local rule {self.rule!r}")
        if self.R < 0:
            raise ValueError("range must be nonnegative")
        object.__setattr__(self, "_fn", LOCAL_RULES[self.rule][0])

    @property
    def offsets(self) -> np.ndarray:
        r = range(-self.R, self.R + 1)
        return np.array(list(itertools.product(r, repeat=self.d)), dtype=np.int64)

    @property
    def density(self):
        return self.cylinder_prob(np.zeros((1, self.d), dtype=np.int64))

    def sample_torus(self, L, rng, size=None):
        if L < 2 * self.R + 1:
            raise ValueError("torus too small for the rule's window")
        n = 1 if size is None else size
        bits = rng.integers(0, 2, size=(n,) + (L,) * self.d, dtype=np.uint8)
        axes = tuple(range(1, self.d + 1))
        window = np.stack(
            [np.roll(bits, tuple(int(-c) for c in w), axis=axes) for w in self.offsets],
            axis=-1,
        )
        eta = self._fn(window)
        if size is None:
            return eta[0]
        return eta.reshape(n, -1)

    def cylinder_prob(self, sites):
        x = _as_sites(sites, self.d).reshape(-1, self.d)
        uniq = sorted({tuple(r) for r in x.tolist()})
        if not uniq:
            return 1.0
        base = np.min(np.array(uniq), axis=0)
        key = tuple(tuple(int(c) for c in np.array(u) - base) for u in uniq)
        return _local_cylinder(self.rule, self.R, self.d, key)

    def to_json(self):
        return {"type": "local_rule", "rule": self.rule, "range": self.R, "d": self.d}


def _groups(sites, reach):
    # connected components of the "sup-distance <= reach" graph
    n = len(sites)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if max(abs(a - b) for a, b in zip(sites[i], sites[j])) <= reach:
                parent[find(i)] = find(j)
    out = {}
    for i in range(n):
        out.setdefault(find(i), []).append(sites[i])
    return list(out.values())


@lru_cache(maxsize=65536)
def _local_cylinder(rule, R, d, sites):
    fn = LOCAL_RULES[rule][0]
    offs = list(itertools.product(range(-R, R + 1), repeat=d))
    prob = 1.0
    for group in _groups(list(sites), 2 * R):
        cells = sorted({tuple(a + b for a, b in zip(s, o)) for s in group for o in offs})
        m = len(cells)
        if m > MAX_WINDOW_BITS:
            raise WindowTooLarge(f"{m} bits in the dependency window (cap {MAX_WINDOW_BITS})")
        pos = {c: i for i, c in enumerate(cells)}
        assign = ((np.arange(2 ** m)[:, None] >> np.arange(m)) & 1).astype(np.uint8)
        occ = np.ones(2 ** m, dtype=np.uint8)
        for s in group:
            cols = [pos[tuple(a + b for a, b in zip(s, o))] for o in offs]
            occ &= fn(assign[:, cols])
        prob *= occ.sum() / 2.0 ** m
    return float(prob)


@dataclass(frozen=True, eq=False)
class PointMass(InitialMeasure):
    config: LatticeConfiguration

    @property
    def d(self):
        return self.config.d

    @property
    def density(self):
        c = self.config
        if c.kind == "constant":
            return float(c.value)
        if c.kind in ("explicit", "periodic"):
            return float(c.array.mean())
        return 0.5  # step: asymptotic density of the two half-spaces

    def sample_torus(self, L, rng, size=None):
        a = self.config.on_torus(L).array
        if size is None:
            return a.copy()
        return np.broadcast_to(a.ravel(), (size, a.size)).copy()

    def cylinder_prob(self, sites):
        return float(np.all(self.config(sites)))

    def to_json(self):
        return self.config.to_json()


def measure_from_json(obj) -> InitialMeasure:
    """``{"type": "bernoulli", "rho": 0.5}``, ``{"type": "local_rule", ...}``
    or ``{"type": "config", ...}``."""
    kind = obj["type"]
    if kind == "bernoulli":
        return Bernoulli(float(obj["rho"]), int(obj.get("d", 1)))
    if kind == "local_rule":
        rule = obj.get("rule", "majority3")
        R = int(obj.get("range", LOCAL_RULES[rule][1]))
        return LocalRuleField(rule, R, int(obj.get("d", 1)))
    if kind == "config":
        return PointMass(configuration_from_json(obj))
    raise ValueError(f"unknown measure type {kind!r}")


def sample_configuration(measure: InitialMeasure, L: int, seed) -> LatticeConfiguration:
    """Exact sample of ``measure`` on the torus of side ``L``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return LatticeConfiguration.explicit(measure.sample_torus(L, rng))


def cylinder_prob(measure: InitialMeasure, sites) -> float:
    """Probability under ``measure`` that every listed site is occupied."""
    return measure.cylinder_prob(sites)


def correlation_table(measure: InitialMeasure, max_distance: int, axis: int = 0) -> np.ndarray:
    """``cov(eta(0), eta(r e_axis))`` for ``r = 0..max_distance``."""
    if isinstance(measure, PointMass):
        raise PreconditionError("correlation table needs a random translation-invariant measure")
    rho = measure.density
    out = np.empty(max_distance + 1)
    out[0] = rho * (1.0 - rho)
    for r in range(1, max_distance + 1):
        x = np.zeros((2, measure.d), dtype=np.int64)
        x[1, axis] = r
        out[r] = measure.cylinder_prob(x) - rho * rho
    return out


# -- bound profiles and the X_phi class ---------------------------------------

@dataclass(frozen=True, eq=False)
class BoundProfile:
    """A positive nonincreasing ``phi`` with ``phi(t) <= C0 (1+t)^{-(d+2)/2}``."""

    phi: Callable[[float], float]
    C0: float
    d: int = 1

    def __call__(self, t):
        return self.phi(t)

    def check(self, grid) -> bool:
        g = np.sort(np.asarray(grid, dtype=float))
        vals = np.array([self.phi(t) for t in g])
        if np.any(vals <= 0) or np.any(np.diff(vals) > 0):
            return False
        env = self.C0 * (1.0 + g) ** (-(self.d + 2) / 2.0)
        return bool(np.all(vals <= env * (1 + 1e-12)))


def power_profile(c, exponent=None, d=1) -> BoundProfile:
    """``phi(t) = c (1+t)^{-exponent}``; exponent defaults to ``(d+2)/2``."""
    e = (d + 2) / 2.0 if exponent is None else float(exponent)
    return BoundProfile(lambda t: c * (1.0 + t) ** (-e), C0=c, d=d)


@dataclass
class XphiReport:
    passed: bool
    max_ratio: float
    worst: tuple  # (x, y, t)
    times: list
    n_pairs: int
    L: int

    def to_json(self):
        return {
            "passed": self.passed,
            "max_ratio": self.max_ratio,
            "worst": [list(map(int, self.worst[0])), list(map(int, self.worst[1])), self.worst[2]],
            "grid": {"times": self.times, "pairs": self.n_pairs, "torus_L": self.L},
        }


def check_Xphi_membership(eta, kernel, phi, times, *, L=None, pairs=None, tol=1e-12) -> XphiReport:
    """Sampled certificate of ``|x-y|^-2 (rho_t(x) - rho_t(y))^2 <= phi(t)``.

    ``rho`` is computed exactly on a torus (``eta``'s own, or ``L`` for
    rule-based configurations). ``pairs`` defaults to every nearest-neighbour
    pair of the torus. Only the declared grid is checked.
    """
    from .exact import exact_rho

    if eta.kind != "explicit":
        if L is None:
            raise PreconditionError("rule-based configurations need a torus side L")
        eta = eta.on_torus(L)
    L = eta.L
    d = eta.d
    if pairs is None:
        coords = np.stack(np.meshgrid(*([np.arange(L)] * d), indexing="ij"), -1).reshape(-1, d)
        xs, ys = [], []
        for i in range(d):
            e = np.zeros(d, dtype=np.int64)
            e[i] = 1
            xs.append(coords)
            ys.append(coords + e)
        xs, ys = np.concatenate(xs), np.concatenate(ys)
    else:
        xs = np.array([p[0] for p in pairs], dtype=np.int64).reshape(-1, d)
        ys = np.array([p[1] for p in pairs], dtype=np.int64).reshape(-1, d)
    dist2 = np.sum((xs - ys) ** 2, axis=1).astype(float)
    best = (-1.0, None)
    for t in times:
        rho = exact_rho(kernel, eta, t, tol=tol)
        rx = rho[tuple(np.mod(xs[:, i], L) for i in range(d))]
        ry = rho[tuple(np.mod(ys[:, i], L) for i in range(d))]
        ratio = (rx - ry) ** 2 / dist2 / phi(t)
        j = int(np.argmax(ratio))
        if ratio[j] > best[0]:
            best = (float(ratio[j]), (xs[j], ys[j], float(t)))
    # values within the truncation tolerance of the envelope count as passing
    slack = 4.0 * tol / min(phi(t) for t in times)
    return XphiReport(
        passed=best[0] <= 1.0 + slack,
        max_ratio=best[0],
        worst=best[1],
        times=[float(t) for t in times],
        n_pairs=len(xs),
        L=L,
    )
