"""Certified finite-state oracles on tori.

The unlabeled ``n``-particle exclusion dynamics on ``(Z/LZ)^d`` is a
continuous-time chain on ``n``-subsets; :class:`NParticleGenerator` builds its
sparse generator and evaluates ``P_t(A -> .)`` by uniformization with a
certified Poisson-tail error. On top of it sit exact correlations
``E prod eta_t(x)``, exact densities ``rho^eta_t``, both sides of the
exclusion/independent-walk integration-by-parts identity, the pair sum
controlled by the summable-weight bound and the exclusion/independence
correlation-inequality check.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.special import comb

from ._poisson import DEFAULT_MAX_TERMS, poisson_cutoff
from .errors import (
    DomainMismatch,
    PreconditionError,
    QuadratureNotConverged,
    StateSpaceTooLarge,
)
from .kernel import Kernel, transition_distribution
from .measures import LatticeConfiguration

__all__ = [
    "DEFAULT_STATE_CAP",
    "IdentityResult",
    "NParticleGenerator",
    "correlation_inequality_check",
    "exact_basic_identity",
    "exact_correlation",
    "exact_rho",
    "exact_rho_grid",
    "lemma_bes_sum",
    "n_particle_generator",
    "oracle_record",
    "phi_kernel_moment",
    "phi_power",
]

DEFAULT_STATE_CAP = 200_000
DENSE_ORACLE_CAP = 500


def _site_index(sites, L, d):
    x = np.asarray(sites, dtype=np.int64)
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    return np.ravel_multi_index(tuple(np.mod(x[..., i], L) for i in range(d)), (L,) * d)


def _colex_rank(states, binom):
    # states sorted ascending along axis 1
    r = np.zeros(states.shape[0], dtype=np.int64)
    for i in range(states.shape[1]):
        r += binom[states[:, i], i + 1]
    return r


class NParticleGenerator:
    """Generator of ``n`` unlabeled exclusion walkers on the torus ``(Z/LZ)^d``.

    States are ``n``-subsets of the ``L**d`` sites, stored sorted and indexed by
    colexicographic rank. ``Q[A, B] = p_L(a, b)`` when ``B = A - {a} + {b}``.
    """

    def __init__(self, kernel: Kernel, L: int, n: int, cap: int = DEFAULT_STATE_CAP):
        if L <= 2 * kernel.radius or L < 3:
            raise PreconditionError("torus side must exceed twice the kernel radius (and be >= 3)")
        self.kernel, self.L, self.n, self.d = kernel, int(L), int(n), kernel.d
        N = self.L ** self.d
        if not 1 <= n <= N:
            raise PreconditionError("particle number out of range")
        size = int(comb(N, n, exact=True))
        if size > cap:
            raise StateSpaceTooLarge(f"C({N}, {n}) = {size} states exceeds cap {cap}")
        self.n_sites = N
        self.size = size
        binom = np.zeros((N + 1, n + 1), dtype=np.int64)
        for k in range(n + 1):
            binom[:, k] = [comb(m, k, exact=True) for m in range(N + 1)]
        self._binom = binom
        states = np.array(list(combinations(range(N), n)), dtype=np.int64).reshape(size, n)
        order = np.argsort(_colex_rank(states, binom))
        self.states = states[order]
        self._build()

    def _build(self):
        L, d, n, S = self.L, self.d, self.n, self.size
        coords = np.stack(np.unravel_index(self.states, (L,) * d), axis=-1)  # (S, n, d)
        rows, cols, vals = [], [], []
        for z, r in zip(self.kernel.displacements, self.kernel.rates):
            for k in range(n):
                tgt = np.ravel_multi_index(
                    tuple(np.mod(coords[:, k, i] + z[i], L) for i in range(d)), (L,) * d
                )
                free = np.all(self.states != tgt[:, None], axis=1)
                src = np.flatnonzero(free)
                new = self.states[src].copy()
                new[:, k] = tgt[src]
                new.sort(axis=1)
                rows.append(src)
                cols.append(_colex_rank(new, self._binom))
                vals.append(np.full(src.size, r))
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        off = sp.csr_matrix((vals, (rows, cols)), shape=(S, S))
        off.sum_duplicates()
        self.exit_rates = np.asarray(off.sum(axis=1)).ravel()
        self.rate_matrix = off
        self.uniform_rate = float(self.exit_rates.max()) if S > 1 else 0.0
        if self.uniform_rate > 0:
            lam = self.uniform_rate
            self.jump_matrix = (off / lam + sp.diags(1.0 - self.exit_rates / lam)).tocsr()
        else:
            self.jump_matrix = sp.identity(S, format="csr")

    def generator_dense(self) -> np.ndarray:
        return self.rate_matrix.toarray() - np.diag(self.exit_rates)

    def index_of(self, sites) -> int:
        idx = np.sort(np.unique(_site_index(sites, self.L, self.d)))
        if idx.size != self.n:
            raise PreconditionError(f"need {self.n} distinct sites, got {idx.size}")
        return int(_colex_rank(idx[None, :], self._binom)[0])

    def distribution_grid(self, start, times, tol=1e-12, max_terms=DEFAULT_MAX_TERMS):
        """``P_t(start -> .)`` for each ``t`` in ``times``.

        Returns ``(probs, tails)`` with ``probs`` of shape ``(len(times), S)``
        and ``tails[j]`` the certified missing mass at ``times[j]``.
        """
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if np.any(times < 0):
            raise ValueError("times must be nonnegative")
        v0 = np.zeros(self.size)
        v0[start if np.isscalar(start) else self.index_of(start)] = 1.0
        lam = self.uniform_rate
        cuts = [poisson_cutoff(lam * t, tol, max_terms) for t in times]
        K = max(c[0] for c in cuts)
        out = np.zeros((times.size, self.size))
        v = v0
        P = self.jump_matrix
        for k in range(K + 1):
            if k:
                v = P @ v
            for j, (Kj, w, _) in enumerate(cuts):
                if k <= Kj:
                    out[j] += w[k] * v
        return out, np.array([c[2] for c in cuts])

    def distribution(self, start, t, tol=1e-12, max_terms=DEFAULT_MAX_TERMS):
        probs, tails = self.distribution_grid(start, [t], tol, max_terms)
        return probs[0], float(tails[0])

    def dense_distribution(self, start, t):
        """Reference ``P_t`` by symmetric eigendecomposition (small spaces only)."""
        if self.size > DENSE_ORACLE_CAP:
            raise StateSpaceTooLarge(f"dense oracle limited to {DENSE_ORACLE_CAP} states")
        lam, V = scipy.linalg.eigh(self.generator_dense())
        i = start if np.isscalar(start) else self.index_of(start)
        return V @ (np.exp(lam * t) * V[i])

    def occupation_products(self, eta_flat) -> np.ndarray:
        """``prod_{y in B} eta(y)`` for every state ``B``."""
        return np.all(eta_flat[self.states] == 1, axis=1).astype(float)


@lru_cache(maxsize=16)
def n_particle_generator(kernel, L, n, cap=DEFAULT_STATE_CAP) -> NParticleGenerator:
    """Cached :class:`NParticleGenerator` (kernels hash by identity)."""
    return NParticleGenerator(kernel, L, n, cap)


def _torus_eta(eta, L=None):
    if not isinstance(eta, LatticeConfiguration):
        eta = LatticeConfiguration.explicit(eta)
    if eta.kind != "explicit":
        if L is None:
            raise DomainMismatch("rule-based configuration needs a torus side")
        eta = eta.on_torus(L)
    elif L is not None and eta.L != L:
        raise DomainMismatch(f"configuration lives on L={eta.L}, not {L}")
    return eta


def _apply_kernel_matrix(eta_arr, probs):
    # rho(x) = sum_w eta(x + w) p(w); p symmetric so this is a circular convolution
    d = eta_arr.ndim
    axes = tuple(range(d))
    out = np.zeros(eta_arr.shape)
    etaf = eta_arr.astype(float)
    nz = np.argwhere(probs > 0.0)
    for w in nz:
        out += probs[tuple(w)] * np.roll(etaf, tuple(int(-c) for c in w), axis=axes)
    return out


def exact_rho(kernel: Kernel, eta, t: float, tol: float = 1e-12, L=None) -> np.ndarray:
    """``rho^eta_t(x) = sum_z eta(z) p_t(x, z)`` on the torus, error <= ``tol``.

    Returns an array of shape ``(L,)*d`` indexed by torus coordinates.
    """
    eta = _torus_eta(eta, L)
    arr = eta.array
    if eta.is_constant:
        return np.full(arr.shape, float(arr.flat[0]))
    td = transition_distribution(kernel, t, L=eta.L, tol=tol)
    return np.clip(_apply_kernel_matrix(arr, td.probs), 0.0, 1.0)


def exact_rho_grid(kernel, eta, times, tol=1e-12, L=None):
    """:func:`exact_rho` at several times, stacked along axis 0."""
    return np.stack([exact_rho(kernel, eta, t, tol, L) for t in times])


def exact_correlation(kernel, eta, A, t, tol=1e-12, L=None, cap=DEFAULT_STATE_CAP) -> float:
    """``E prod_{x in A} eta_t(x)`` from the dual ``|A|``-particle chain."""
    eta = _torus_eta(eta, L)
    A = np.asarray(A)
    n = len(np.unique(_site_index(A, eta.L, eta.d)))
    if eta.is_constant:
        return float(eta.array.flat[0]) ** n
    gen = n_particle_generator(kernel, eta.L, n, cap)
    pi, _ = gen.distribution(A, t, tol)
    return float(pi @ gen.occupation_products(eta.array.ravel()))


def _pair_table(gen):
    n = gen.n
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    rates_L = gen.kernel.torus_rates(gen.L).ravel()
    L, d = gen.L, gen.d
    coords = np.stack(np.unravel_index(gen.states, (L,) * d), axis=-1)
    pr = np.empty((gen.size, len(pairs)))
    for c, (i, j) in enumerate(pairs):
        diff = np.mod(coords[:, j] - coords[:, i], L)
        pr[:, c] = rates_L[np.ravel_multi_index(tuple(diff.T), (L,) * d)]
    return pairs, pr


def _space_sum(gen, pairs, pair_rates, rho_flat):
    """``sum_{i<j} p(y_i, y_j) (rho(y_i) - rho(y_j))^2 prod_{k != i,j} rho(y_k)`` per state."""
    r = rho_flat[gen.states]  # (S, n)
    out = np.zeros(gen.size)
    for c, (i, j) in enumerate(pairs):
        term = pair_rates[:, c] * (r[:, i] - r[:, j]) ** 2
        for k in range(gen.n):
            if k != i and k != j:
                term = term * r[:, k]
        out += term
    return out


@dataclass
class IdentityResult:
    lhs: float
    rhs: float
    gap: float
    error_budget: float
    panels: int = 0

    def to_json(self):
        return {"lhs": self.lhs, "rhs": self.rhs, "gap": self.gap,
                "error_budget": self.error_budget, "panels": self.panels}


def exact_basic_identity(kernel, eta, A, t, tol=1e-12, L=None, order=10, quad_tol=1e-9,
                         max_panels=256, cap=DEFAULT_STATE_CAP) -> IdentityResult:
    """Both sides of the exclusion/independence identity, computed separately.

    ``lhs = E prod eta_t(x_i) - prod rho_t(x_i)``. ``rhs`` is minus the time
    integral over ``s in [0, t]`` of the space sum (see :func:`_space_sum`)
    weighted by the exact time-``s`` law of the dual walkers, evaluated by
    Gauss-Legendre panels doubled until two successive estimates differ by
    less than ``quad_tol / 2``; ``tol`` is the uniformization tolerance.
    """
    eta = _torus_eta(eta, L)
    Lt, d = eta.L, eta.d
    A = np.asarray(A)
    idx = np.unique(_site_index(A, Lt, d))
    n = idx.size
    t = float(t)
    if eta.is_constant or n == 1 or t == 0.0:
        if eta.is_constant or t == 0.0:
            return IdentityResult(0.0, 0.0, 0.0, 0.0)
        corr = exact_correlation(kernel, eta, A, t, tol, cap=cap)
        rho = exact_rho(kernel, eta, t, tol).ravel()
        lhs = corr - float(rho[idx[0]])
        return IdentityResult(lhs, 0.0, abs(lhs), 2 * tol)

    corr = exact_correlation(kernel, eta, A, t, tol, cap=cap)
    rho_t = exact_rho(kernel, eta, t, tol).ravel()
    lhs = corr - float(np.prod(rho_t[idx]))

    gen = n_particle_generator(kernel, Lt, n, cap)
    start = gen.index_of(A)
    pairs, pair_rates = _pair_table(gen)
    gl_x, gl_w = np.polynomial.legendre.leggauss(order)

    def panel_estimate(P):
        edges = np.linspace(0.0, t, P + 1)
        mids = 0.5 * (edges[1:] + edges[:-1])
        half = 0.5 * (edges[1:] - edges[:-1])
        s_nodes = (mids[:, None] + half[:, None] * gl_x[None, :]).ravel()
        weights = (half[:, None] * gl_w[None, :]).ravel()
        pis, _ = gen.distribution_grid(start, s_nodes, tol)
        total = 0.0
        for s, w, pi in zip(s_nodes, weights, pis):
            rho = exact_rho(kernel, eta, t - s, tol).ravel()
            total += w * float(pi @ _space_sum(gen, pairs, pair_rates, rho))
        return total

    P = 1
    prev = panel_estimate(P)
    while True:
        P *= 2
        cur = panel_estimate(P)
        diff = abs(cur - prev)
        if diff < quad_tol / 2:
            break
        if P >= max_panels:
            raise QuadratureNotConverged(f"panel estimates still differ by {diff:.3g} at {P} panels")
        prev = cur
    rhs = -float(cur)
    pair_bound = min(len(pairs) * kernel.max_rate, n / 2.0)
    budget = (tol + n * tol) + t * pair_bound * (tol + 4.0 * tol) + diff
    return IdentityResult(float(lhs), rhs, float(abs(lhs - rhs)), float(budget), P)


def phi_kernel_moment(kernel):
    """``Phi(y) = p(0, y) |y|^2``."""

    def phi(y):
        y = np.atleast_2d(np.asarray(y, dtype=np.int64))
        vals = np.array([kernel.rate(v) for v in y])
        return vals * np.sum(y.astype(float) ** 2, axis=1)

    return phi


def phi_power(alpha):
    """``Phi(y) = |y|^-alpha`` (Euclidean norm), zero at the origin."""

    def phi(y):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        r = np.sqrt(np.sum(y * y, axis=1))
        with np.errstate(divide="ignore"):
            return np.where(r > 0, r ** (-alpha), 0.0)

    return phi


def _min_image(diff, L):
    return np.where(diff > L // 2, diff - L, diff)


def lemma_bes_sum(kernel, phi, sites, t, L, tol=1e-12, cap=DEFAULT_STATE_CAP) -> float:
    """``sum_{j != k} sum_y P[{X endpoints} = {y}] Phi(y_j - y_k)``.

    Reduced to ordered pairs of walkers, each pair's law being the exact
    two-particle exclusion law on the torus; displacements use the minimum
    image convention.
    """
    d = kernel.d
    sites = np.asarray(sites, dtype=np.int64)
    if d == 1 and (sites.ndim == 1):
        sites = sites[:, None]
    gen = n_particle_generator(kernel, L, 2, cap)
    coords = np.stack(np.unravel_index(gen.states, (L,) * d), axis=-1)
    diff = _min_image(np.mod(coords[:, 1] - coords[:, 0], L), L)
    w = phi(diff) + phi(-diff)
    total = 0.0
    for a, b in combinations(range(len(sites)), 2):
        pi, _ = gen.distribution(sites[[a, b]], t, tol)
        total += float(pi @ w)
    return total


def correlation_inequality_check(kernel, sites, targets, t, L, tol=1e-12, cap=DEFAULT_STATE_CAP):
    """Exclusion pair probability versus the independent-walk product bound.

    Returns ``(exclusion_prob, product_bound, ok)`` where ``exclusion_prob`` is
    ``P[{X^a_t, X^b_t} = {y_j, y_k}]`` and the bound is
    ``(p_t(y_j - x_a) + p_t(y_k - x_a)) (p_t(y_j - x_b) + p_t(y_k - x_b))``.
    """
    gen = n_particle_generator(kernel, L, 2, cap)
    pi, _ = gen.distribution(sites, t, tol)
    ex = float(pi[gen.index_of(targets)])
    td = transition_distribution(kernel, t, L=L, tol=tol)
    s = np.asarray(sites).reshape(2, -1)
    y = np.asarray(targets).reshape(2, -1)
    pa = td.prob(y[0] - s[0]) + td.prob(y[1] - s[0])
    pb = td.prob(y[0] - s[1]) + td.prob(y[1] - s[1])
    bound = float(pa * pb)
    return ex, bound, ex <= bound + 1e-10


def oracle_record(name, inputs, value, error_budget) -> dict:
    """JSON-serializable ``{inputs, value, error_budget}`` record."""
    return json.loads(json.dumps(
        {"oracle": name, "inputs": inputs, "value": value, "error_budget": error_budget},
        default=_json_default,
    ))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not serializable: {type(o)}")


def state_space_size(L, d, n) -> int:
    return math.comb(L ** d, n)
