"""Labeled ``n``-particle dynamics on ``Z^d`` and Monte Carlo estimators.

Only the clocks attached to the ``n`` particles are realized. Each particle
carries a rate-one clock that proposes a displacement ``z ~ p``; the pair
``{x, x + z}`` therefore rings at rate ``p(z)`` from each of its ends, which
reproduces the graphical construction restricted to occupied sites:

* onto an empty site the particle moves;
* onto a site held by particle ``j`` the proposal is an ``N`` mark when the
  proposer has the lower label (labels swap: stirring) and an ``N0`` mark
  otherwise (``X`` does not move).

Either kind of proposal onto an occupied site is a *collision* of the pair,
so ``M^{i,j}`` increases at rate ``2 p(X_i, X_j)``. The independent walks
``Y`` follow ``X`` until the first collision ``T_1``, where the proposer's
``Y`` jumps onto its partner; from then on every ``Y_k`` moves with its own
rate-one clock. All clocks are simulated by uniformization (total rate
``n``, or ``2n`` with ``Y``), vectorized across replicas.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from functools import partial

import numpy as np
from scipy.signal import fftconvolve
from scipy.stats import chi2

from ._poisson import poisson_cutoff
from ._rng import block_rng, blocks, map_blocks
from .errors import DuplicateSites, PreconditionError, RhoGridTooCoarse
from .exact import DEFAULT_STATE_CAP
from .kernel import Kernel, _cdf, transition_distribution
from .measures import LatticeConfiguration

__all__ = [
    "CollisionReport",
    "CouplingBatch",
    "CouplingRecord",
    "DualExclusionResult",
    "MCEstimate",
    "ParticleSystemState",
    "chi_square_gof",
    "chi_square_two_sample",
    "collision_rate_check",
    "dual_endpoints",
    "estimate_basic_lhs",
    "estimate_basic_rhs",
    "rho_on_box",
    "simulate_coupled",
    "simulate_coupled_batch",
    "simulate_dual_exclusion",
]

TAG_EXCLUSION, TAG_COUPLED, TAG_LHS, TAG_RHS = 11, 12, 13, 14


def _sites_array(sites, d):
    x = np.asarray(sites, dtype=np.int64)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    if x.ndim == 1:
        x = x[:, None] if d == 1 else x[None, :]
    if x.shape[1] != d:
        raise PreconditionError(f"sites must be points of Z^{d}")
    if x.shape[0] < 1:
        raise PreconditionError("need at least one site")
    if len({tuple(r) for r in x.tolist()}) != x.shape[0]:
        raise DuplicateSites("starting sites must be distinct")
    return x


def _pairs(n):
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def _pair_index(n):
    idx = -np.ones((n, n), dtype=np.int64)
    for c, (i, j) in enumerate(_pairs(n)):
        idx[i, j] = idx[j, i] = c
    return idx


@dataclass
class ParticleSystemState:
    """Positions of the ``X`` and ``Y`` particles at a given time."""

    time: float
    X: np.ndarray
    Y: np.ndarray

    @property
    def coincident(self) -> dict:
        """``{(i, j): Y_i == Y_j}`` for every pair ``i < j``."""
        n = self.Y.shape[0]
        return {(i, j): bool(np.array_equal(self.Y[i], self.Y[j])) for i, j in _pairs(n)}

    def to_json(self):
        return {"time": self.time, "X": self.X.tolist(), "Y": self.Y.tolist()}


@dataclass
class CouplingRecord:
    """One joint trajectory of the exclusion walkers ``X`` and free walkers ``Y``.

    ``collisions`` lists ``(T, (i, j), E)`` in time order, ``E = 1`` for an
    ``N`` mark. ``events`` (when requested) is the full event list.
    """

    sites: np.ndarray
    t: float
    collisions: list
    M: dict
    X: np.ndarray
    Y: np.ndarray
    before_first: ParticleSystemState | None = None
    events: list | None = None

    @property
    def n_collisions(self) -> int:
        return len(self.collisions)

    def to_json(self) -> dict:
        return {
            "sites": self.sites.tolist(),
            "t": self.t,
            "collisions": [[T, list(z), e] for T, z, e in self.collisions],
            "M": {f"{i},{j}": m for (i, j), m in sorted(self.M.items())},
            "X": self.X.tolist(),
            "Y": self.Y.tolist(),
            "before_first": None if self.before_first is None else self.before_first.to_json(),
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True).encode()

    def trace_csv(self, path):
        """Event list as ``time,particle,from,to,mark_tag,collision`` rows."""
        if self.events is None:
            raise ValueError("record was simulated without an event list")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "particle", "from", "to", "mark_tag", "collision"])
            for ev in self.events:
                w.writerow([repr(ev[0]), ev[1], _fmt_site(ev[2]), _fmt_site(ev[3]), ev[4], int(ev[5])])


def _fmt_site(x):
    return ";".join(str(int(c)) for c in x)


@dataclass
class DualExclusionResult:
    """Final positions (``(n, d)``) and, optionally, the ``(time, particle, from, to)`` path."""

    sites: np.ndarray
    t: float
    positions: np.ndarray
    path: list | None = None


@dataclass
class CouplingBatch:
    """Aggregates of many coupled replicas."""

    X: np.ndarray  # (R, n, d)
    Y: np.ndarray
    M: np.ndarray  # (R, n_pairs)
    n_collisions: int
    n_N_marks: int
    first_time: np.ndarray  # (R,), inf when no collision
    mismatch_before_first: int  # replicas with X != Y just before T_1

    @property
    def E_mean(self) -> float:
        return self.n_N_marks / self.n_collisions if self.n_collisions else float("nan")


@dataclass
class MCEstimate:
    """Monte Carlo mean with its CLT standard error.

    Unpacks as ``(estimate, stderr)``; ``bias_bound`` is a certified bound on
    any deterministic error added on top of the sampling noise.
    """

    estimate: float
    stderr: float
    replicas: int
    bias_bound: float = 0.0

    def __iter__(self):
        return iter((self.estimate, self.stderr))


# --------------------------------------------------------------------------
# engine


class _Engine:
    """Uniformized replica engine over one block of replicas."""

    def __init__(self, kernel: Kernel, sites: np.ndarray, times, coupled: bool):
        self.kernel = kernel
        self.sites = sites
        self.n, self.d = sites.shape
        self.times = np.asarray(times, dtype=float)
        self.coupled = coupled
        self.cdf = _cdf(kernel)
        self.disp = kernel.displacements
        self.pidx = _pair_index(self.n)

    def run(self, R, rng, keep_intervals=False, log=False):
        n, d, G = self.n, self.d, self.times.size
        coupled = self.coupled
        t_end = float(self.times[-1])
        rate = n * (2 if coupled else 1)
        X = np.repeat(self.sites[None], R, axis=0)
        Y = X.copy() if coupled else None
        dec = np.zeros(R, dtype=bool)
        first = np.full(R, np.inf)
        tau = np.zeros(R)
        snapX = np.empty((G, R, n, d), dtype=np.int64)
        snapY = np.empty((G, R, n, d), dtype=np.int64) if coupled else None
        M = np.zeros((R, max(len(_pairs(n)), 1)), dtype=np.int64)
        n_col = n_N = mismatch = 0
        intervals = []
        events = [] if log else None
        collisions = [] if log else None
        before = None
        active = np.arange(R)
        while active.size:
            tau_a = tau[active]
            new = tau_a + rng.exponential(1.0 / rate, active.size)
            for g in range(G):
                tg = self.times[g]
                sel = (tau_a <= tg) & (tg < new)
                if sel.any():
                    ids = active[sel]
                    snapX[g, ids] = X[ids]
                    if coupled:
                        snapY[g, ids] = Y[ids]
            if keep_intervals:
                intervals.append((active, tau_a, np.minimum(new, t_end), X[active].copy()))
            go = new <= t_end
            r = active[go]
            now = new[go]
            tau[r] = now
            active = r
            m = r.size
            if m == 0:
                break
            ch = rng.integers(0, rate, m)
            z = self.disp[np.searchsorted(self.cdf, rng.random(m), side="right")]
            isx = ch < n
            rx, k, zx, tx = r[isx], ch[isx], z[isx], now[isx]
            src = X[rx, k]
            tgt = src + zx
            occ = np.all(X[rx] == tgt[:, None, :], axis=-1)
            has = occ.any(axis=1)
            j = occ.argmax(axis=1)
            lower = has & (k < j)
            if has.any():
                ci, cj = np.minimum(k, j)[has], np.maximum(k, j)[has]
                M[rx[has], self.pidx[ci, cj]] += 1
                n_col += int(has.sum())
                n_N += int(lower.sum())
            if coupled:
                und = ~dec[rx]
                fr = und & ~has
                Y[rx[fr], k[fr]] = tgt[fr]
                hit = und & has
                if hit.any():
                    rh = rx[hit]
                    mismatch += int(np.any(X[rh] != Y[rh], axis=(1, 2)).sum())
                    if log:
                        before = ParticleSystemState(float(tx[hit][0]), X[rh][0].copy(), Y[rh][0].copy())
                        kk = int(k[hit][0])
                        events.append((before.time, f"Y{kk}", Y[rh[0], kk].copy(), tgt[hit][0].copy(),
                                       "N" if lower[hit][0] else "N0", True))
                    Y[rh, k[hit]] = tgt[hit]
                    dec[rh] = True
                    first[rh] = tx[hit]
            if log:
                self._log_x(events, collisions, tx, k, j, src, tgt, has, lower, coupled)
            free = ~has
            X[rx[free], k[free]] = tgt[free]
            if lower.any():
                rs, ks, js = rx[lower], k[lower], j[lower]
                X[rs, js] = src[lower]
                X[rs, ks] = tgt[lower]
            if coupled:
                isy = ~isx
                ry, ky, zy = r[isy], ch[isy] - n, z[isy]
                ok = dec[ry]
                if log and ok.any():
                    p0 = Y[ry[ok], ky[ok]][0]
                    events.append((float(now[isy][ok][0]), f"Y{int(ky[ok][0])}", p0.copy(),
                                   p0 + zy[ok][0], "free", False))
                Y[ry[ok], ky[ok]] += zy[ok]
        out = {
            "X": snapX, "Y": snapY, "M": M, "n_col": n_col, "n_N": n_N,
            "first": first, "mismatch": mismatch,
        }
        if keep_intervals:
            out["intervals"] = intervals
        if log:
            out["events"] = events
            out["collisions"] = collisions
            out["before"] = before
        return out

    @staticmethod
    def _log_x(events, collisions, tx, k, j, src, tgt, has, lower, coupled):
        # single-replica logging (R == 1, at most one event per step)
        if tx.size == 0:
            return
        T = float(tx[0])
        kk, jj = int(k[0]), int(j[0])
        if not has[0]:
            events.append((T, f"X{kk}", src[0].copy(), tgt[0].copy(), "N", False))
            return
        tag = "N" if lower[0] else "N0"
        if lower[0]:
            events.append((T, f"X{kk}", src[0].copy(), tgt[0].copy(), tag, True))
            events.append((T, f"X{jj}", tgt[0].copy(), src[0].copy(), tag, True))
        else:
            events.append((T, f"X{kk}", src[0].copy(), src[0].copy(), tag, True))
        collisions.append((T, (min(kk, jj), max(kk, jj)), 1 if lower[0] else 0))


def _check_times(t):
    t = float(t)
    if not t >= 0:
        raise PreconditionError("time must be nonnegative")
    return t


# block workers (module level so process pools can pickle them)


def _endpoints_block(eng, seed, item):
    b, m = item
    return eng.run(m, block_rng(seed, b, TAG_EXCLUSION))["X"]


def _coupled_block(eng, seed, item):
    b, m = item
    return eng.run(m, block_rng(seed, b, TAG_COUPLED))


def _lhs_block(eng, eta, seed, item):
    b, m = item
    ends = eng.run(m, block_rng(seed, b, TAG_LHS))["X"][0]
    return _moments(np.all(eta(ends) == 1, axis=1).astype(float))


def _rhs_block(eng, eta, seed, t, h, tol, grid, item):
    b, m = item
    res = eng.run(m, block_rng(seed, b, TAG_RHS), keep_intervals=True)
    vals, bias = _integrate_block(eng.kernel, eta, eng.sites, t, res["intervals"], m, h, tol, grid)
    return _moments(-vals), bias


def simulate_dual_exclusion(kernel: Kernel, sites, t, seed, path: bool = False) -> DualExclusionResult:
    """One realization of ``n`` labeled stirring walkers up to time ``t``."""
    x = _sites_array(sites, kernel.d)
    t = _check_times(t)
    eng = _Engine(kernel, x, [t], coupled=False)
    res = eng.run(1, block_rng(seed, 0, TAG_EXCLUSION), log=path)
    p = None
    if path:
        p = [(e[0], int(e[1][1:]), e[2], e[3]) for e in res["events"] if not np.array_equal(e[2], e[3])]
    return DualExclusionResult(x, t, res["X"][0, 0], p)


def dual_endpoints(kernel: Kernel, sites, times, replicas: int, seed, n_jobs: int = 1) -> np.ndarray:
    """Positions of the stirring walkers at each of ``times`` for many replicas.

    Returns an int array of shape ``(len(times), replicas, n, d)``.
    """
    x = _sites_array(sites, kernel.d)
    times = np.asarray(sorted(float(s) for s in np.atleast_1d(times)))
    if times.size == 0 or times[0] < 0:
        raise PreconditionError("need nonnegative times")
    eng = _Engine(kernel, x, times, coupled=False)

    parts = map_blocks(partial(_endpoints_block, eng, seed), blocks(replicas), n_jobs)
    return np.concatenate(parts, axis=1)


def simulate_coupled(kernel: Kernel, sites, t, seed, events: bool = True) -> CouplingRecord:
    """One coupled ``(X, Y)`` trajectory with its collision record."""
    x = _sites_array(sites, kernel.d)
    t = _check_times(t)
    eng = _Engine(kernel, x, [t], coupled=True)
    res = eng.run(1, block_rng(seed, 0, TAG_COUPLED), log=True)
    pairs = _pairs(x.shape[0])
    M = {pq: int(res["M"][0, c]) for c, pq in enumerate(pairs)}
    return CouplingRecord(
        sites=x, t=t, collisions=res["collisions"], M=M,
        X=res["X"][0, 0], Y=res["Y"][0, 0], before_first=res["before"],
        events=res["events"] if events else None,
    )


def simulate_coupled_batch(kernel: Kernel, sites, t, replicas: int, seed, n_jobs: int = 1) -> CouplingBatch:
    """Many coupled replicas, keeping only final positions and collision tallies."""
    x = _sites_array(sites, kernel.d)
    t = _check_times(t)
    eng = _Engine(kernel, x, [t], coupled=True)

    parts = map_blocks(partial(_coupled_block, eng, seed), blocks(replicas), n_jobs)
    return CouplingBatch(
        X=np.concatenate([p["X"][0] for p in parts]),
        Y=np.concatenate([p["Y"][0] for p in parts]),
        M=np.concatenate([p["M"] for p in parts]),
        n_collisions=sum(p["n_col"] for p in parts),
        n_N_marks=sum(p["n_N"] for p in parts),
        first_time=np.concatenate([p["first"] for p in parts]),
        mismatch_before_first=sum(p["mismatch"] for p in parts),
    )


# --------------------------------------------------------------------------
# statistics helpers


def chi_square_gof(samples, probs_fn, min_expected=5.0):
    """Chi-square goodness of fit of integer points against exact probabilities.

    ``samples`` has shape ``(R, d)``; ``probs_fn(points)`` returns the exact
    probability of each point. Cells with expected count below
    ``min_expected`` are pooled with the unobserved remainder. Returns
    ``(statistic, dof, p_value)``.
    """
    samples = np.asarray(samples).reshape(len(samples), -1)
    R = samples.shape[0]
    pts, counts = np.unique(samples, axis=0, return_counts=True)
    p = np.asarray(probs_fn(pts), dtype=float)
    exp = R * p
    keep = exp >= min_expected
    obs_k, exp_k = counts[keep], exp[keep]
    obs_rest = R - obs_k.sum()
    exp_rest = R - exp_k.sum()
    obs = np.append(obs_k, obs_rest)
    ex = np.append(exp_k, exp_rest)
    if exp_rest < min_expected:
        # fold the small remainder into the smallest kept cell
        i = int(np.argmin(exp_k)) if exp_k.size else 0
        obs = obs_k.astype(float).copy()
        ex = exp_k.copy()
        if ex.size:
            obs[i] += obs_rest
            ex[i] += exp_rest
    stat = float(np.sum((obs - ex) ** 2 / ex))
    dof = max(ex.size - 1, 1)
    return stat, dof, float(chi2.sf(stat, dof))


def chi_square_two_sample(a_keys, b_keys, min_expected=5.0):
    """Two-sample chi-square homogeneity test on hashable outcome keys.

    Categories whose pooled expected count is below ``min_expected`` in
    either sample are merged. Returns ``(statistic, dof, p_value)``.
    """
    from collections import Counter

    ca, cb = Counter(a_keys), Counter(b_keys)
    na, nb = sum(ca.values()), sum(cb.values())
    cats = sorted(set(ca) | set(cb))
    oa = np.array([ca[c] for c in cats], dtype=float)
    ob = np.array([cb[c] for c in cats], dtype=float)
    tot = oa + ob
    ea = tot * na / (na + nb)
    eb = tot * nb / (na + nb)
    big = (ea >= min_expected) & (eb >= min_expected)
    oa = np.append(oa[big], oa[~big].sum())
    ob = np.append(ob[big], ob[~big].sum())
    tot = oa + ob
    keep = tot > 0
    oa, ob, tot = oa[keep], ob[keep], tot[keep]
    ea = tot * na / (na + nb)
    eb = tot * nb / (na + nb)
    stat = float(np.sum((oa - ea) ** 2 / ea) + np.sum((ob - eb) ** 2 / eb))
    dof = max(oa.size - 1, 1)
    return stat, dof, float(chi2.sf(stat, dof))


# --------------------------------------------------------------------------
# collisions


@dataclass
class CollisionReport:
    t: float
    replicas: int
    empirical_mean: float
    stderr: float
    compensator: float
    z: float
    L: int

    @property
    def ok(self) -> bool:
        return abs(self.z) <= 4.0

    def to_json(self):
        return dict(self.__dict__)


def _exact_compensator(kernel, sites, t, L, order=10, quad_tol=1e-10, max_panels=256):
    """``2 int_0^t E p(X^1_s, X^2_s) ds`` from the exact 2-particle chain on a torus."""
    from .exact import _pair_table, n_particle_generator

    gen = n_particle_generator(kernel, L, 2)
    start = gen.index_of(sites)
    _, pr = _pair_table(gen)
    w = pr[:, 0]
    gl_x, gl_w = np.polynomial.legendre.leggauss(order)

    def panels(P):
        edges = np.linspace(0.0, t, P + 1)
        mids = 0.5 * (edges[1:] + edges[:-1])
        half = 0.5 * (edges[1:] - edges[:-1])
        s = (mids[:, None] + half[:, None] * gl_x).ravel()
        wt = (half[:, None] * gl_w).ravel()
        pis, _ = gen.distribution_grid(start, s)
        return float(wt @ (pis @ w))

    P, prev = 1, panels(1)
    while True:
        P *= 2
        cur = panels(P)
        if abs(cur - prev) < quad_tol or P >= max_panels:
            return 2.0 * cur
        prev = cur


def collision_rate_check(kernel: Kernel, sites, t, replicas: int, seed, L: int | None = None,
                         n_jobs: int = 1) -> CollisionReport:
    """Empirical mean of ``M^{1,2}(t)`` against its exact compensator.

    The compensator is evaluated on a torus of side ``L``. The default is
    wide enough that wrap-around is negligible at time ``t``, shrunk if
    needed so the exact two-particle chain stays within the state cap; the
    side used is reported.
    """
    x = _sites_array(sites, kernel.d)
    if x.shape[0] != 2:
        raise PreconditionError("collision_rate_check needs exactly two sites")
    t = _check_times(t)
    if L is None:
        span = int(np.abs(x[1] - x[0]).max())
        s2 = float(kernel.second_moment)
        L = 2 * (span + math.ceil(12.0 * math.sqrt(max(t, 1e-9) * s2) + 6 * kernel.radius)) + 8
        # shrink to the largest torus whose two-particle space fits the exact cap
        while L > 2 * (span + kernel.radius) + 2 and math.comb(L ** kernel.d, 2) > DEFAULT_STATE_CAP:
            L -= 1
    batch = simulate_coupled_batch(kernel, x, t, replicas, seed, n_jobs)
    m = batch.M[:, 0].astype(float)
    mean = float(m.mean())
    se = float(m.std(ddof=1) / math.sqrt(m.size)) if m.size > 1 else 0.0
    comp = 0.0 if t == 0 else _exact_compensator(kernel, x, t, L)
    if se > 0:
        z = (mean - comp) / se
    else:
        z = 0.0 if abs(mean - comp) < 1e-12 else math.copysign(math.inf, mean - comp)
    return CollisionReport(t, int(replicas), mean, se, comp, float(z), int(L))


# --------------------------------------------------------------------------
# rho on Z^d


def _box_points(lo, hi):
    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack(mesh, axis=-1)


def rho_on_box(kernel: Kernel, eta: LatticeConfiguration, t, lo, hi, tol=1e-12):
    """``rho^eta_t`` on the box ``prod [lo_i, hi_i]`` of ``Z^d``.

    Explicit torus configurations are read periodically. Returns the array
    and a certified bound on the absolute error of every entry.
    """
    lo = np.asarray(lo, dtype=np.int64).reshape(-1)
    hi = np.asarray(hi, dtype=np.int64).reshape(-1)
    shape = tuple(int(b - a + 1) for a, b in zip(lo, hi))
    if eta.is_constant:
        c = float(eta(np.zeros(kernel.d, dtype=np.int64)))
        return np.full(shape, c), 0.0
    if t == 0:
        return eta(_box_points(lo, hi)).astype(float), 0.0
    td = transition_distribution(kernel, t, tol=tol)
    R = td.radius
    ev = eta(_box_points(lo - R, hi + R)).astype(float)
    rho = fftconvolve(ev, td.probs, mode="valid")
    return np.clip(rho, 0.0, 1.0), float(td.tail_bound) + 1e-14


def _rho_at_sites(kernel, eta, t, x, tol):
    out = np.empty(x.shape[0])
    err = 0.0
    for i, s in enumerate(x):
        v, e = rho_on_box(kernel, eta, t, s, s, tol)
        out[i] = v.reshape(-1)[0]
        err = max(err, e)
    return out, err


# --------------------------------------------------------------------------
# estimators


def _merge_moments(parts):
    # (count, mean, M2) merged in block order
    n, mean, m2 = 0, 0.0, 0.0
    for c, mu, s in parts:
        if c == 0:
            continue
        tot = n + c
        delta = mu - mean
        mean += delta * c / tot
        m2 += s + delta * delta * n * c / tot
        n = tot
    return n, mean, m2


def _moments(v):
    v = np.asarray(v, dtype=float)
    mu = float(v.mean())
    return v.size, mu, float(np.sum((v - mu) ** 2))


def _stderr(n, m2):
    return math.sqrt(m2 / (n - 1) / n) if n > 1 else 0.0


def estimate_basic_lhs(kernel: Kernel, eta: LatticeConfiguration, sites, t, replicas: int, seed,
                       tol: float = 1e-12, n_jobs: int = 1) -> MCEstimate:
    """``E prod eta(X endpoints) - prod rho^eta_t(x_i)`` with its standard error."""
    x = _sites_array(sites, kernel.d)
    t = _check_times(t)
    rho, err = _rho_at_sites(kernel, eta, t, x, tol)
    prod = float(np.prod(rho))
    n = x.shape[0]
    if eta.is_constant:
        return MCEstimate(0.0, 0.0, int(replicas))
    eng = _Engine(kernel, x, [t], coupled=False)

    work = partial(_lhs_block, eng, eta, seed)
    cnt, mean, m2 = _merge_moments(map_blocks(work, blocks(replicas), n_jobs))
    return MCEstimate(mean - prod, _stderr(cnt, m2), cnt, bias_bound=n * err)


class _HermiteRho:
    """``r -> rho^eta_r`` on a window, cubic Hermite in ``r`` between exact nodes.

    Node values come from :func:`rho_on_box`; node slopes use the exact
    relation ``d/dr rho_r = L rho_r`` with ``L`` the walk generator.
    """

    M4 = 8.0  # sup |d^4/dr^4 rho_r| = |P_r L^4 eta| <= |L|^3 |L eta| <= 8

    def __init__(self, kernel, eta, horizon, h, lo, hi, tol):
        self.h = float(h)
        self.cells = max(math.ceil(horizon / h - 1e-12), 1)
        self.lo = np.asarray(lo, dtype=np.int64)
        self.hi = np.asarray(hi, dtype=np.int64)
        self.shape = tuple(int(b - a + 1) for a, b in zip(self.lo, self.hi))
        r = kernel.radius
        W = int(np.prod(self.shape))
        V = np.empty((self.cells + 1, W))
        D = np.empty((self.cells + 1, W))
        node_err = 0.0
        inner = tuple(slice(r, r + s) for s in self.shape)
        for m in range(self.cells + 1):
            ext, e = rho_on_box(kernel, eta, m * self.h, self.lo - r, self.hi + r, tol)
            node_err = max(node_err, e)
            c = ext[inner]
            lr = np.zeros_like(c)
            for z, p in zip(kernel.displacements, kernel.rates):
                sl = tuple(slice(r + int(zi), r + int(zi) + s) for zi, s in zip(z, self.shape))
                lr += p * (ext[sl] - c)
            V[m] = c.ravel()
            D[m] = lr.ravel()
        self.V, self.D = V, D
        interp = 0.0 if eta.is_constant else self.h ** 4 * self.M4 / 384.0
        # nodal errors: values off by e, slopes by 2e, Hermite basis sums bounded
        self.delta = interp + node_err * (1.0 + self.h)

    def flat_index(self, y):
        rel = y - self.lo
        return np.ravel_multi_index(tuple(rel[..., i] for i in range(rel.shape[-1])), self.shape)

    def __call__(self, cell, u, flat):
        """Values at cell ``cell`` (int), fraction ``u`` in [0, 1], sites ``flat``."""
        h = self.h
        u2, u3 = u * u, u * u * u
        h00 = 2 * u3 - 3 * u2 + 1
        h10 = u3 - 2 * u2 + u
        h01 = -2 * u3 + 3 * u2
        h11 = u3 - u2
        return (h00 * self.V[cell, flat] + h10 * h * self.D[cell, flat]
                + h01 * self.V[cell + 1, flat] + h11 * h * self.D[cell + 1, flat])


def _pair_rate_lookup(kernel):
    r = kernel.radius
    tab = np.zeros((2 * r + 1,) * kernel.d)
    for z, p in zip(kernel.displacements, kernel.rates):
        tab[tuple(z + r)] = p
    return tab, r


def _pair_rates(pos, tab, r, pairs):
    # pos (m, n, d) -> (m, n_pairs)
    out = np.zeros((pos.shape[0], len(pairs)))
    for c, (i, j) in enumerate(pairs):
        dz = pos[:, j] - pos[:, i]
        inside = np.all(np.abs(dz) <= r, axis=1)
        idx = tuple(np.clip(dz[:, a], -r, r) + r for a in range(dz.shape[1]))
        out[:, c] = np.where(inside, tab[idx], 0.0)
    return out


def _lip_factor(delta, n):
    g = (1.0 + delta) ** max(n - 2, 0)
    return (4 * delta + 4 * delta * delta) * g + (g - 1.0)


def _integrate_block(kernel, eta, x, t, intervals, R, h, tol, grid, chunk=200_000):
    """Per-replica integrals of the pathwise compensator over ``[0, t]``."""
    n = x.shape[0]
    pairs = _pairs(n)
    tab, rad = _pair_rate_lookup(kernel)
    rep = np.concatenate([iv[0] for iv in intervals])
    a = np.concatenate([iv[1] for iv in intervals])
    b = np.concatenate([iv[2] for iv in intervals])
    pos = np.concatenate([iv[3] for iv in intervals])
    pr = _pair_rates(pos, tab, rad, pairs)
    live = (pr.sum(axis=1) > 0) & (b > a)
    rep, a, b, pos, pr = rep[live], a[live], b[live], pos[live], pr[live]
    acc = np.zeros(R)
    if rep.size == 0:
        return acc, 0.0
    lo = pos.min(axis=(0, 1))
    hi = pos.max(axis=(0, 1))
    if np.any(lo < grid.lo) or np.any(hi > grid.hi):
        # beyond the a-priori window (probability ~1e-16 per replica)
        pad = 4 * rad + 2
        grid = _HermiteRho(kernel, eta, t, h, np.minimum(lo, grid.lo) - pad,
                           np.maximum(hi, grid.hi) + pad, tol)
    bias = float(np.sum(pr.sum(axis=1) * (b - a)) * _lip_factor(grid.delta, n))
    q = math.ceil((3 * n + 1) / 2)
    gx, gw = np.polynomial.legendre.leggauss(q)
    r_lo, r_hi = t - b, t - a
    c0 = np.clip(np.floor(r_lo / h).astype(np.int64), 0, grid.cells - 1)
    c1 = np.clip(np.ceil(r_hi / h).astype(np.int64) - 1, 0, grid.cells - 1)
    c1 = np.maximum(c1, c0)
    cnt = c1 - c0 + 1
    flat = grid.flat_index(pos)  # (m, n)
    order = np.repeat(np.arange(rep.size), cnt)
    offs = np.arange(order.size) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    for s0 in range(0, order.size, chunk):
        o = order[s0:s0 + chunk]
        cell = c0[o] + offs[s0:s0 + chunk]
        lo_r = np.maximum(r_lo[o], cell * h)
        hi_r = np.minimum(r_hi[o], (cell + 1) * h)
        half = 0.5 * (hi_r - lo_r)
        mid = 0.5 * (hi_r + lo_r)
        rr = mid[:, None] + half[:, None] * gx  # (S, q)
        u = np.clip((rr - cell[:, None] * h) / h, 0.0, 1.0)
        vals = grid(cell[:, None, None], u[:, :, None], flat[o][:, None, :])  # (S, q, n)
        G = np.zeros(rr.shape)
        prc = pr[o]
        for c, (i, j) in enumerate(pairs):
            term = (vals[:, :, i] - vals[:, :, j]) ** 2
            for k in range(n):
                if k != i and k != j:
                    term = term * vals[:, :, k]
            G += prc[:, c:c + 1] * term
        seg = (G @ gw) * half
        acc += np.bincount(rep[o], weights=seg, minlength=R)
    return acc, bias


def estimate_basic_rhs(kernel: Kernel, eta: LatticeConfiguration, sites, t, replicas: int, seed,
                       tol: float = 1e-12, rho_budget: float = 1e-7, rho_step: float | None = None,
                       n_jobs: int = 1) -> MCEstimate:
    """Minus the mean pathwise compensator of the squared-gradient integrand.

    For each replica the integrand
    ``sum_{i<j} p(X_i, X_j) (rho_{t-s}(X_i) - rho_{t-s}(X_j))^2 prod_{k != i,j} rho_{t-s}(X_k)``
    is integrated exactly along the piecewise-constant path, with ``rho``
    interpolated in time (see :class:`_HermiteRho`). The time step is chosen
    so the certified interpolation error per unit of pair-rate time stays
    below ``rho_budget``; :class:`~ssep.errors.RhoGridTooCoarse` is raised if
    the certified bias exceeds 10% of the standard error.
    """
    x = _sites_array(sites, kernel.d)
    t = _check_times(t)
    n = x.shape[0]
    if n == 1 or eta.is_constant or t == 0:
        return MCEstimate(0.0, 0.0, int(replicas))
    if rho_step is None:
        # (4 delta) * (n-1) <~ budget with delta = h^4 M4 / 384
        delta = rho_budget / (4.0 + 2.0 * max(n - 2, 0))
        rho_step = (384.0 * delta / _HermiteRho.M4) ** 0.25
    h = min(float(rho_step), t)
    eng = _Engine(kernel, x, [t], coupled=False)
    # window reachable with probability 1 - 1e-16: at most K jumps in total
    K, _, _ = poisson_cutoff(n * t, 1e-16)
    reach = K * kernel.radius + 1
    grid = _HermiteRho(kernel, eta, t, h, x.min(axis=0) - reach, x.max(axis=0) + reach, tol)

    work = partial(_rhs_block, eng, eta, seed, t, h, tol, grid)
    out = map_blocks(work, blocks(replicas), n_jobs)
    cnt, mean, m2 = _merge_moments([o[0] for o in out])
    bias = sum(o[1] for o in out) / max(cnt, 1)
    se = _stderr(cnt, m2)
    if bias > 0.1 * se and bias > 0:
        raise RhoGridTooCoarse(f"interpolation bias bound {bias:.3g} exceeds 10% of stderr {se:.3g}")
    return MCEstimate(mean, se, cnt, bias_bound=bias)
