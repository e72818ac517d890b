"""Rate experiments: estimator pipelines over time grids and log-log fits.

Every run is a pure function of its :class:`ExperimentSpec`. Monte Carlo
kinds push the initial measure through the dual walkers; the others use the
exact finite-torus oracles, so their tables carry zero standard error.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import dual
from ._rng import block_rng
from .errors import PreconditionError, SignalBelowNoise, TooFewPoints
from .exact import (
    exact_basic_identity,
    exact_rho,
    n_particle_generator,
)
from .kernel import Kernel, gradient_sums, kernel_from_json, transition_distribution
from .measures import (
    InitialMeasure,
    LatticeConfiguration,
    PointMass,
    measure_from_json,
)

__all__ = [
    "KINDS",
    "ExperimentSpec",
    "GradientSumsResult",
    "RateFit",
    "RateTable",
    "SweepReport",
    "fit_rate",
    "run_basic_identity_sweep",
    "run_experiment",
    "run_gradient_sums",
    "run_lp_convergence",
    "run_vfunction",
    "run_weak_convergence",
]

KINDS = (
    "weak_convergence",
    "lp_convergence",
    "vfunction_sup",
    "vfunction_Xphi",
    "vfunction_averaged",
    "gradient_sums",
    "basic_identity_sweep",
)
MC_KINDS = ("weak_convergence",)
MIN_MC_REPLICAS = 1000
REL_FLOOR = 1e-9
ETA_CHUNK = 512


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True, eq=False)
class ExperimentSpec:
    """A parsed experiment configuration.

    ``raw`` keeps the JSON object it came from; :attr:`spec_hash` hashes its
    canonical serialization.
    """

    kind: str
    kernel: Kernel
    measure: InitialMeasure | None
    sites: np.ndarray
    times: tuple
    replicas: int = 10_000
    seed: int = 0
    torus_L: int | None = None
    p: float | None = None
    band: tuple | None = None
    window: tuple | None = None
    shift: float = 1.0
    out: str | None = None
    quantity: str = "S2"
    sweep: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: dict) -> ExperimentSpec:
        kind = obj.get("kind")
        if kind not in KINDS:
            raise PreconditionError(f"unknown experiment kind {kind!r}")
        kernel = kernel_from_json(obj.get("kernel", {"d": 1, "nearest_neighbor": True}))
        measure = measure_from_json(obj["measure"]) if "measure" in obj else None
        sites = np.asarray(obj.get("observable", {}).get("sites", [[0], [1]]), dtype=np.int64)
        if sites.ndim == 1:
            sites = sites[:, None]
        times = tuple(float(t) for t in obj.get("times", ()))
        if kind != "basic_identity_sweep":
            if not times:
                raise PreconditionError("time grid is empty")
            if any(b <= a for a, b in itertools.pairwise(times)):
                raise PreconditionError("time grid must be strictly increasing")
            if times[0] < 0:
                raise PreconditionError("times must be nonnegative")
        replicas = int(obj.get("replicas", 10_000))
        if kind in MC_KINDS and replicas < MIN_MC_REPLICAS:
            raise PreconditionError(f"Monte Carlo kinds need at least {MIN_MC_REPLICAS} replicas")
        p = obj.get("p")
        if kind == "lp_convergence" and (p is None or not 1.0 <= float(p) < math.inf):
            raise PreconditionError("lp_convergence needs p in [1, inf)")
        band = tuple(obj["band"]) if obj.get("band") is not None else None
        window = tuple(obj["window"]) if obj.get("window") is not None else None
        return cls(
            kind=kind, kernel=kernel, measure=measure, sites=sites, times=times,
            replicas=replicas, seed=int(obj.get("seed", 0)),
            torus_L=int(obj["torus_L"]) if obj.get("torus_L") is not None else None,
            p=float(p) if p is not None else None, band=band, window=window,
            shift=float(obj.get("shift", 1.0)), out=obj.get("out"),
            quantity=obj.get("quantity", "S2"), sweep=dict(obj.get("sweep", {})), raw=dict(obj),
        )

    @classmethod
    def from_file(cls, path) -> ExperimentSpec:
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    @property
    def spec_hash(self) -> str:
        return hashlib.sha256(_canonical(self.raw).encode()).hexdigest()

    @property
    def p_regime(self) -> str | None:
        """``"p<=2"`` or ``"p>=2"`` (``p = 2`` belongs to both)."""
        if self.p is None:
            return None
        return "p<=2" if self.p <= 2 else "p>=2"


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    half_width: float
    window: tuple
    n_points: int
    shift: float = 1.0

    def to_json(self):
        return {"slope": self.slope, "intercept": self.intercept, "half_width": self.half_width,
                "window": list(self.window), "n_points": self.n_points, "shift": self.shift}


@dataclass
class RateTable:
    """Rows ``(t, value, stderr)``."""

    t: np.ndarray
    value: np.ndarray
    stderr: np.ndarray
    fit: RateFit | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.value = np.asarray(self.value, dtype=float)
        self.stderr = np.asarray(self.stderr, dtype=float)

    def __len__(self):
        return self.t.size

    def rows(self):
        return list(zip(self.t.tolist(), self.value.tolist(), self.stderr.tolist()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "value", "stderr"])
        for row in self.rows():
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, path_or_text) -> RateTable:
        text = path_or_text
        if "\n" not in str(path_or_text):
            with open(path_or_text) as fh:
                text = fh.read()
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls(
            [float(r["t"]) for r in rows],
            [float(r["value"]) for r in rows],
            [float(r.get("stderr") or 0.0) for r in rows],
        )


def fit_rate(table: RateTable, window=None, shift: float = 1.0) -> RateFit:
    """Weighted least-squares slope of ``log value`` against ``log(t + shift)``.

    Only rows with ``value > 0`` and ``stderr < value / 3`` inside the
    closed ``window`` are used; weights are inverse squared relative standard
    errors (floored so exact rows get equal weight). The half-width is the
    95% Student-t interval of the slope.
    """
    t, v, s = table.t, table.value, table.stderr
    keep = (v > 0) & (s < v / 3.0) & np.isfinite(v) & (t + shift > 0)
    if window is not None:
        keep &= (t >= window[0]) & (t <= window[1])
    n = int(keep.sum())
    if n < 4:
        raise TooFewPoints(f"{n} admissible rows; at least 4 are needed")
    x = np.log(t[keep] + shift)
    y = np.log(v[keep])
    rel = np.maximum(s[keep] / v[keep], REL_FLOOR)
    w = 1.0 / rel ** 2
    w = w / w.sum()
    xm, ym = float(w @ x), float(w @ y)
    sxx = float(w @ (x - xm) ** 2)
    if sxx <= 0:
        raise TooFewPoints("fit window holds a single distinct time")
    slope = float(w @ ((x - xm) * (y - ym))) / sxx
    intercept = ym - slope * xm
    resid = y - intercept - slope * x
    # w sums to one: the residual variance is rescaled by the effective count
    s2 = float(w @ resid ** 2) * n / (n - 2)
    se = math.sqrt(s2 / (n * sxx)) if s2 > 0 else 0.0
    hw = float(stats.t.ppf(0.975, n - 2) * se)
    tk = t[keep]
    return RateFit(slope, float(intercept), hw, (float(tk.min()), float(tk.max())), n, float(shift))


def _maybe_fit(table, spec, do_fit):
    if not do_fit:
        return table
    keep = (table.value > 0) & (table.stderr < table.value / 3.0)
    if not keep.any():
        raise SignalBelowNoise("every row fails the stderr < value/3 rule")
    table.fit = fit_rate(table, spec.window, spec.shift)
    return table


# --------------------------------------------------------------------------
# weak convergence (dual Monte Carlo)


def _canonical_offsets(ends):
    # (R, n, d) -> translation- and order-invariant keys
    if ends.shape[2] == 1:
        s = np.sort(ends[:, :, 0], axis=1)
        return s - s[:, :1]
    keys = []
    for row in ends:
        pts = sorted(map(tuple, row.tolist()))
        base = pts[0]
        keys.append([c - b for p in pts for c, b in zip(p, base)])
    return np.asarray(keys, dtype=np.int64)


def _cylinder_values(measure, ends):
    d = ends.shape[2]
    keys = _canonical_offsets(ends)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    probs = np.array([measure.cylinder_prob(u.reshape(-1, d)) for u in uniq])
    return probs[inv.ravel()]


def run_weak_convergence(spec: ExperimentSpec, fit: bool = True, n_jobs: int = 1) -> RateTable:
    """``|nu S(t) f_A - rho^{|A|}|`` by duality: ``E_dual[nu(all endpoints occupied)]``."""
    nu = spec.measure
    if nu is None or isinstance(nu, PointMass):
        raise PreconditionError("weak convergence needs a random translation-invariant measure")
    n = spec.sites.shape[0]
    if n < 2:
        raise PreconditionError(
            "|A| = 1: the single-site expectation equals the density at every t, nothing decays"
        )
    ends = dual.dual_endpoints(spec.kernel, spec.sites, spec.times, spec.replicas, spec.seed, n_jobs)
    target = nu.density ** n
    vals, errs, signed = [], [], []
    for g in range(len(spec.times)):
        c = _cylinder_values(nu, ends[g]) - target
        est = float(c.mean())
        signed.append(est)
        vals.append(abs(est))
        errs.append(float(c.std(ddof=1) / math.sqrt(c.size)))
    table = RateTable(spec.times, vals, errs, extras={"signed": signed, "target": target})
    return _maybe_fit(table, spec, fit)


# --------------------------------------------------------------------------
# exact torus helpers


def _require_L(spec):
    if spec.torus_L is None:
        raise PreconditionError("this experiment needs torus_L")
    return spec.torus_L


def _flat_sites(sites, L, d):
    return np.ravel_multi_index(tuple(np.mod(sites[:, i], L) for i in range(d)), (L,) * d)


def _dual_laws(spec):
    """Exact time-``t`` laws of the dual ``n``-subset chain started from ``A``."""
    L = _require_L(spec)
    gen = n_particle_generator(spec.kernel, L, spec.sites.shape[0])
    probs, tails = gen.distribution_grid(gen.index_of(spec.sites), list(spec.times))
    return gen, probs, tails


def _eta_samples(spec, L, count, tag=21):
    rng = block_rng(spec.seed, 0, tag)
    return spec.measure.sample_torus(L, rng, size=count)


def run_lp_convergence(spec: ExperimentSpec, fit: bool = True) -> RateTable:
    """``int nu(d eta) |delta_eta S(t) f_A - rho^{|A|}|^p`` with exact inner values."""
    L = _require_L(spec)
    nu = spec.measure
    if nu is None:
        raise PreconditionError("lp_convergence needs a measure")
    n = spec.sites.shape[0]
    target = nu.density ** n
    S = spec.replicas
    if isinstance(nu, PointMass) and nu.config.is_constant:
        # every dual state sees the same occupation; skip the truncated chain
        tails = np.zeros(1)
        inner = np.full((len(spec.times), S), target)
    else:
        gen, probs, tails = _dual_laws(spec)
        etas = _eta_samples(spec, L, S)
        inner = np.empty((len(spec.times), S))
        for c0 in range(0, S, ETA_CHUNK):
            occ = np.all(etas[c0:c0 + ETA_CHUNK][:, gen.states] == 1, axis=2).astype(float)
            inner[:, c0:c0 + ETA_CHUNK] = probs @ occ.T
    dev = np.abs(inner - target) ** spec.p
    vals = dev.mean(axis=1)
    errs = dev.std(axis=1, ddof=1) / math.sqrt(S)
    table = RateTable(spec.times, vals, errs,
                      extras={"p": spec.p, "regime": spec.p_regime, "target": target,
                              "uniformization_tail": float(tails.max())})
    return _maybe_fit(table, spec, fit)


def _loglog_slope(t, v):
    # slope of log(v * sqrt(t)) against log log t
    keep = (v > 0) & (t > 1)
    if keep.sum() < 2:
        return None
    x = np.log(np.log(t[keep]))
    y = np.log(v[keep] * np.sqrt(t[keep]))
    return float(np.polyfit(x, y, 1)[0])


def run_vfunction(spec: ExperimentSpec, mode: str | None = None, fit: bool = True) -> RateTable:
    """``|E prod eta_t(x_i) - prod E eta_t(x_i)|`` computed exactly on the torus.

    ``sup_config`` and ``Xphi_config`` use the deterministic configuration of
    a point-mass measure; ``averaged`` averages the signed difference over
    ``replicas`` samples of the measure before taking the absolute value.
    """
    if mode is None:
        mode = {"vfunction_sup": "sup_config", "vfunction_Xphi": "Xphi_config",
                "vfunction_averaged": "averaged"}[spec.kind]
    if mode not in ("sup_config", "Xphi_config", "averaged"):
        raise PreconditionError(f"unknown mode {mode!r}")
    L = _require_L(spec)
    d = spec.kernel.d
    nu = spec.measure
    idx = _flat_sites(spec.sites, L, d)
    times = np.asarray(spec.times)
    if mode in ("sup_config", "Xphi_config"):
        if not isinstance(nu, PointMass):
            raise PreconditionError(f"{mode} needs a configuration (point-mass measure)")
        eta = nu.config.on_torus(L)
        if eta.is_constant:
            vals = np.zeros(times.size)
        else:
            gen, probs, _ = _dual_laws(spec)
            occ = gen.occupation_products(eta.array.ravel())
            vals = np.empty(times.size)
            for g, t in enumerate(times):
                rho = exact_rho(spec.kernel, eta, t).ravel()
                vals[g] = abs(float(probs[g] @ occ) - float(np.prod(rho[idx])))
        table = RateTable(times, vals, np.zeros(times.size), extras={"mode": mode})
        if mode == "sup_config":
            table.extras["loglog_slope"] = _loglog_slope(times, vals)
        return _maybe_fit(table, spec, fit)

    if nu is None or isinstance(nu, PointMass):
        raise PreconditionError("averaged mode needs a random measure")
    gen, probs, _ = _dual_laws(spec)
    S = spec.replicas
    etas = _eta_samples(spec, L, S, tag=22).astype(float)
    diffs = np.empty((times.size, S))
    for g, t in enumerate(times):
        td = transition_distribution(spec.kernel, t, L=L)
        p = td.probs.ravel()
        coords = np.stack(np.unravel_index(np.arange(L ** d), (L,) * d), axis=-1)
        rho_sites = []
        for x in idx:
            xc = np.unravel_index(x, (L,) * d)
            rel = np.ravel_multi_index(tuple(np.mod(coords[:, i] - xc[i], L) for i in range(d)), (L,) * d)
            rho_sites.append(etas @ p[rel])
        prod = np.prod(np.stack(rho_sites), axis=0)
        corr = np.empty(S)
        for c0 in range(0, S, ETA_CHUNK):
            occ = np.all(etas[c0:c0 + ETA_CHUNK][:, gen.states] == 1, axis=2).astype(float)
            corr[c0:c0 + ETA_CHUNK] = occ @ probs[g]
        diffs[g] = corr - prod
    mean = diffs.mean(axis=1)
    errs = diffs.std(axis=1, ddof=1) / math.sqrt(S)
    table = RateTable(times, np.abs(mean), errs, extras={"mode": mode, "signed": mean.tolist()})
    return _maybe_fit(table, spec, fit)


# --------------------------------------------------------------------------
# gradient sums


@dataclass
class GradientSumsResult:
    t: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    error: np.ndarray
    fit_s1: RateFit | None
    fit_s2: RateFit | None
    d: int

    def rows(self):
        return list(zip(self.t.tolist(), self.s1.tolist(), self.s2.tolist()))

    def table(self, quantity="S2") -> RateTable:
        v = self.s1 if quantity == "S1" else self.s2
        return RateTable(self.t, v, np.zeros(self.t.size),
                         fit=self.fit_s1 if quantity == "S1" else self.fit_s2)

    @property
    def s2_ok(self) -> bool | None:
        """For ``d = 1``: whether the S2 slope is at most ``-1 + 0.1``."""
        if self.d != 1 or self.fit_s2 is None:
            return None
        return self.fit_s2.slope <= -0.9


def run_gradient_sums(spec: ExperimentSpec, axis: int = 0, fit: bool = True) -> GradientSumsResult:
    """Exact ``S1(t)``, ``S2(t)`` along ``axis`` over the time grid."""
    t = np.asarray(spec.times)
    res = [gradient_sums(spec.kernel, s, axis) for s in t]
    s1 = np.array([r.s1 for r in res])
    s2 = np.array([r.s2 for r in res])
    err = np.array([r.error_bound for r in res])
    out = GradientSumsResult(t, s1, s2, err, None, None, spec.kernel.d)
    if fit:
        out.fit_s1 = fit_rate(RateTable(t, s1, np.zeros(t.size)), spec.window, spec.shift)
        out.fit_s2 = fit_rate(RateTable(t, s2, np.zeros(t.size)), spec.window, spec.shift)
    return out


# --------------------------------------------------------------------------
# identity sweep


@dataclass
class SweepReport:
    rows: list
    max_gap: float
    max_lhs: float
    mc: dict | None
    gap_tol: float = 1e-6

    @property
    def max_abs_z(self) -> float:
        if not self.mc:
            return 0.0
        return max(abs(self.mc["z_lhs"]), abs(self.mc["z_rhs"]), abs(self.mc["z_cross"]))

    @property
    def passed(self) -> bool:
        return self.max_gap <= self.gap_tol and self.max_abs_z <= 4.0

    def to_json(self):
        return {"rows": self.rows, "max_gap": self.max_gap, "max_lhs": self.max_lhs,
                "max_abs_z": self.max_abs_z, "mc": self.mc, "passed": self.passed}


def sweep_cases(Ls=(6, 8), ns=(2, 3), times=(0.5, 1.0, 2.0), n_random=12, seed=0):
    """``(eta, A, t)`` triples: random, step and constant configurations."""
    rng = block_rng(seed, 0, 31)
    cases = []
    for L in Ls:
        etas = [("step", LatticeConfiguration.step(1).on_torus(L)),
                ("const1", LatticeConfiguration.constant(1).on_torus(L)),
                ("const0", LatticeConfiguration.constant(0).on_torus(L))]
        for i in range(n_random):
            bits = rng.integers(0, 2, L)
            etas.append((f"random{i}", LatticeConfiguration.explicit(bits)))
        for n in ns:
            A = np.sort(rng.choice(L, size=n, replace=False))
            for name, eta in etas:
                for t in times:
                    cases.append((L, name, eta, A, float(t)))
    return cases


def run_basic_identity_sweep(spec: ExperimentSpec | None = None, mc: bool = True) -> SweepReport:
    """Exact identity over the sweep plus an optional Monte Carlo leg."""
    sw = dict(spec.sweep) if spec is not None else {}
    kernel = spec.kernel if spec is not None else None
    if kernel is None:
        from .kernel import nearest_neighbor

        kernel = nearest_neighbor(1)
    cases = sweep_cases(tuple(sw.get("L", (6, 8))), tuple(sw.get("n", (2, 3))),
                        tuple(sw.get("times", (0.5, 1.0, 2.0))), int(sw.get("n_random", 12)),
                        int(spec.seed if spec is not None else 0))
    rows = []
    for L, name, eta, A, t in cases:
        r = exact_basic_identity(kernel, eta, A, t)
        rows.append({"L": L, "eta": name, "A": A.tolist(), "t": t, "lhs": r.lhs, "rhs": r.rhs,
                     "gap": r.gap, "error_budget": r.error_budget})
    max_gap = max(r["gap"] for r in rows)
    max_lhs = max(r["lhs"] for r in rows)
    mc_out = None
    if mc and sw.get("mc", True):
        reps = int(sw.get("mc_replicas", spec.replicas if spec is not None else 100_000))
        t = float(sw.get("mc_t", 1.0))
        L_ref = int(sw.get("mc_L", 64))
        step = LatticeConfiguration.step(kernel.d)
        A = np.array([[0], [1]]) if kernel.d == 1 else np.array([[0] * kernel.d, [1] + [0] * (kernel.d - 1)])
        ex = exact_basic_identity(kernel, step.on_torus(L_ref), A, t)
        seed = spec.seed if spec is not None else 0
        lhs = dual.estimate_basic_lhs(kernel, step, A, t, reps, seed)
        rhs = dual.estimate_basic_rhs(kernel, step, A, t, reps, seed)
        mc_out = {
            "t": t, "replicas": reps, "exact_lhs": ex.lhs, "exact_rhs": ex.rhs,
            "mc_lhs": lhs.estimate, "mc_lhs_stderr": lhs.stderr,
            "mc_rhs": rhs.estimate, "mc_rhs_stderr": rhs.stderr,
            "z_lhs": (lhs.estimate - ex.lhs) / lhs.stderr,
            "z_rhs": (rhs.estimate - ex.rhs) / rhs.stderr,
            "z_cross": (lhs.estimate - rhs.estimate) / math.hypot(lhs.stderr, rhs.stderr),
        }
    return SweepReport(rows, float(max_gap), float(max_lhs), mc_out, float(sw.get("gap_tol", 1e-6)))


# --------------------------------------------------------------------------


def run_experiment(spec: ExperimentSpec, n_jobs: int = 1):
    """Dispatch on ``spec.kind``; returns a RateTable, GradientSumsResult or SweepReport."""
    k = spec.kind
    if k == "weak_convergence":
        return run_weak_convergence(spec, n_jobs=n_jobs)
    if k == "lp_convergence":
        return run_lp_convergence(spec)
    if k.startswith("vfunction_"):
        return run_vfunction(spec)
    if k == "gradient_sums":
        return run_gradient_sums(spec)
    return run_basic_identity_sweep(spec)
