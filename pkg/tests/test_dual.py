import csv
import math

import numpy as np
import pytest

from ssep.dual import (
    chi_square_gof,
    chi_square_two_sample,
    collision_rate_check,
    dual_endpoints,
    estimate_basic_lhs,
    estimate_basic_rhs,
    rho_on_box,
    simulate_coupled,
    simulate_coupled_batch,
    simulate_dual_exclusion,
)
from ssep.errors import RhoGridTooCoarse
from ssep.exact import exact_basic_identity, exact_rho
from ssep.kernel import make_kernel, transition_distribution
from ssep.measures import LatticeConfiguration

STEP = LatticeConfiguration.step()
ONES = LatticeConfiguration.constant(1)


@pytest.fixture(scope="module")
def step_exact(nn1):
    # L = 64 is wide enough that wrap-around is invisible at t = 1
    return exact_basic_identity(nn1, STEP, [0, 1], 1.0, L=64)


# -- exclusion walkers ---------------------------------------------------------------

def test_single_walker_law(nn1):
    t = 2.0
    ends = dual_endpoints(nn1, [0], [t], 100_000, seed=1)[0, :, 0, :]
    td = transition_distribution(nn1, t)
    _, _, p = chi_square_gof(ends, lambda pts: td.prob(pts[:, 0]))
    assert p > 0.01


def test_single_walker_law_d2(nn2):
    t = 1.5
    ends = dual_endpoints(nn2, [[0, 0]], [t], 50_000, seed=4)[0, :, 0, :]
    td = transition_distribution(nn2, t)
    _, _, p = chi_square_gof(ends, lambda pts: td.prob(pts))
    assert p > 0.01


def test_positions_stay_distinct(nn1):
    pos = dual_endpoints(nn1, [0, 10], [0.1], 20_000, seed=2)[0]
    assert np.all(pos[:, 0, 0] != pos[:, 1, 0])
    pos = dual_endpoints(nn1, [0, 1, 2, 3], [0.5, 3.0], 5_000, seed=3)
    for g in range(2):
        s = np.sort(pos[g, :, :, 0], axis=1)
        assert np.all(np.diff(s, axis=1) != 0)


def test_time_zero_unchanged(nn2):
    res = simulate_dual_exclusion(nn2, [[0, 0], [1, 0]], 0.0, seed=5)
    assert res.positions.tolist() == [[0, 0], [1, 0]]


def test_path_is_consistent(nn1):
    res = simulate_dual_exclusion(nn1, [0, 1, 2], 3.0, seed=9, path=True)
    pos = {i: np.array([x]) for i, x in enumerate([0, 1, 2])}
    for _, i, src, dst in res.path:
        assert np.array_equal(pos[i], src)
        pos[i] = np.asarray(dst)
    assert all(np.array_equal(pos[i], res.positions[i]) for i in range(3))


# -- coupling -------------------------------------------------------------------

def test_far_sites_rarely_collide(nn1):
    b = simulate_coupled_batch(nn1, [0, 5], 0.01, 100_000, seed=0)
    assert np.mean(b.M[:, 0] >= 1) < 1e-3


def test_x_equals_y_before_first_collision(nn1):
    for seed in range(30):
        rec = simulate_coupled(nn1, [0, 1, 3], 2.0, seed)
        if rec.before_first is not None:
            assert np.array_equal(rec.before_first.X, rec.before_first.Y)
        else:
            assert np.array_equal(rec.X, rec.Y)
    b = simulate_coupled_batch(nn1, [0, 1, 3], 2.0, 20_000, seed=1)
    assert b.mismatch_before_first == 0


def test_mark_is_fair_coin(nn1):
    b = simulate_coupled_batch(nn1, [0, 1], 2.0, 100_000, seed=7)
    assert b.n_collisions > 10_000
    assert abs(b.E_mean - 0.5) <= 4 * math.sqrt(0.25 / b.n_collisions)


@pytest.mark.parametrize("i", [0, 1])
def test_y_marginal_is_free_walk(nn1, i):
    sites, t = [0, 1], 1.5
    b = simulate_coupled_batch(nn1, sites, t, 50_000, seed=11)
    td = transition_distribution(nn1, t)
    _, _, p = chi_square_gof(b.Y[:, i, :], lambda pts: td.prob(pts[:, 0] - sites[i]))
    assert p > 0.01


def test_x_marginal_matches_exclusion(nn1):
    sites, t = [0, 1, 3], 1.0
    b = simulate_coupled_batch(nn1, sites, t, 30_000, seed=12)
    ref = dual_endpoints(nn1, sites, [t], 30_000, seed=13)[0]
    ka = [tuple(sorted(r)) for r in b.X[:, :, 0].tolist()]
    kb = [tuple(sorted(r)) for r in ref[:, :, 0].tolist()]
    _, _, p = chi_square_two_sample(ka, kb)
    assert p > 0.01


def test_collision_compensator(nn1):
    rep = collision_rate_check(nn1, [0, 1], 1.0, 100_000, seed=3)
    assert rep.ok, rep.to_json()


def test_collision_far_and_short(nn1):
    rep = collision_rate_check(nn1, [0, 10], 0.05, 20_000, seed=3)
    assert rep.empirical_mean <= 1e-4
    assert rep.compensator < 1e-8


def test_collision_time_zero(nn1):
    rep = collision_rate_check(nn1, [0, 1], 0.0, 1000, seed=3)
    assert rep.empirical_mean == 0.0 and rep.compensator == 0.0


def test_coupled_record_bytes_deterministic(nn1):
    a = simulate_coupled(nn1, [0, 1, 2], 3.0, seed=21)
    b = simulate_coupled(nn1, [0, 1, 2], 3.0, seed=21)
    assert a.to_bytes() == b.to_bytes()
    assert a.n_collisions == sum(a.M.values())


def test_trace_csv(nn1, tmp_path):
    rec = simulate_coupled(nn1, [0, 1], 2.0, seed=4)
    path = tmp_path / "trace.csv"
    rec.trace_csv(path)
    rows = list(csv.DictReader(path.open()))
    assert rows and set(rows[0]) == {"time", "particle", "from", "to", "mark_tag", "collision"}
    assert {r["mark_tag"] for r in rows} <= {"N", "N0", "free"}
    # a collision spans several rows (both labels, plus the Y jump at the first one)
    assert len({r["time"] for r in rows if r["collision"] == "1"}) == rec.n_collisions
    times = [float(r["time"]) for r in rows]
    assert times == sorted(times)


# -- rho on Z ----------------------------------------------------------------------

def test_rho_on_box_step(nn1):
    rho, err = rho_on_box(nn1, STEP, 1.0, [0], [0])
    exact = exact_rho(nn1, STEP, 1.0, L=64)[0]
    assert abs(rho[0] - exact) <= 1e-9 + err


def test_rho_on_box_periodic_reading(nn1):
    eta = LatticeConfiguration.from_string("0110")
    rho, _ = rho_on_box(nn1, eta, 0.0, [-2], [5])
    assert rho.tolist() == [1, 0, 0, 1, 1, 0, 0, 1]


# -- estimators ----------------------------------------------------------------------

def test_lhs_constant(nn1):
    est = estimate_basic_lhs(nn1, ONES, [0, 1], 1.0, 1000, seed=0)
    assert tuple(est) == (0.0, 0.0)


def test_lhs_single_site(nn1):
    est, se = estimate_basic_lhs(nn1, STEP, [0], 2.0, 50_000, seed=1)
    assert abs(est) <= 4 * se


def test_lhs_matches_exact(nn1, step_exact):
    est, se = estimate_basic_lhs(nn1, STEP, [0, 1], 1.0, 100_000, seed=2)
    assert abs(est - step_exact.lhs) <= 4 * se


def test_rhs_trivial_cases(nn1):
    assert tuple(estimate_basic_rhs(nn1, ONES, [0, 1], 1.0, 100, seed=0)) == (0.0, 0.0)
    assert tuple(estimate_basic_rhs(nn1, STEP, [0], 1.0, 100, seed=0)) == (0.0, 0.0)


def test_rhs_matches_exact(nn1, step_exact):
    res = estimate_basic_rhs(nn1, STEP, [0, 1], 1.0, 100_000, seed=3)
    assert abs(res.estimate - step_exact.rhs) <= 4 * res.stderr
    assert res.bias_bound <= 0.1 * res.stderr


def test_lhs_rhs_cross(nn1):
    k = make_kernel(1, [((1,), 0.35), ((-1,), 0.35), ((2,), 0.15), ((-2,), 0.15)])
    eta = LatticeConfiguration.periodic([1, 1, 0])
    sites = [0, 1, 4]
    lhs = estimate_basic_lhs(k, eta, sites, 0.8, 60_000, seed=4)
    rhs = estimate_basic_rhs(k, eta, sites, 0.8, 60_000, seed=5)
    assert abs(lhs.estimate - rhs.estimate) <= 4 * math.hypot(lhs.stderr, rhs.stderr)
    assert lhs.estimate <= 4 * lhs.stderr
    assert rhs.estimate <= 0


def test_rho_grid_too_coarse(nn1):
    with pytest.raises(RhoGridTooCoarse):
        estimate_basic_rhs(nn1, STEP, [0, 1], 1.0, 10_000, seed=0, rho_step=1.0)


def test_worker_count_independence(nn1):
    a = estimate_basic_lhs(nn1, STEP, [0, 2], 1.0, 25_000, seed=8, n_jobs=1)
    b = estimate_basic_lhs(nn1, STEP, [0, 2], 1.0, 25_000, seed=8, n_jobs=2)
    assert (a.estimate, a.stderr) == (b.estimate, b.stderr)
