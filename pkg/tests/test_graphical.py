import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssep.dual import chi_square_gof
from ssep.errors import (
    DomainMismatch,
    DuplicateSites,
    HorizonTooLarge,
    WindowOutOfRange,
)
from ssep.graphical import (
    TAG_N,
    TAG_N0,
    ClockStream,
    dual_walks,
    evolve_configuration,
    sample_clock_stream,
    stirring_map,
    torus_edges,
)
from ssep.kernel import make_kernel, transition_distribution
from ssep.measures import LatticeConfiguration


def handmade(kernel, L, rings, T=1.0):
    times = np.array([r[0] for r in rings], dtype=float)
    a = np.array([min(r[1], r[2]) for r in rings], dtype=np.int64)
    b = np.array([max(r[1], r[2]) for r in rings], dtype=np.int64)
    return ClockStream(L, kernel.d, kernel, T, None, times, a, b, np.zeros(len(rings), dtype=np.int8))


def test_torus_edges_nn(nn1):
    a, _, r = torus_edges(nn1, 4)
    assert len(a) == 4 and np.all(r == 0.5)


def test_empty_horizon(nn1):
    c = sample_clock_stream(nn1, 8, 0.0, 1)
    assert len(c) == 0


def test_stream_sorted_and_tagged(nn2):
    c = sample_clock_stream(nn2, 6, 3.0, 7, with_N0=True)
    assert np.all(np.diff(c.times) >= 0)
    assert np.all((c.times > 0) & (c.times <= 3.0))
    assert set(np.unique(c.tags).tolist()) == {TAG_N, TAG_N0}
    assert np.all(c.a < c.b)


def test_event_count_mean(nn1):
    counts = np.array([len(sample_clock_stream(nn1, 4, 100.0, s)) for s in range(10_000)])
    # 4 edges of rate 1/2 each over T = 100
    assert abs(counts.mean() - 200) <= 4 * math.sqrt(200 / counts.size)


def test_stream_determinism(nn1, tmp_path):
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    sample_clock_stream(nn1, 10, 5.0, 99, with_N0=True).to_csv(p1)
    sample_clock_stream(nn1, 10, 5.0, 99, with_N0=True).to_csv(p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_text().splitlines()[0] == "time,x,y,tag"


def test_horizon_budget(nn1):
    with pytest.raises(HorizonTooLarge):
        sample_clock_stream(nn1, 100, 1e6, 0, max_events=1000)


# -- stirring maps -------------------------------------------------------------

def test_empty_window_is_identity(nn1):
    c = handmade(nn1, 6, [(0.5, 1, 2)])
    xi = stirring_map(c, 0.6, 0.3)
    assert xi.image.tolist() == list(range(6)) and xi.n_events == 0


def test_single_ring_is_transposition(nn1):
    c = handmade(nn1, 6, [(0.5, 1, 2)])
    xi = stirring_map(c, 0.0, 1.0)
    assert xi.image.tolist() == [0, 2, 1, 3, 4, 5]


def test_window_out_of_range(nn1):
    c = handmade(nn1, 6, [(0.5, 1, 2)])
    with pytest.raises(WindowOutOfRange):
        stirring_map(c, 0.5, 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_sign_matches_event_parity(nn1, seed):
    c = sample_clock_stream(nn1, 12, 4.0, seed)
    xi = stirring_map(c, 1.0, 2.5, check=True)
    assert xi.sign() == (-1) ** xi.n_events


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.floats(0.0, 2.0))
def test_cocycle(seed, s, t, u):
    k = make_kernel(1, [((1,), 0.3), ((-1,), 0.3), ((2,), 0.2), ((-2,), 0.2)])
    c = sample_clock_stream(k, 9, 6.0, seed)
    lhs = stirring_map(c, s, t + u)
    rhs = stirring_map(c, s, t).compose(stirring_map(c, s + t, u))
    assert np.array_equal(lhs.image, rhs.image)
    assert np.array_equal(np.sort(lhs.image), np.arange(9))


# -- evolution and duality ---------------------------------------------------------

def test_full_configuration_invariant(nn2):
    c = sample_clock_stream(nn2, 5, 2.0, 3)
    eta = LatticeConfiguration.explicit(np.ones((5, 5), dtype=int))
    assert evolve_configuration(eta, c, 2.0).array.min() == 1


def test_time_zero_evolution(nn1):
    c = sample_clock_stream(nn1, 8, 2.0, 3)
    eta = LatticeConfiguration.from_string("10110010")
    assert np.array_equal(evolve_configuration(eta, c, 0.0).array, eta.array)


def test_single_swap_evolution(nn1):
    c = handmade(nn1, 6, [(0.3, 2, 3)])
    eta = LatticeConfiguration.from_string("111000")
    assert "".join(map(str, evolve_configuration(eta, c, 1.0).array)) == "110100"


def test_evolution_domain(nn1):
    c = sample_clock_stream(nn1, 8, 1.0, 0)
    with pytest.raises(DomainMismatch):
        evolve_configuration(LatticeConfiguration.from_string("0101"), c, 1.0)


def test_particle_number_conserved(nn1):
    eta = LatticeConfiguration.from_string("1101000111010000")
    for seed in range(10):
        c = sample_clock_stream(nn1, 16, 3.0, seed)
        assert evolve_configuration(eta, c, 3.0).array.sum() == eta.array.sum()


def test_no_events_constant_paths(nn1):
    c = handmade(nn1, 6, [])
    paths = dual_walks(c, 1.0, [0, 3])
    assert [p.end for p in paths] == [0, 3]
    assert paths[0].jumps.size == 0


def test_duplicate_sites(nn1):
    c = sample_clock_stream(nn1, 8, 1.0, 0)
    with pytest.raises(DuplicateSites):
        dual_walks(c, 1.0, [2, 2])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.0, 3.0))
def test_pathwise_duality(seed, t):
    L = 10
    rng = np.random.default_rng(seed)
    eta = LatticeConfiguration.explicit(rng.integers(0, 2, L))
    c = sample_clock_stream(make_kernel(1, [((1,), 0.4), ((-1,), 0.4), ((3,), 0.1), ((-3,), 0.1)]),
                            L, 3.0, seed)
    fwd = evolve_configuration(eta, c, t).array
    sites = list(range(L))
    ends = [p.end for p in dual_walks(c, t, sites)]
    assert np.array_equal(fwd, eta.array[ends])
    # the endpoints form a permutation (walks never collide)
    assert sorted(ends) == sites


def test_dual_path_reading(nn1):
    c = handmade(nn1, 6, [(0.2, 1, 2), (0.7, 2, 3)])
    (p,) = dual_walks(c, 1.0, [3])
    # backward: ring at 0.7 (s = 0.3) moves 3 -> 2, ring at 0.2 (s = 0.8) moves 2 -> 1
    assert p.at(0.0) == 3 and p.at(0.5) == 2 and p.end == 1
    assert np.allclose(p.jumps, [0.3, 0.8])


def test_dual_marginal_matches_kernel(nn1):
    L, t, R = 64, 16.0, 10_000
    ends = np.array([dual_walks(sample_clock_stream(nn1, L, t, s), t, [0])[0].end for s in range(R)])
    td = transition_distribution(nn1, t, L=L)
    _, _, p = chi_square_gof(ends[:, None], lambda pts: td.probs[pts[:, 0]])
    assert p > 0.01


def test_self_duality_in_law(nn1):
    L, t, R = 12, 1.5, 4000
    eta = LatticeConfiguration.from_string("111100001100")
    A = [3, 4]
    fwd = np.empty(R)
    dual = np.empty(R)
    for s in range(R):
        c1 = sample_clock_stream(nn1, L, t, 2 * s)
        fwd[s] = np.all(evolve_configuration(eta, c1, t).array[A] == 1)
        c2 = sample_clock_stream(nn1, L, t, 2 * s + 1)
        ends = [p.end for p in dual_walks(c2, t, A)]
        dual[s] = np.all(eta.array[ends] == 1)
    se = math.sqrt((fwd.var() + dual.var()) / R)
    assert abs(fwd.mean() - dual.mean()) <= 4 * se
