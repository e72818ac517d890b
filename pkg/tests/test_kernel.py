import math

import numpy as np
import pytest
from conftest import bessel_p
from hypothesis import given, settings
from hypothesis import strategies as st

from ssep.errors import (
    AsymmetricKernel,
    Decomposable,
    NotNormalized,
    TruncationBudgetExceeded,
    ZeroDisplacement,
)
from ssep.kernel import (
    gradient_sums,
    kernel_from_json,
    make_kernel,
    nearest_neighbor,
    sample_increments,
    sample_walk_increment,
    transition_distribution,
)

# -- construction -------------------------------------------------------------

def test_nearest_neighbor_d1():
    k = make_kernel(1, [((1,), 0.5), ((-1,), 0.5)])
    assert k.second_moment == 1.0
    assert k.rate(1) == 0.5 and k.rate(2) == 0.0


def test_nearest_neighbor_d2_second_moment():
    k = make_kernel(2, [((1, 0), 0.25), ((-1, 0), 0.25), ((0, 1), 0.25), ((0, -1), 0.25)])
    assert k.second_moment == pytest.approx(1.0, abs=1e-15)


def test_even_sublattice_is_decomposable():
    with pytest.raises(Decomposable):
        make_kernel(1, [((2,), 0.5), ((-2,), 0.5)])


def test_diagonal_only_d2_is_decomposable():
    # (1,1) and (1,-1) generate the checkerboard sublattice
    with pytest.raises(Decomposable):
        make_kernel(2, [((1, 1), 0.25), ((-1, -1), 0.25), ((1, -1), 0.25), ((-1, 1), 0.25)])


def test_coprime_steps_generate_z():
    k = make_kernel(1, [((2,), 0.3), ((-2,), 0.3), ((3,), 0.2), ((-3,), 0.2)])
    assert k.radius == 3


@pytest.mark.parametrize(
    "support, err",
    [
        ([((1,), 0.6), ((-1,), 0.4)], AsymmetricKernel),
        ([((1,), 0.45), ((-1,), 0.45)], NotNormalized),
        ([((0,), 0.2), ((1,), 0.4), ((-1,), 0.4)], ZeroDisplacement),
    ],
)
def test_invalid_kernels(support, err):
    with pytest.raises(err):
        make_kernel(1, support)


def test_kernel_json_roundtrip(nn2):
    k = kernel_from_json(nn2.to_json())
    assert k.d == 2 and k.second_moment == nn2.second_moment


# -- transition distributions -------------------------------------------------

def test_time_zero_is_point_mass(nn1):
    td = transition_distribution(nn1, 0.0)
    assert td.tail_bound == 0.0
    assert td.prob(0) == 1.0 and td.prob(1) == 0.0


@pytest.mark.parametrize("x", [0, 1, -1, 2, 5])
def test_bessel_oracle_t1(nn1, x):
    td = transition_distribution(nn1, 1.0)
    assert td.prob(x) == pytest.approx(bessel_p(x, 1.0), abs=1e-12)


def test_bessel_reference_values(nn1):
    td = transition_distribution(nn1, 1.0)
    assert float(td.prob(0)) == pytest.approx(0.465759, abs=1e-6)
    assert float(td.prob(1)) == pytest.approx(0.207910, abs=1e-6)
    assert td.prob(1) == pytest.approx(td.prob(-1), abs=1e-15)


@pytest.mark.parametrize("t", [0.3, 2.0, 17.0])
def test_bessel_oracle_various_times(nn1, t):
    td = transition_distribution(nn1, t)
    xs = np.arange(-12, 13)
    oracle = np.array([bessel_p(x, t) for x in xs])
    assert np.max(np.abs(td.prob(xs) - oracle)) < 1e-12


@pytest.mark.parametrize("t", [0.5, 3.0, 20.0])
def test_mass_and_tail(nn2, t):
    td = transition_distribution(nn2, t, tol=1e-10)
    assert td.tail_bound <= 1e-10
    assert 1 - 1e-12 <= td.mass + td.tail_bound <= 1 + 1e-12
    assert np.all(td.probs >= 0)


def test_torus_mass_one(nn1):
    td = transition_distribution(nn1, 5.0, L=16)
    assert td.mass == pytest.approx(1.0, abs=1e-12)


def test_symmetry_d2(nn2):
    p = transition_distribution(nn2, 3.0).probs
    assert np.max(np.abs(p - p[::-1, ::-1])) < 1e-12
    assert np.max(np.abs(p - p.T)) < 1e-12


@pytest.mark.parametrize("s, t", [(0.5, 0.7), (1.0, 3.0), (2.5, 4.0)])
def test_chapman_kolmogorov_torus(nn1, s, t):
    L, tol = 24, 1e-12
    ps = transition_distribution(nn1, s, L=L, tol=tol)
    pt = transition_distribution(nn1, t, L=L, tol=tol)
    pst = transition_distribution(nn1, s + t, L=L, tol=tol)
    conv = np.real(np.fft.ifft(np.fft.fft(ps.probs) * np.fft.fft(pt.probs)))
    assert np.max(np.abs(conv - pst.probs)) <= 10 * (ps.tail_bound + pt.tail_bound) + 1e-15


def test_chapman_kolmogorov_torus_d2(nn2):
    L, tol = 10, 1e-12
    ps = transition_distribution(nn2, 0.8, L=L, tol=tol)
    pt = transition_distribution(nn2, 1.3, L=L, tol=tol)
    pst = transition_distribution(nn2, 2.1, L=L, tol=tol)
    conv = np.real(np.fft.ifft2(np.fft.fft2(ps.probs) * np.fft.fft2(pt.probs)))
    assert np.max(np.abs(conv - pst.probs)) <= 10 * (ps.tail_bound + pt.tail_bound) + 1e-15


@pytest.mark.parametrize("d", [1, 2])
def test_sup_norm_decay(d):
    k = nearest_neighbor(d)
    ts = np.array([1, 2, 4, 8, 16, 32, 64, 128, 256], dtype=float)
    m = np.array([transition_distribution(k, t, tol=1e-10).probs.max() for t in ts])
    assert np.all(np.diff(m) <= 0)
    slope = np.polyfit(np.log(ts[3:]), np.log(m[3:]), 1)[0]
    assert slope <= -d / 2 + 0.1


def test_truncation_budget(nn1):
    with pytest.raises(TruncationBudgetExceeded):
        transition_distribution(nn1, 50.0, max_terms=10)


def test_bad_arguments(nn1):
    with pytest.raises(ValueError):
        transition_distribution(nn1, -1.0)
    with pytest.raises(ValueError):
        transition_distribution(nn1, 1.0, tol=1e-3)
    with pytest.raises(ValueError):
        transition_distribution(nn1, 1.0, L=2)


# -- gradient sums -------------------------------------------------------------

def test_gradient_sums_time_zero(nn2):
    g = gradient_sums(nn2, 0.0)
    assert (g.s1, g.s2) == (2.0, 2.0)


def test_gradient_sums_bessel(nn1):
    t = 1.0
    diffs = [bessel_p(x + 1, t) - bessel_p(x, t) for x in range(-41, 41)]
    s1 = math.fsum(abs(v) for v in diffs)
    s2 = math.fsum(v * v for v in diffs)
    g = gradient_sums(nn1, t)
    assert g.s1 == pytest.approx(s1, abs=1e-10)
    assert g.s2 == pytest.approx(s2, abs=1e-10)
    assert g.error_bound <= 4e-11


def test_gradient_sum_slopes_d1(nn1):
    ts = np.array([16, 32, 64, 128, 256], dtype=float)
    g = [gradient_sums(nn1, t) for t in ts]
    s1 = np.polyfit(np.log(ts), np.log([x.s1 for x in g]), 1)[0]
    s2 = np.polyfit(np.log(ts), np.log([x.s2 for x in g]), 1)[0]
    assert -0.6 <= s1 <= -0.4
    assert s2 <= -1 + 0.1


# -- sampling ------------------------------------------------------------------

def test_increment_moments(nn1):
    rng = np.random.default_rng(0)
    z = sample_increments(nn1, rng, 10 ** 6)[:, 0]
    n = z.size
    assert abs(z.mean()) <= 4 / math.sqrt(n)
    frac = (z == 1).mean()
    assert abs(frac - 0.5) <= 4 * math.sqrt(0.25 / n)


def test_increment_determinism(nn2):
    a = [sample_walk_increment(nn2, r) for r in [np.random.default_rng(3)] for _ in range(50)]
    b = [sample_walk_increment(nn2, r) for r in [np.random.default_rng(3)] for _ in range(50)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_increment_frequencies_non_nn():
    k = make_kernel(1, [((1,), 0.3), ((-1,), 0.3), ((2,), 0.2), ((-2,), 0.2)])
    z = sample_increments(k, np.random.default_rng(1), 200_000)[:, 0]
    for v, p in [(1, 0.3), (-1, 0.3), (2, 0.2), (-2, 0.2)]:
        f = (z == v).mean()
        assert abs(f - p) <= 4 * math.sqrt(p * (1 - p) / z.size)


# -- properties ----------------------------------------------------------------

@st.composite
def symmetric_kernels(draw):
    m = draw(st.integers(1, 3))
    steps = draw(st.lists(st.integers(1, 4), min_size=m, max_size=m, unique=True))
    if math.gcd(*steps) != 1:
        steps.append(1)
    w = draw(st.lists(st.floats(0.05, 1.0), min_size=len(steps), max_size=len(steps)))
    tot = 2 * sum(w)
    support = []
    for s, wi in zip(steps, w):
        support += [((s,), wi / tot), ((-s,), wi / tot)]
    return make_kernel(1, support)


@settings(max_examples=25, deadline=None)
@given(symmetric_kernels(), st.floats(0.0, 6.0))
def test_property_symmetric_and_normalized(k, t):
    td = transition_distribution(k, t, tol=1e-10)
    p = td.probs
    assert np.max(np.abs(p - p[::-1])) < 1e-12
    assert 1 - 1e-12 <= td.mass + td.tail_bound <= 1 + 1e-12


@settings(max_examples=20, deadline=None)
@given(symmetric_kernels(), st.floats(0.1, 3.0), st.floats(0.1, 3.0))
def test_property_chapman_kolmogorov(k, s, t):
    L = 31
    ps = transition_distribution(k, s, L=L)
    pt = transition_distribution(k, t, L=L)
    pst = transition_distribution(k, s + t, L=L)
    conv = np.real(np.fft.ifft(np.fft.fft(ps.probs) * np.fft.fft(pt.probs)))
    assert np.max(np.abs(conv - pst.probs)) <= 10 * (ps.tail_bound + pt.tail_bound) + 1e-14
