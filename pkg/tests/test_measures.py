import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssep.errors import DomainMismatch, PreconditionError, WindowTooLarge
from ssep.kernel import nearest_neighbor
from ssep.measures import (
    Bernoulli,
    LatticeConfiguration,
    LocalRuleField,
    PointMass,
    check_Xphi_membership,
    configuration_from_json,
    correlation_table,
    cylinder_prob,
    measure_from_json,
    power_profile,
    sample_configuration,
)


def brute_majority_pair(r):
    """P[eta(0) = eta(r) = 1] for the majority-of-3 field, by listing bits -1..r+1."""
    m = r + 3
    hits = 0
    for bits in itertools.product((0, 1), repeat=m):
        a = sum(bits[0:3]) >= 2
        b = sum(bits[r:r + 3]) >= 2
        hits += a and b
    return hits / 2 ** m


# -- configurations ------------------------------------------------------------

def test_step_rule():
    eta = LatticeConfiguration.step()
    assert eta([-3, 0, 1, 7]).tolist() == [0, 0, 1, 1]


def test_step_rule_axis_d2():
    eta = LatticeConfiguration.step(d=2, axis=1, threshold=2)
    assert eta([[5, 1], [0, 2]]).tolist() == [0, 1]


def test_periodic_and_explicit_wrap():
    eta = LatticeConfiguration.periodic([0, 1])
    assert eta([0, 1, 2, -1]).tolist() == [0, 1, 0, 1]
    ex = LatticeConfiguration.from_string("1100")
    assert ex([4, 5, -1]).tolist() == [1, 1, 0]


def test_invalid_configurations():
    with pytest.raises(ValueError):
        LatticeConfiguration.explicit([0, 2])
    with pytest.raises(ValueError):
        LatticeConfiguration.constant(3)
    with pytest.raises(DomainMismatch):
        LatticeConfiguration.periodic([0, 1, 1]).on_torus(8)
    with pytest.raises(DomainMismatch):
        LatticeConfiguration.from_string("0101").on_torus(8)


@pytest.mark.parametrize("eta", [
    LatticeConfiguration.step(),
    LatticeConfiguration.periodic([1, 0, 0]),
    LatticeConfiguration.constant(1, d=2),
    LatticeConfiguration.from_string("0110"),
])
def test_configuration_json_roundtrip(eta):
    back = configuration_from_json(eta.to_json())
    sites = np.arange(-6, 7) if eta.d == 1 else np.array([[1, 2], [-3, 0]])
    assert np.array_equal(back(sites), eta(sites))


# -- sampling --------------------------------------------------------------------

def test_bernoulli_zero_is_empty():
    for L in (1, 7, 64):
        assert sample_configuration(Bernoulli(0.0), L, 5).array.sum() == 0


def test_bernoulli_half_density():
    L, seeds = 1024, 100
    tot = sum(int(sample_configuration(Bernoulli(0.5), L, s).array.sum()) for s in range(seeds))
    n = L * seeds
    assert abs(tot / n - 0.5) <= 4 * math.sqrt(0.25 / n)


def test_point_mass_step_on_torus():
    eta = sample_configuration(PointMass(LatticeConfiguration.step()), 8, 0)
    # representatives 0,1,2,3,4,-3,-2,-1
    assert eta.array.tolist() == [0, 1, 1, 1, 1, 0, 0, 0]


def test_sampling_deterministic():
    m = LocalRuleField("majority3", 1)
    a = sample_configuration(m, 50, 11).array
    b = sample_configuration(m, 50, 11).array
    assert np.array_equal(a, b)


# -- cylinder probabilities -----------------------------------------------------------

@pytest.mark.parametrize("rho, n", [(0.3, 1), (0.3, 4), (0.8, 6)])
def test_bernoulli_cylinder(rho, n):
    assert cylinder_prob(Bernoulli(rho), list(range(n))) == rho ** n


def test_identity_rule_is_fair_bits():
    m = LocalRuleField("identity", 0)
    assert cylinder_prob(m, [0, 1, 5]) == 0.125


def test_majority_far_sites_factorize():
    m = LocalRuleField("majority3", 1)
    assert cylinder_prob(m, [0, 10]) == brute_majority_pair(10) == 0.25


@pytest.mark.parametrize("r", [1, 2, 3])
def test_majority_pair_brute_force(r):
    m = LocalRuleField("majority3", 1)
    assert cylinder_prob(m, [0, r]) == pytest.approx(brute_majority_pair(r), abs=1e-15)


def test_majority_correlation_table():
    tab = correlation_table(LocalRuleField("majority3", 1), 6)
    assert tab[0] == 0.25
    assert tab[1] == pytest.approx(1 / 8, abs=1e-15)
    assert tab[2] == pytest.approx(1 / 16, abs=1e-15)
    assert np.all(tab[3:] == 0.0)


def test_bernoulli_correlation_table():
    tab = correlation_table(Bernoulli(0.3), 4)
    assert tab[0] == pytest.approx(0.21)
    assert np.all(np.abs(tab[1:]) < 1e-15)


def test_correlation_table_rejects_point_mass():
    with pytest.raises(PreconditionError):
        correlation_table(PointMass(LatticeConfiguration.step()), 3)


def test_window_too_large():
    m = LocalRuleField("majority3", 1, d=2)
    with pytest.raises(WindowTooLarge):
        cylinder_prob(m, [[i, 0] for i in range(6)])


def test_measure_json():
    m = measure_from_json({"type": "local_rule", "rule": "majority3", "range": 1})
    assert m == LocalRuleField("majority3", 1)
    assert measure_from_json({"type": "bernoulli", "rho": 0.5}).density == 0.5
    pm = measure_from_json({"type": "config", "rule": "step"})
    assert pm.density == 0.5


@pytest.mark.parametrize("measure", [Bernoulli(0.3), LocalRuleField("majority3", 1)])
def test_empirical_matches_cylinder(measure):
    rng = np.random.default_rng(2024)
    draws = measure.sample_torus(16, rng, size=100_000)
    for sites in ([0], [0, 1], [0, 2]):
        freq = np.all(draws[:, sites] == 1, axis=1).mean()
        p = cylinder_prob(measure, sites)
        assert abs(freq - p) <= 4 * math.sqrt(p * (1 - p) / draws.shape[0])


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.integers(-6, 6), min_size=1, max_size=4),
    st.integers(-50, 50),
)
def test_translation_invariance(sites, v):
    m = LocalRuleField("majority3", 1)
    shifted = [s + v for s in sites]
    assert cylinder_prob(m, sites) == cylinder_prob(m, shifted)


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.integers(0, 4), min_size=1, max_size=2, unique=True),
    st.lists(st.integers(0, 4), min_size=1, max_size=2, unique=True),
    st.integers(3, 20),
)
def test_factorization_beyond_range(a, b, gap):
    m = LocalRuleField("majority3", 1)
    far = [x + 4 + gap for x in b]
    assert cylinder_prob(m, a + far) == pytest.approx(cylinder_prob(m, a) * cylinder_prob(m, far), abs=1e-15)


# -- profiles and X_phi ------------------------------------------------------------

def test_power_profile_check():
    phi = power_profile(4.0)
    assert phi.check([0, 1, 2, 10, 100])
    assert phi(0) == 4.0


def test_xphi_constant_passes():
    rep = check_Xphi_membership(LatticeConfiguration.constant(1), nearest_neighbor(1),
                                power_profile(1e-6), [1, 4], L=16)
    assert rep.passed and rep.max_ratio == 0.0


def test_xphi_period_two_passes():
    eta = LatticeConfiguration.periodic([0, 1])
    times = [1, 2, 4, 8, 16, 32, 64]
    rep = check_Xphi_membership(eta, nearest_neighbor(1), power_profile(4.0), times, L=32)
    assert rep.passed
    assert rep.to_json()["grid"]["times"] == [float(t) for t in times]


def test_xphi_step_fails():
    eta = LatticeConfiguration.step()
    rep = check_Xphi_membership(eta, nearest_neighbor(1), power_profile(1.0), [1, 4, 16, 64], L=256)
    assert not rep.passed
    assert rep.max_ratio > 1.0
