"""Poisson weights for uniformization with a directly summed tail."""

import math

import numpy as np

from .errors import TruncationBudgetExceeded

DEFAULT_MAX_TERMS = 1_000_000


def poisson_pmf(mu, kmax):
    """Return ``P[Pois(mu) = k]`` for ``k = 0..kmax`` computed in log space."""
    k = np.arange(kmax + 1, dtype=float)
    if mu == 0.0:
        out = np.zeros(kmax + 1)
        out[0] = 1.0
        return out
    logp = -mu + k * math.log(mu) - np.array([math.lgamma(x + 1.0) for x in k])
    return np.exp(logp)


def poisson_cutoff(mu, tol, max_terms=DEFAULT_MAX_TERMS):
    """Smallest ``K`` with ``P[Pois(mu) > K] <= tol``.

    Returns ``(K, weights[0..K], tail)``. The tail is the complementary mass
    summed term by term from ``K + 1`` upward (no closed-form approximation),
    so it is a certified bound up to floating-point rounding.
    """
    if mu < 0:
        raise ValueError("Poisson mean must be nonnegative")
    if mu == 0.0:
        return 0, np.ones(1), 0.0
    # beyond mu + 40 sqrt(mu) + 60 the mass is below 1e-300 for every mu
    kmax = math.ceil(mu + 40.0 * math.sqrt(mu) + 60.0)
    if kmax > max_terms + 200:
        guess = math.ceil(mu + 8.0 * math.sqrt(mu))
        if guess > max_terms:
            raise TruncationBudgetExceeded(
                f"uniformization needs about {guess} terms for mean {mu:g}; "
                f"budget is {max_terms}"
            )
    pmf = poisson_pmf(mu, kmax)
    # tails[k] = sum_{j > k} pmf[j], accumulated from the far end
    tails = np.concatenate([np.cumsum(pmf[::-1])[::-1][1:], [0.0]])
    ok = np.flatnonzero(tails <= tol)
    K = int(ok[0])
    if K > max_terms:
        raise TruncationBudgetExceeded(
            f"uniformization needs {K} terms for mean {mu:g}; budget is {max_terms}"
        )
    return K, pmf[: K + 1], float(tails[K])
