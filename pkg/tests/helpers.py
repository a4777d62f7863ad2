"""Shared oracles and generators for the test suite.

The brute-force convolutions here are deliberately independent of the
package's sparse accumulation path: plain nested loops over dictionary
items, no boxes, no symmetrization.
"""

import itertools

import numpy as np

from qpwave.series import QPSeries

# Frequencies with healthy Diophantine and separation margins, used as the
# default "accepted" instances across tests.  GOOD_LAM clears the
# first-scale separation threshold 2*sqrt(a) up to a ~ 0.5; the d=2 one only
# up to a ~ 2e-3 (margins shrink fast with dimension).
GOOD_LAM = (1.111050100586316, 1.4225429688021372)
GOOD_JT = (1, 1)
GOOD_LAM_D2 = (1.4454299788962155, 1.1401582190443373,
               1.0719768142666535, 1.1866526052832143)
GOOD_JT_D2 = (1, 0, 0, 1)


def brute_convolve(A: dict, B: dict) -> dict:
    out = {}
    for ja, va in A.items():
        for jb, vb in B.items():
            j = tuple(x + y for x, y in zip(ja, jb))
            out[j] = out.get(j, 0.0) + va * vb
    return out


def brute_conv_power(A: dict, m: int) -> dict:
    out = dict(A)
    for _ in range(m - 1):
        out = brute_convolve(out, A)
    return out


def seed_series(d: int, a: float) -> QPSeries:
    """The pinned seed profile with all-ones blocks."""
    j = (1,) * (2 * d)
    from qpwave.lattice import orbit

    return QPSeries(d, {o: a / 2**d for o in orbit(j)})


def random_symmetric_series(d: int, rng, n_orbits: int = 4, box_n: int = 4,
                            scale: float = 1.0) -> QPSeries:
    canon = {}
    tries = 0
    while len(canon) < n_orbits and tries < 200:
        tries += 1
        j = tuple(int(rng.integers(-box_n, box_n + 1)) for _ in range(2 * d))
        from qpwave.lattice import canonical

        canon[canonical(j)] = float(rng.normal()) * scale
    return QPSeries.from_canonical(d, canon)


def profile_values(series: QPSeries, lam, xs: np.ndarray) -> np.ndarray:
    """Vectorized cosine-sum evaluation over many points (d = 1 only)."""
    assert series.d == 1
    total = np.zeros_like(xs, dtype=float)
    for j, v in series.canonical_items():
        if j == (0, 0):
            total += v
        else:
            w = j[0] * lam[0] + j[1] * lam[1]
            total += 2.0 * v * np.cos(w * xs)
    return total
