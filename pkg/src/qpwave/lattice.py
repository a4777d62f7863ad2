"""Index arithmetic on the doubled lattice Z^(2d).

A lattice site j = (j_1, ..., j_d) consists of d integer pairs ("blocks");
it is stored flattened as a tuple of 2d ints, so the block dimension is
always recoverable as len(j) // 2.  A frequency vector lambda has the same
block layout with real pairs, each component restricted to (1/2, 3/2).

The per-block sign-flip group sigma_k in {+1, -1} acting as
j_k -> sigma_k * j_k is the symmetry group of even cosine profiles; orbits
under this action are the atomic units that coefficient maps and region
truncations must respect.

Norm convention: |j| is the l-infinity norm over all 2d flattened integer
coordinates, so the ball |j| <= N is exactly the cube [-N, N]^(2d).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

# A lattice site / frequency, flattened to length 2d.
Index = tuple[int, ...]
Frequency = tuple[float, ...]

NORM_CONVENTION = "linf"


def blocks(j):
    """Split a flattened index (or frequency) into its d pairs."""
    return [(j[2 * k], j[2 * k + 1]) for k in range(len(j) // 2)]


def block_count(j) -> int:
    if len(j) % 2 != 0:
        raise ValueError(f"flattened index must have even length, got {len(j)}")
    return len(j) // 2


def linf(j) -> int:
    """l-infinity norm over the flattened coordinates."""
    return max(abs(c) for c in j) if j else 0


def block_inner(j_k, lam_k) -> float:
    """Inner product of one integer block with one frequency block."""
    return j_k[0] * lam_k[0] + j_k[1] * lam_k[1]


def symbol(j: Index, lam: Frequency) -> float:
    """Dispersion symbol: sum over blocks of (j_k . lambda_k)^2."""
    if len(j) != len(lam):
        raise ValueError(f"dimension mismatch: index has {len(j)} coordinates, frequency {len(lam)}")
    s = 0.0
    for k in range(0, len(j), 2):
        v = j[k] * lam[k] + j[k + 1] * lam[k + 1]
        s += v * v
    return s


def nonzero_block_count(j: Index) -> int:
    """Number of blocks of j that are not the zero pair."""
    return sum(1 for k in range(0, len(j), 2) if j[k] != 0 or j[k + 1] != 0)


def orbit(j: Index) -> frozenset[Index]:
    """All per-block sign flips of j; size is 2**nonzero_block_count(j)."""
    d = block_count(j)
    out = set()
    for signs in itertools.product((1, -1), repeat=d):
        jj = []
        for k in range(d):
            jj.append(signs[k] * j[2 * k])
            jj.append(signs[k] * j[2 * k + 1])
        out.add(tuple(jj))
    return frozenset(out)


def canonical(j: Index) -> Index:
    """Deterministic orbit representative: first nonzero entry of each block positive."""
    out = list(j)
    for k in range(0, len(j), 2):
        a, b = j[k], j[k + 1]
        if a < 0 or (a == 0 and b < 0):
            out[k], out[k + 1] = -a, -b
    return tuple(out)


def is_canonical(j: Index) -> bool:
    for k in range(0, len(j), 2):
        a, b = j[k], j[k + 1]
        if a < 0 or (a == 0 and b < 0):
            return False
    return True


def validate_frequency(lam, d: int | None = None):
    """Check a flattened frequency vector: even length, components in (1/2, 3/2)."""
    if len(lam) % 2 != 0:
        raise ValueError("frequency must have an even number of components")
    if d is not None and len(lam) != 2 * d:
        raise ValueError(f"frequency has {len(lam)} components, expected {2 * d}")
    for c in lam:
        if not (0.5 < c < 1.5):
            raise ValueError(f"frequency component {c} outside the open interval (1/2, 3/2)")
    return tuple(float(c) for c in lam)


FULL_BOX = "full_box"
BOX_MINUS_S = "box_minus_s"
GENERALIZED_BOX = "generalized_box"


@dataclass(frozen=True)
class Region:
    """A finite index region: a cube, a cube minus an explicit set, or a cube
    minus a sign-constrained orthant strip.

    ``constraints`` is a per-flattened-coordinate relation, each one of
    '<', '>' or None; a site is removed from the generalized box when it
    satisfies *all* active constraints (at least two must be active).
    """

    kind: str
    N: int
    S: tuple[Index, ...] = ()
    constraints: tuple[str | None, ...] = ()

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("region scale N must be >= 1")
        if self.kind not in (FULL_BOX, BOX_MINUS_S, GENERALIZED_BOX):
            raise ValueError(f"unknown region kind {self.kind!r}")
        if self.kind == BOX_MINUS_S:
            for s in self.S:
                if linf(s) > self.N:
                    raise ValueError(f"excluded site {s} lies outside the box of scale {self.N}")
        if self.kind == GENERALIZED_BOX:
            active = sum(1 for c in self.constraints if c is not None)
            if active < 2:
                raise ValueError("generalized box needs at least two active sign constraints")
            for c in self.constraints:
                if c not in ("<", ">", None):
                    raise ValueError(f"bad sign constraint {c!r}")

    @staticmethod
    def full_box(N: int) -> "Region":
        return Region(FULL_BOX, N)

    @staticmethod
    def box_minus(N: int, S) -> "Region":
        return Region(BOX_MINUS_S, N, S=tuple(sorted(set(map(tuple, S)))))

    @staticmethod
    def generalized(N: int, constraints) -> "Region":
        return Region(GENERALIZED_BOX, N, constraints=tuple(constraints))

    def contains(self, j: Index) -> bool:
        if linf(j) > self.N:
            return False
        if self.kind == BOX_MINUS_S:
            return j not in self.S
        if self.kind == GENERALIZED_BOX:
            return not self._excised(j)
        return True

    def _excised(self, j) -> bool:
        for c, x in zip(self.constraints, j):
            if c == "<" and not (x < 0):
                return False
            if c == ">" and not (x > 0):
                return False
        return True

    def contains_array(self, pts: np.ndarray) -> np.ndarray:
        """Vectorized membership for an (n, 2d) int array."""
        mask = np.all(np.abs(pts) <= self.N, axis=1)
        if self.kind == BOX_MINUS_S and self.S:
            bound = max(self.N, max(linf(s) for s in self.S))
            codes = encode(pts, bound)
            s_codes = encode(np.asarray(self.S, dtype=np.int64), bound)
            mask &= ~np.isin(codes, s_codes)
        elif self.kind == GENERALIZED_BOX:
            excised = np.ones(len(pts), dtype=bool)
            for i, c in enumerate(self.constraints):
                if c == "<":
                    excised &= pts[:, i] < 0
                elif c == ">":
                    excised &= pts[:, i] > 0
            mask &= ~excised
        return mask

    def is_orbit_closed(self) -> bool:
        """Whether membership is invariant under per-block sign flips."""
        if self.kind == FULL_BOX:
            return True
        if self.kind == BOX_MINUS_S:
            return all(o in self.S for s in self.S for o in orbit(s))
        return False

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "N": self.N,
            "S": [list(s) for s in self.S],
            "constraints": list(self.constraints),
        }


def enumerate_region(region: Region, d: int) -> list[Index]:
    """All sites of the region in lexicographic order on flattened coordinates."""
    if region.kind == GENERALIZED_BOX and len(region.constraints) != 2 * d:
        raise ValueError(f"generalized box has {len(region.constraints)} constraints, expected {2 * d}")
    rng = range(-region.N, region.N + 1)
    out = []
    for j in itertools.product(rng, repeat=2 * d):
        if region.kind == FULL_BOX:
            out.append(j)
        elif region.contains(j):
            out.append(j)
    return out


def sites_array(region: Region, d: int) -> np.ndarray:
    """Region sites as an (n, 2d) int64 array in lexicographic order."""
    N = region.N
    grids = np.meshgrid(*([np.arange(-N, N + 1, dtype=np.int64)] * (2 * d)), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    mask = region.contains_array(pts)
    return pts[mask]


def encode(pts: np.ndarray, bound: int) -> np.ndarray:
    """Injective int64 code for integer rows with coordinates in [-bound, bound].

    The first coordinate is most significant, so code order equals
    lexicographic order on the rows and lex-sorted site lists have sorted
    codes (searchsorted-ready).
    """
    base = 2 * bound + 1
    ncol = pts.shape[1]
    weights = base ** np.arange(ncol - 1, -1, -1, dtype=np.int64)
    return (pts.astype(np.int64) + bound) @ weights


def canonicalize_array(pts: np.ndarray) -> np.ndarray:
    """Vectorized per-block canonical representative of each row."""
    out = pts.copy()
    for k in range(0, pts.shape[1], 2):
        a, b = out[:, k], out[:, k + 1]
        flip = (a < 0) | ((a == 0) & (b < 0))
        out[flip, k] *= -1
        out[flip, k + 1] *= -1
    return out


def orbit_sizes_array(pts: np.ndarray) -> np.ndarray:
    """2**(number of nonzero blocks) per row."""
    n_nonzero = np.zeros(len(pts), dtype=np.int64)
    for k in range(0, pts.shape[1], 2):
        n_nonzero += (pts[:, k] != 0) | (pts[:, k + 1] != 0)
    return 2 ** n_nonzero


def block_inners_array(pts: np.ndarray, lam: Frequency) -> np.ndarray:
    """(n, d) array of per-block inner products j_k . lambda_k."""
    d = pts.shape[1] // 2
    out = np.empty((len(pts), d))
    for k in range(d):
        out[:, k] = pts[:, 2 * k] * lam[2 * k] + pts[:, 2 * k + 1] * lam[2 * k + 1]
    return out


def symbol_array(pts: np.ndarray, lam: Frequency, theta=None) -> np.ndarray:
    """Vectorized symbol, optionally with per-block shifts theta (length d)."""
    inners = block_inners_array(pts, lam)
    if theta is not None:
        inners = inners + np.asarray(theta)
    return np.sum(inners * inners, axis=1)
