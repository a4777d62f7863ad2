"""Truncated linearized operators: assembly, application, inversion, profiling.

The operator acts on a finite site list as

    (T v)(j) = diag(j) v(j) - sum_j' kernel(j - j') v(j'),
    diag(j)  = sum_k ((j_k . lambda_k) + theta_k)^2 - E,

with kernel = (2p+1) * u^(*2p).  theta enters only the diagonal; the kernel
is theta-independent.  Translating the site list by j0 is exactly
equivalent to shifting theta_k by j0_k . lambda_k, which
covariance_discrepancy measures.

Two realizations coexist:

* the full matrix on an explicit site list, needed for theta-shifted
  diagnostics (the sign-flip symmetry is broken when theta != 0), for
  Green's-function decay profiles, and for the covariance identity;
* a symmetry-reduced matrix on canonical orbit representatives (weighted to
  stay symmetric), used by the Newton solver at theta = 0 where the
  symmetric subspace is invariant.

Linear solves are diagonally scaled, factorized, and iteratively refined;
the residual contract is enforced on every return and its violation is the
resonance signal SingularOperator.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import lattice
from .lattice import Frequency, Index, Region
from .series import DecayFit, QPSeries, conv_power, fit_shell_decay

# Largest reduced dimension handled by direct factorization; beyond it the
# solver switches to the diagonally scaled MINRES path.
DENSE_DIMENSION_CAP = 20000

# Hard iteration cap for the iterative strategy, in units of the dimension.
ITERATIVE_CAP_FACTOR = 10

# A solve whose floating-point residual floor exceeds this has no
# significant digits left; treat it as resonance.
SINGULAR_FLOOR = 1e-6

_EPS = np.finfo(float).eps


class SingularOperator(Exception):
    """The factorization found (numerical) rank deficiency, or the solve
    could not reach its residual contract: a resonant lambda/E."""


def _kernel_series(u: QPSeries, p: int, radius: int) -> QPSeries:
    """(2p+1) * u^(*2p), truncated to the difference box of the site list."""
    if p < 1:
        raise ValueError("nonlinearity exponent p must be >= 1")
    if u.support_size() == 0:
        return QPSeries.zero(u.d)
    box = Region.full_box(max(1, 2 * radius))
    return conv_power(u, 2 * p, box).scale(2.0 * p + 1.0)


class LinearizedOperator:
    """Full realization on an explicit, lexicographically ordered site list."""

    def __init__(self, d, p, sites, diag, kernel, theta, E, lam, region=None):
        self.d = d
        self.p = p
        self.sites = sites              # (n, 2d) int64, lex sorted
        self.diag = diag                # (n,) float
        self.kernel = kernel            # QPSeries
        self.theta = tuple(theta)
        self.E = E
        self.lam = tuple(lam)
        self.region = region            # Region when built from one, else None
        self._bound = int(np.max(np.abs(sites))) if len(sites) else 0
        self._codes = lattice.encode(sites, self._kernel_bound())
        self._dense = None

    def _kernel_bound(self) -> int:
        kr = self.kernel.support_radius()
        return self._bound + kr + 1

    @property
    def n(self) -> int:
        return len(self.sites)

    def site_index(self) -> dict[Index, int]:
        return {tuple(s): i for i, s in enumerate(self.sites)}

    def entry(self, j: Index, j2: Index) -> float:
        val = -self.kernel.get(tuple(a - b for a, b in zip(j, j2)))
        if j == j2:
            i = int(np.searchsorted(self._codes, lattice.encode(np.array([j]), self._kernel_bound())[0]))
            val += self.diag[i]
        return val

    def to_dense(self) -> np.ndarray:
        if self._dense is not None:
            return self._dense
        n = self.n
        M = np.zeros((n, n))
        M[np.diag_indices(n)] = self.diag
        bound = self._kernel_bound()
        for off, val in self.kernel.items_sorted():
            src = self.sites - np.asarray(off, dtype=np.int64)
            if np.max(np.abs(src)) > bound:
                continue
            codes = lattice.encode(src, bound)
            pos = np.searchsorted(self._codes, codes)
            pos_c = np.minimum(pos, n - 1)
            hit = self._codes[pos_c] == codes
            rows = np.nonzero(hit)[0]
            M[rows, pos_c[hit]] -= val
        self._dense = M
        return M


def assemble(u: QPSeries, E: float, lam: Frequency, theta, region, p: int) -> LinearizedOperator:
    """Build the linearized operator on a Region or an explicit site list."""
    d = u.d
    if len(lam) != 2 * d:
        raise ValueError("frequency dimension mismatch")
    if theta is None:
        theta = (0.0,) * d
    if len(theta) != d:
        raise ValueError(f"theta must have {d} components")
    if isinstance(region, Region):
        sites = lattice.sites_array(region, d)
        reg = region
    else:
        sites = np.asarray(sorted(map(tuple, region)), dtype=np.int64)
        reg = None
    radius = int(np.max(np.abs(sites))) if len(sites) else 1
    kernel = _kernel_series(u, p, radius)
    diag = lattice.symbol_array(sites, lam, theta) - E
    return LinearizedOperator(d, p, sites, diag, kernel, theta, E, lam, region=reg)


def apply(T: LinearizedOperator, v: np.ndarray) -> np.ndarray:
    """Matrix-vector product in the site-list ordering."""
    v = np.asarray(v, dtype=float)
    if v.shape != (T.n,):
        raise ValueError(f"vector has shape {v.shape}, operator expects ({T.n},)")
    out = T.diag * v
    bound = T._kernel_bound()
    for off, val in T.kernel.items_sorted():
        src = T.sites - np.asarray(off, dtype=np.int64)
        codes = lattice.encode(src, bound)
        pos = np.searchsorted(T._codes, codes)
        pos_c = np.minimum(pos, T.n - 1)
        hit = T._codes[pos_c] == codes
        out[hit] -= val * v[pos_c[hit]]
    return out


def _scaling(diag_of_matrix: np.ndarray) -> np.ndarray:
    mags = np.abs(diag_of_matrix)
    top = mags.max() if len(mags) else 1.0
    floor = max(top * 1e-12, 1e-150)
    return np.sqrt(np.maximum(mags, floor))


def _lu_quiet(S: np.ndarray):
    """LU factorization with scipy's exact-singularity warning silenced;
    degenerate pivots surface as non-finite solves, handled by callers."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        return sla.lu_factor(S, check_finite=False)


def _residual_contract(M_mul, w, rhs, tol, norm_est):
    """Relative residual, and the instance's floating-point floor.

    Raises SingularOperator when the floor itself is so large that the
    solution carries no significant digits: the hallmark of a resonant
    instance that scaling made formally solvable.
    """
    r = rhs - M_mul(w)
    b_norm = float(np.linalg.norm(rhs))
    if b_norm == 0.0:
        return r, 0.0, tol
    rel = float(np.linalg.norm(r)) / b_norm
    w_norm = float(np.linalg.norm(w))
    floor = 8.0 * _EPS * norm_est * w_norm / b_norm
    if floor > SINGULAR_FLOOR:
        raise SingularOperator(
            f"solution magnitude {w_norm:.3e} leaves no significant digits "
            f"(residual floor {floor:.3e}): resonant instance"
        )
    return r, rel, max(tol, floor)


def _solve_scaled_dense(M: np.ndarray, rhs: np.ndarray, tol: float) -> np.ndarray:
    """Factorize a diagonally scaled copy and iteratively refine.

    Raises SingularOperator when the residual contract (tol, or the
    floating-point floor of the instance if larger) cannot be met.
    """
    n = M.shape[0]
    if np.linalg.norm(rhs) == 0.0:
        return np.zeros(n)
    s = _scaling(np.diag(M))
    S = M / np.outer(s, s)
    try:
        lu = _lu_quiet(S)
    except sla.LinAlgError as exc:
        raise SingularOperator(f"factorization failed: {exc}") from exc
    norm_est = float(np.abs(M).sum(axis=1).max())

    def solve_once(b):
        z = sla.lu_solve(lu, b / s, check_finite=False)
        return z / s

    w = solve_once(rhs)
    if not np.all(np.isfinite(w)):
        raise SingularOperator("factorization produced non-finite solution (zero pivot)")
    r, rel, bound = _residual_contract(lambda x: M @ x, w, rhs, tol, norm_est)
    for _ in range(4):
        if rel <= bound:
            break
        dw = solve_once(r)
        if not np.all(np.isfinite(dw)):
            raise SingularOperator("refinement produced non-finite correction")
        w = w + dw
        r, new_rel, bound = _residual_contract(lambda x: M @ x, w, rhs, tol, norm_est)
        if new_rel >= rel:
            rel = new_rel
            break
        rel = new_rel
    if rel > bound:
        raise SingularOperator(
            f"residual contract violated: relative residual {rel:.3e} > {bound:.3e}"
        )
    return w


def _solve_scaled_iterative(M_csr, rhs: np.ndarray, tol: float, maxiter: int) -> np.ndarray | None:
    """Diagonally scaled MINRES; returns None on stagnation."""
    if np.linalg.norm(rhs) == 0.0:
        return np.zeros(M_csr.shape[0])
    diag = M_csr.diagonal()
    s = _scaling(diag)
    inv_s = 1.0 / s
    Dinv = sp.diags(inv_s)
    S = (Dinv @ M_csr @ Dinv).tocsr()
    # symmetrize away round-off so MINRES sees an exactly symmetric matrix
    S = (S + S.T) * 0.5
    b = rhs * inv_s
    norm_est = float(np.abs(M_csr).sum(axis=1).max())
    z = np.zeros_like(b)
    for _ in range(3):
        dz, info = spla.minres(S, b - S @ z, rtol=max(tol, 1e-14), maxiter=maxiter)
        z = z + dz
        w = z * inv_s
        r, rel, bound = _residual_contract(lambda x: M_csr @ x, w, rhs, tol, norm_est)
        if rel <= bound:
            return w
        if info != 0 and np.linalg.norm(dz) == 0.0:
            break
    return None


def solve_linear(T: LinearizedOperator, rhs: np.ndarray, strategy: str = "auto",
                 tol: float = 1e-13) -> np.ndarray:
    """Solve T w = rhs on the operator's site list.

    strategy: 'dense' (factorization), 'iterative' (scaled MINRES with a
    hard cap of 10 * dimension iterations, falling over to dense below the
    dimension cap), or 'auto' (dense up to the cap).
    """
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (T.n,):
        raise ValueError(f"rhs has shape {rhs.shape}, operator expects ({T.n},)")
    if strategy not in ("auto", "dense", "iterative"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == "auto":
        strategy = "dense" if T.n <= DENSE_DIMENSION_CAP else "iterative"
    if strategy == "dense":
        if T.n > DENSE_DIMENSION_CAP:
            raise ValueError(f"dense strategy refused above {DENSE_DIMENSION_CAP} unknowns")
        return _solve_scaled_dense(T.to_dense(), rhs, tol)
    M = sp.csr_matrix(T.to_dense()) if T.n <= DENSE_DIMENSION_CAP else _full_csr(T)
    w = _solve_scaled_iterative(M, rhs, tol, ITERATIVE_CAP_FACTOR * T.n)
    if w is None:
        if T.n <= DENSE_DIMENSION_CAP:
            return _solve_scaled_dense(T.to_dense(), rhs, tol)
        raise SingularOperator("iterative solve stagnated above tolerance")
    return w


def _full_csr(T: LinearizedOperator) -> sp.csr_matrix:
    n = T.n
    rows = [np.arange(n)]
    cols = [np.arange(n)]
    vals = [T.diag.astype(float)]
    bound = T._kernel_bound()
    for off, val in T.kernel.items_sorted():
        src = T.sites - np.asarray(off, dtype=np.int64)
        codes = lattice.encode(src, bound)
        pos = np.searchsorted(T._codes, codes)
        pos_c = np.minimum(pos, n - 1)
        hit = T._codes[pos_c] == codes
        r = np.nonzero(hit)[0]
        rows.append(r)
        cols.append(pos_c[hit])
        vals.append(np.full(len(r), -val))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


@dataclass(frozen=True)
class GreensProfile:
    """Measured size and off-diagonal decay of an inverse operator.

    decay is None when the inverse has no off-diagonal mass beyond the
    threshold distance (e.g. a purely diagonal operator).
    """

    op_norm_inverse: float
    decay: DecayFit | None
    threshold_distance: int
    N: int

    def to_json_dict(self):
        return {
            "op_norm_inverse": self.op_norm_inverse,
            "beta": self.decay.rate if self.decay else None,
            "beta_prefactor": self.decay.prefactor if self.decay else None,
            "fit_rms": self.decay.residual_rms if self.decay else None,
            "N": self.N,
            "threshold_distance": self.threshold_distance,
        }


def _power_norm(mat_mul, mat_mul_t, n: int, rel_tol: float = 1e-6, max_iter: int = 1000) -> float:
    """Largest singular value of an implicitly given matrix via power
    iteration on G G^T, deterministic start.

    Stops when successive estimates move by well under rel_tol, so the
    remaining bias stays below rel_tol except for pathological spectra.
    """
    v = np.ones(n) / math.sqrt(n)
    sigma = 0.0
    for _ in range(max_iter):
        w = mat_mul_t(v)
        w = mat_mul(w)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        new_sigma = math.sqrt(nrm)
        v = w / nrm
        if sigma > 0 and abs(new_sigma - sigma) <= 0.02 * rel_tol * sigma:
            return new_sigma
        sigma = new_sigma
    return sigma


def greens_profile(T: LinearizedOperator) -> GreensProfile:
    """Invert T (columns via the factorized solve) and profile the inverse:
    operator-norm estimate and exponential off-diagonal decay fit beyond
    one tenth of the box scale."""
    n = T.n
    M = T.to_dense()
    s = _scaling(np.diag(M))
    S = M / np.outer(s, s)
    try:
        lu = _lu_quiet(S)
    except sla.LinAlgError as exc:
        raise SingularOperator(f"factorization failed: {exc}") from exc
    G = sla.lu_solve(lu, np.diag(1.0 / s), check_finite=False) / s[:, None]
    if not np.all(np.isfinite(G)):
        raise SingularOperator("inverse has non-finite entries (zero pivot)")

    op_norm = _power_norm(lambda x: G @ x, lambda x: G.T @ x, n)

    if T.region is not None:
        N = T.region.N
    else:
        N = int(np.max(np.abs(T.sites)))
    threshold = math.ceil(N / 10)

    # shell maxima over l-infinity site separation
    dist = np.zeros((n, n), dtype=np.int64)
    for c in range(T.sites.shape[1]):
        np.maximum(dist, np.abs(T.sites[:, c][:, None] - T.sites[:, c][None, :]), out=dist)
    shell_max: dict[int, float] = {}
    absG = np.abs(G)
    flat_d = dist.ravel()
    flat_g = absG.ravel()
    maxes = np.zeros(int(flat_d.max()) + 1)
    np.maximum.at(maxes, flat_d, flat_g)
    for sdist, m in enumerate(maxes):
        shell_max[sdist] = float(m)
    from .series import InsufficientData

    try:
        fit = fit_shell_decay(shell_max, threshold + 1)
    except InsufficientData:
        fit = None
    return GreensProfile(op_norm_inverse=float(op_norm), decay=fit,
                         threshold_distance=threshold, N=N)


def covariance_discrepancy(u: QPSeries, E: float, lam: Frequency, theta, j0: Index,
                           region: Region, p: int = 1) -> float:
    """Exactness of the lattice-translation / theta-shift identity.

    Builds the operator on the region translated by j0 at the given theta,
    and on the original region at theta shifted per block by j0_k . lambda_k,
    and returns the max absolute entry difference.  The kernel is shared by
    construction, so the discrepancy is purely the diagonal's floating-point
    associativity (and is independent of E, which cancels identically).
    """
    d = u.d
    if theta is None:
        theta = (0.0,) * d
    base_sites = lattice.sites_array(region, d)
    shifted_sites = base_sites + np.asarray(j0, dtype=np.int64)
    radius = max(int(np.max(np.abs(base_sites))), int(np.max(np.abs(shifted_sites))))
    kernel = _kernel_series(u, p, radius)
    theta2 = tuple(
        theta[k] + lattice.block_inner((j0[2 * k], j0[2 * k + 1]), (lam[2 * k], lam[2 * k + 1]))
        for k in range(d)
    )
    diag1 = lattice.symbol_array(shifted_sites, lam, theta) - E
    diag2 = lattice.symbol_array(base_sites, lam, theta2) - E
    T1 = LinearizedOperator(d, p, shifted_sites, diag1, kernel, theta, E, lam)
    T2 = LinearizedOperator(d, p, base_sites, diag2, kernel, theta2, E, lam)
    return float(np.max(np.abs(T1.to_dense() - T2.to_dense())))


class ReducedOperator:
    """The operator restricted to the sign-flip-symmetric subspace at
    theta = 0, realized on canonical orbit representatives.

    The reduced entry aggregates the kernel over the source orbit; rows and
    columns are weighted by sqrt(orbit size) so the realization stays
    symmetric.  Only valid on orbit-closed regions.
    """

    def __init__(self, u: QPSeries, E: float, lam: Frequency, region: Region, p: int):
        if not region.is_orbit_closed():
            raise ValueError("symmetry reduction needs an orbit-closed region")
        d = u.d
        self.d = d
        self.p = p
        self.E = E
        self.lam = tuple(lam)
        self.region = region
        pts = lattice.sites_array(region, d)
        canon_mask = np.all(lattice.canonicalize_array(pts) == pts, axis=1)
        self.sites = pts[canon_mask]
        self.n = len(self.sites)
        self.weights = lattice.orbit_sizes_array(self.sites).astype(float)
        self.diag = lattice.symbol_array(self.sites, lam) - E
        self.kernel = _kernel_series(u, p, region.N)
        self._bound = region.N + self.kernel.support_radius() + 1
        self._codes = lattice.encode(self.sites, self._bound)
        self._matrix = None     # dense ndarray or csr, symmetrized coordinates

    def site_list(self) -> list[Index]:
        return [tuple(map(int, s)) for s in self.sites]

    def _scatter(self, add_entry):
        """Run add_entry(rows, cols, value) for every kernel offset."""
        for off, val in self.kernel.items_sorted():
            src = self.sites - np.asarray(off, dtype=np.int64)
            inside = self.region.contains_array(src)
            if not inside.any():
                continue
            rows = np.nonzero(inside)[0]
            src_c = lattice.canonicalize_array(src[inside])
            codes = lattice.encode(src_c, self._bound)
            pos = np.searchsorted(self._codes, codes)
            pos_c = np.minimum(pos, self.n - 1)
            hit = self._codes[pos_c] == codes
            if not hit.all():
                # canonical representative of an in-region site is in-region
                # for orbit-closed regions; anything else is a bug
                raise AssertionError("canonical source site missing from region")
            add_entry(rows, pos_c, val)

    def matrix(self):
        """Symmetrized reduced matrix, dense below the cap, else CSR."""
        if self._matrix is not None:
            return self._matrix
        sq = np.sqrt(self.weights)
        if self.n <= DENSE_DIMENSION_CAP:
            M = np.zeros((self.n, self.n))
            M[np.diag_indices(self.n)] = self.diag

            def add(rows, cols, val):
                M[rows, cols] -= val

            self._scatter(add)
            M *= sq[:, None]
            M /= sq[None, :]
            self._matrix = M
        else:
            rows_l = [np.arange(self.n)]
            cols_l = [np.arange(self.n)]
            vals_l = [self.diag.astype(float)]

            def add(rows, cols, val):
                rows_l.append(rows)
                cols_l.append(cols)
                vals_l.append(-val * np.ones(len(rows)))

            self._scatter(add)
            rows = np.concatenate(rows_l)
            cols = np.concatenate(cols_l)
            vals = np.concatenate(vals_l) * sq[rows] / sq[cols]
            self._matrix = sp.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))
        return self._matrix

    def solve(self, rhs_canonical: np.ndarray, strategy: str = "auto", tol: float = 1e-13) -> np.ndarray:
        """Solve the reduced system for values on canonical sites.

        rhs_canonical holds the symmetric right-hand side's values at the
        canonical sites; the returned vector is in the same coordinates.
        """
        rhs_canonical = np.asarray(rhs_canonical, dtype=float)
        if rhs_canonical.shape != (self.n,):
            raise ValueError("rhs shape mismatch with reduced site list")
        sq = np.sqrt(self.weights)
        b = rhs_canonical * sq
        M = self.matrix()
        if strategy == "auto":
            strategy = "dense" if self.n <= DENSE_DIMENSION_CAP else "iterative"
        if strategy == "dense":
            if sp.issparse(M):
                M = M.toarray()
            z = _solve_scaled_dense(M, b, tol)
        else:
            M_csr = M if sp.issparse(M) else sp.csr_matrix(M)
            z = _solve_scaled_iterative(M_csr, b, tol, ITERATIVE_CAP_FACTOR * self.n)
            if z is None:
                if self.n <= DENSE_DIMENSION_CAP:
                    z = _solve_scaled_dense(M if not sp.issparse(M) else M.toarray(), b, tol)
                else:
                    raise SingularOperator("iterative solve stagnated above tolerance")
        return z / sq

    def solve_series(self, rhs: QPSeries, strategy: str = "auto", tol: float = 1e-13) -> QPSeries:
        """Solve with a symmetric series right-hand side, returning a series."""
        rhs_vec = np.array([rhs.get(tuple(map(int, s))) for s in self.sites])
        w = self.solve(rhs_vec, strategy=strategy, tol=tol)
        canon = {}
        for row, s in enumerate(self.sites):
            if w[row] != 0.0:
                canon[tuple(map(int, s))] = float(w[row])
        return QPSeries.from_canonical(self.d, canon)
