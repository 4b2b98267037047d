"""Truncated Hermite chaos representation of vector-valued random variables.

A random vector is stored as a dense coefficient matrix against an ordered
:class:`~pcbayes.hermite.IndexSet`: column ``j`` holds the coefficient of
basis function ``j``, so the mean is exactly column 0.  Germ variables are
global identities: position ``k`` of every multi-index always refers to the
same standard Gaussian, which is what makes merging bases of different
dimensions a pure zero-padding operation.

Moments are computed analytically from the coefficients by expanding
monomials of the vector in the Hermite algebra and reading off expectations
via orthogonality; this is exact but its cost grows combinatorially, so
assembly is capped (see :data:`MOMENT_ORDER_CAP`).  Past the cap a
:class:`MomentBudgetError` tells the caller to fall back to quadrature via
:func:`project`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations_with_replacement

import numpy as np
from numpy.polynomial import hermite_e

from . import hermite
from .hermite import IndexSet, MultiIndex, basis_matrix, graded_key, total_degree_set

#: Analytic moment assembly handles tensors up to this order (2n with n <= 3).
MOMENT_ORDER_CAP = 6
#: ... and bases with at most this many terms.
MOMENT_TERMS_CAP = 500


class BasisMismatchError(ValueError):
    """Raised when coefficient tensors cannot be aligned on a common basis."""


class MomentBudgetError(RuntimeError):
    """Raised when an analytic moment exceeds the assembly budget."""


@dataclass(frozen=True, eq=False)
class PceVector:
    """Coefficient tensor of an R^M-valued random variable.

    Parameters
    ----------
    basis:
        Ordered index set; column ``j`` of ``coeffs`` belongs to
        ``basis[j]``.
    coeffs:
        Dense matrix of shape (M, len(basis)).  Stored read-only.
    label:
        Optional display name.
    """

    basis: IndexSet
    coeffs: np.ndarray
    label: str | None = None

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.ndim == 1:
            c = c[np.newaxis, :]
        if c.ndim != 2 or c.shape[1] != len(self.basis):
            raise ValueError(
                f"coefficient matrix of shape {np.shape(self.coeffs)} does "
                f"not match basis of size {len(self.basis)}"
            )
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    @property
    def spatial_dim(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_terms(self) -> int:
        return self.coeffs.shape[1]


@dataclass(frozen=True)
class SymmetricTensor:
    """Symmetric tensor stored once per sorted index combination.

    ``values`` maps sorted tuples ``(i1 <= ... <= ik)`` to entries; lookups
    with unsorted tuples are symmetrized first, and missing combinations
    read as zero.
    """

    order: int
    dimension: int
    values: dict

    def __getitem__(self, idx) -> float:
        if isinstance(idx, (int, np.integer)):
            idx = (idx,)
        if len(idx) != self.order:
            raise ValueError(f"need {self.order} indices, got {len(idx)}")
        return self.values.get(tuple(sorted(int(i) for i in idx)), 0.0)

    def to_dense(self) -> np.ndarray:
        """Materialize the full (dimension,)*order array."""
        out = np.zeros((self.dimension,) * self.order)
        if self.order == 0:
            return out + self.values.get((), 0.0)
        for combo, v in self.values.items():
            seen = set()
            for perm in _permutations_cached(combo):
                if perm not in seen:
                    out[perm] = v
                    seen.add(perm)
        return out


@lru_cache(maxsize=None)
def _permutations_cached(combo: tuple) -> tuple:
    from itertools import permutations

    return tuple(set(permutations(combo)))


def sym_combinations(dimension: int, order: int) -> tuple:
    """Sorted index combinations ``(i1 <= ... <= ik)`` in lexicographic order.

    This is the column ordering used everywhere a symmetric tensor slot is
    flattened (cross moments, update-map blocks, Hankel systems).
    """
    return tuple(combinations_with_replacement(range(dimension), order))


def multiplicity(combo) -> float:
    """Number of distinct permutations of a sorted index combination."""
    m = math.factorial(len(combo))
    prev = None
    run = 0
    for i in list(combo) + [None]:
        if i == prev:
            run += 1
        else:
            m //= math.factorial(run)
            prev, run = i, 1
    return float(m)


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and probability weights for germ-space integration."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        weights = np.asarray(self.weights, dtype=float)
        if nodes.shape[0] != weights.size:
            raise ValueError("node and weight counts differ")
        if np.any(weights <= 0):
            raise ValueError("weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1 (probability measure)")
        nodes.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def dimension(self) -> int:
        return self.nodes.shape[1]


@lru_cache(maxsize=None)
def gauss_hermite_rule(dim: int, level: int) -> QuadratureRule:
    """Full-tensor Gauss-Hermite rule with ``level`` nodes per germ.

    Exact for polynomials of total degree <= ``2*level - 1`` per variable;
    use ``level = degree_bound + 1`` to integrate products of two basis
    functions exactly.  Node count is ``level ** dim``.
    """
    x, w = hermite_e.hermegauss(level)
    w = w / w.sum()
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    weights = np.ones(nodes.shape[0])
    for g in wgrids:
        weights = weights * g.ravel()
    return QuadratureRule(nodes, weights)


def rule_for_basis(basis: IndexSet, extra_degree: int = 0) -> QuadratureRule:
    """Rule integrating products of two basis functions (plus slack) exactly."""
    return gauss_hermite_rule(basis.dimension, basis.degree_bound + 1 + extra_degree)


# ---------------------------------------------------------------------------
# construction and basis plumbing
# ---------------------------------------------------------------------------


def independent_gaussian(mean, std, degree: int = 1, label=None) -> PceVector:
    """Gaussian vector with one germ per component and diagonal covariance.

    The basis is the full total-degree set of the requested ``degree`` (the
    extra columns are zero), which leaves room for updates and propagation
    to populate higher-order coefficients.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    std = np.broadcast_to(np.asarray(std, dtype=float), mean.shape)
    if np.any(std < 0):
        raise ValueError("std must be nonnegative")
    m = mean.size
    basis = total_degree_set(m, max(1, degree))
    coeffs = np.zeros((m, len(basis)))
    coeffs[:, 0] = mean
    for k in range(m):
        e_k = (0,) * k + (1,)
        coeffs[k, basis.index_of(e_k)] = std[k]
    return PceVector(basis, coeffs, label=label)


def from_terms(terms: dict, dimension: int, spatial_dim: int, label=None) -> PceVector:
    """Assemble a PceVector from a sparse ``{multi-index: coefficient}`` map.

    Values may be scalars (spatial_dim 1) or length-M vectors.
    """
    keys = set(terms)
    keys.add(())
    basis = IndexSet.from_indices(dimension, keys)
    coeffs = np.zeros((spatial_dim, len(basis)))
    for key, val in terms.items():
        coeffs[:, basis.index_of(key)] = val
    return PceVector(basis, coeffs, label=label)


def merge_bases(b1: IndexSet, b2: IndexSet) -> IndexSet:
    """Common refinement: union of indices in the larger germ dimension."""
    dim = max(b1.dimension, b2.dimension)
    return IndexSet.from_indices(dim, list(b1.indices) + list(b2.indices))


def rebase(q: PceVector, basis: IndexSet) -> PceVector:
    """Express ``q`` exactly on a superset basis (zero-filled columns)."""
    if basis == q.basis:
        return q
    coeffs = np.zeros((q.spatial_dim, len(basis)))
    try:
        for j, alpha in enumerate(q.basis):
            coeffs[:, basis.index_of(alpha)] = q.coeffs[:, j]
    except KeyError as exc:
        raise BasisMismatchError(
            f"target basis does not contain index {exc.args[0]}"
        ) from exc
    return PceVector(basis, coeffs, label=q.label)


def truncate(q: PceVector, basis: IndexSet) -> PceVector:
    """Orthogonal projection onto ``basis``: keep shared indices, drop the rest."""
    coeffs = np.zeros((q.spatial_dim, len(basis)))
    for j, alpha in enumerate(q.basis):
        if alpha in basis:
            coeffs[:, basis.index_of(alpha)] = q.coeffs[:, j]
    return PceVector(basis, coeffs, label=q.label)


def common_basis(q1: PceVector, q2: PceVector) -> tuple:
    """Rebase both vectors onto their merged basis."""
    if q1.basis == q2.basis:
        return q1, q2
    b = merge_bases(q1.basis, q2.basis)
    return rebase(q1, b), rebase(q2, b)


def adjoin_germs(q: PceVector, extra: int) -> PceVector:
    """View ``q`` on a germ space extended by ``extra`` fresh variables.

    The indices and coefficients are unchanged (zero padding does not move
    anything in graded-lex order); only the declared dimension grows.
    """
    if extra == 0:
        return q
    basis = IndexSet(q.basis.dimension + extra, q.basis.degree_bound, q.basis.indices)
    return PceVector(basis, q.coeffs, label=q.label)


# ---------------------------------------------------------------------------
# first and second moments
# ---------------------------------------------------------------------------


def mean(q: PceVector) -> np.ndarray:
    """Expectation vector: the coefficient of the zero multi-index."""
    return q.coeffs[:, 0].copy()


def covariance(q1: PceVector, q2: PceVector) -> np.ndarray:
    """Cross-covariance matrix ``sum_{a != 0} a! q1^a (q2^a)^T``.

    Vectors on different bases are merged onto the common refinement first.
    """
    q1, q2 = common_basis(q1, q2)
    w = q1.basis.factorial_norms[1:]
    return (q1.coeffs[:, 1:] * w) @ q2.coeffs[:, 1:].T


def second_moment_total(q: PceVector) -> float:
    """E[|q|^2] = sum_alpha alpha! |q^alpha|^2 (not centered)."""
    return float(((q.coeffs**2) * q.basis.factorial_norms).sum())


# ---------------------------------------------------------------------------
# higher moments via Hermite-algebra expansion
# ---------------------------------------------------------------------------


def _check_budget(basis: IndexSet, order: int):
    if order > MOMENT_ORDER_CAP:
        raise MomentBudgetError(
            f"analytic moments of order {order} exceed the cap "
            f"{MOMENT_ORDER_CAP}; fall back to quadrature via project()"
        )
    if len(basis) > MOMENT_TERMS_CAP:
        raise MomentBudgetError(
            f"basis with {len(basis)} terms exceeds the cap "
            f"{MOMENT_TERMS_CAP}; fall back to quadrature via project()"
        )


def _component_terms(q: PceVector) -> list:
    """Sparse per-component expansions {trimmed tuple: coefficient}."""
    out = []
    for m in range(q.spatial_dim):
        row = q.coeffs[m]
        out.append(
            {
                alpha.trimmed(): row[j]
                for j, alpha in enumerate(q.basis)
                if row[j] != 0.0
            }
        )
    return out


def _poly_mul(a: dict, b: dict) -> dict:
    """Product of two tuple-keyed Hermite expansions."""
    out = {}
    for ka, ca in a.items():
        for kb, cb in b.items():
            for g, ck in hermite.linearize_tuples(ka, kb):
                out[g] = out.get(g, 0.0) + ca * cb * ck
    return out


def symmetric_monomials(z: PceVector, order: int) -> list:
    """Hermite expansions of every monomial ``prod_{i in combo} z_i``.

    Returns a list indexed by monomial order ``k = 0 .. order``; element k
    maps each sorted combination of component indices to the expansion of
    the corresponding product as a ``{trimmed multi-index: coefficient}``
    dict.  This is the common engine behind analytic moment tensors and the
    polynomial-filter application.
    """
    _check_budget(z.basis, order)
    comps = _component_terms(z)
    levels = [{(): {(): 1.0}}]
    for k in range(1, order + 1):
        cur = {}
        for combo, poly in levels[k - 1].items():
            start = combo[-1] if combo else 0
            for i in range(start, z.spatial_dim):
                cur[combo + (i,)] = _poly_mul(poly, comps[i])
        levels.append(cur)
    return levels


def raw_moment_tensor(z: PceVector, k: int) -> SymmetricTensor:
    """Symmetrized raw moment ``E[z^{(x)k}]`` of a PCE vector.

    Entry ``(i1,...,ik)`` is ``E[z_{i1} ... z_{ik}]``, read off as the
    zero-index coefficient of the Hermite expansion of the monomial.
    """
    if k < 1:
        raise ValueError("moment order must be >= 1")
    mono = symmetric_monomials(z, k)[k]
    values = {combo: poly.get((), 0.0) for combo, poly in mono.items()}
    return SymmetricTensor(k, z.spatial_dim, values)


def _weighted_components(q: PceVector) -> dict:
    """Map trimmed index -> (M,) vector of ``alpha! * q^alpha``."""
    w = q.basis.factorial_norms
    out = {}
    for j, alpha in enumerate(q.basis):
        col = q.coeffs[:, j]
        if np.any(col):
            out[alpha.trimmed()] = w[j] * col
    return out


def cross_moment(q: PceVector, z: PceVector, k: int) -> np.ndarray:
    """Cross moments ``E[q_m * z_{i1} ... z_{ik}]``.

    Returns an array of shape (M, C(R+k-1, k)) whose columns follow
    :func:`sym_combinations`; ``k = 0`` reduces to the mean of ``q``.
    Germ positions are shared identities, so ``q`` and ``z`` may live on
    bases of different dimensions.
    """
    if k < 0:
        raise ValueError("moment order must be >= 0")
    _check_budget(q.basis, k)
    mono = symmetric_monomials(z, k)[k]
    qw = _weighted_components(q)
    combos = sym_combinations(z.spatial_dim, k)
    out = np.zeros((q.spatial_dim, len(combos)))
    for col, combo in enumerate(combos):
        poly = mono[combo]
        acc = out[:, col]
        for gamma, c in poly.items():
            vec = qw.get(gamma)
            if vec is not None:
                acc += c * vec
    return out


def cross_moment_dense(q: PceVector, z: PceVector, k: int) -> np.ndarray:
    """Cross moments as a full (M, R, ..., R) array (k trailing axes)."""
    flat = cross_moment(q, z, k)
    out = np.zeros((q.spatial_dim,) + (z.spatial_dim,) * k)
    for col, combo in enumerate(sym_combinations(z.spatial_dim, k)):
        for perm in _permutations_cached(combo):
            out[(slice(None),) + perm] = flat[:, col]
    return out


# ---------------------------------------------------------------------------
# evaluation, sampling, projection
# ---------------------------------------------------------------------------


def evaluate(q: PceVector, thetas) -> np.ndarray:
    """Evaluate the PCE at germ points; returns shape (npts, M)."""
    return basis_matrix(q.basis, thetas) @ q.coeffs.T


def sample(q: PceVector, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` realizations with a seeded generator; shape (n, M).

    Identical seeds give identical output.  Work is chunked so large sample
    counts do not materialize huge design matrices.
    """
    if n < 1:
        raise ValueError("need n >= 1 samples")
    rng = np.random.default_rng(seed)
    out = np.empty((n, q.spatial_dim))
    chunk = max(1, int(2e6) // max(1, q.n_terms))
    done = 0
    while done < n:
        take = min(chunk, n - done)
        thetas = rng.standard_normal((take, q.basis.dimension))
        out[done : done + take] = evaluate(q, thetas)
        done += take
    return out


def project(f, basis: IndexSet, rule: QuadratureRule, vectorized: bool = False) -> PceVector:
    """Non-intrusive (pseudo-spectral) projection onto ``basis``.

    Parameters
    ----------
    f:
        Callback mapping a germ point (1d array) to a value vector; with
        ``vectorized=True`` it receives the full (npts, dim) node array and
        must return (npts, M).
    basis, rule:
        Target basis and a quadrature rule on the same germ dimension.  For
        an exact round-trip of degree-p inputs the rule must integrate
        degree ``2p`` polynomials (see :func:`rule_for_basis`).
    """
    if rule.dimension != basis.dimension:
        raise ValueError(
            f"rule dimension {rule.dimension} != basis dimension {basis.dimension}"
        )
    if vectorized:
        values = np.asarray(f(rule.nodes), dtype=float)
        if values.ndim == 1:
            values = values[:, np.newaxis]
    else:
        values = np.atleast_2d(
            np.array([np.atleast_1d(f(node)) for node in rule.nodes], dtype=float)
        )
    if values.shape[0] != rule.nodes.shape[0]:
        raise ValueError("callback returned wrong number of rows")
    phi = basis_matrix(basis, rule.nodes)
    coeffs = values.T @ (phi * rule.weights[:, np.newaxis])
    coeffs /= basis.factorial_norms
    return PceVector(basis, coeffs)


def gaussian_approximation(q: PceVector, n_germs: int, label=None) -> PceVector:
    """Degree-1 PCE on fresh germs matching the mean and covariance of ``q``.

    The covariance is eigen-factorized and the ``n_germs`` leading modes are
    kept.  For a degree-1 input of rank <= ``n_germs`` this reproduces the
    distribution exactly (germ relabeling); otherwise it is a second-moment
    (Gaussian) approximation.
    """
    cov = covariance(q, q)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    k = min(n_germs, int((vals > 0).sum()) or 1)
    basis = total_degree_set(n_germs, 1)
    coeffs = np.zeros((q.spatial_dim, len(basis)))
    coeffs[:, 0] = mean(q)
    for i in range(k):
        if vals[i] <= 0:
            break
        e_i = (0,) * i + (1,)
        coeffs[:, basis.index_of(e_i)] = math.sqrt(vals[i]) * vecs[:, i]
    return PceVector(basis, coeffs, label=label if label is not None else q.label)


# ---------------------------------------------------------------------------
# text serialization
# ---------------------------------------------------------------------------


def write_pce(q: PceVector, stream):
    """Write the self-describing text form: header ``M J dim degree``, then
    one line per basis index (exponents, then M coefficients)."""
    stream.write(
        f"{q.spatial_dim} {q.n_terms} {q.basis.dimension} "
        f"{q.basis.degree_bound}\n"
    )
    exps = q.basis.exponent_matrix
    for j in range(q.n_terms):
        cells = [str(int(e)) for e in exps[j]]
        cells += [repr(float(c)) for c in q.coeffs[:, j]]
        stream.write(" ".join(cells) + "\n")


def save_pce(q: PceVector, path):
    with open(path, "w") as f:
        write_pce(q, f)


def read_pce(stream) -> PceVector:
    header = stream.readline().split()
    if len(header) != 4:
        raise ValueError("bad header: expected 'M J dim degree'")
    m, j_count, dim, degree = (int(x) for x in header)
    indices = []
    coeffs = np.zeros((m, j_count))
    for j in range(j_count):
        parts = stream.readline().split()
        if len(parts) != dim + m:
            raise ValueError(f"line {j + 2}: expected {dim + m} fields")
        indices.append(MultiIndex(int(x) for x in parts[:dim]))
        coeffs[:, j] = [float(x) for x in parts[dim:]]
    basis = IndexSet(dim, degree, tuple(indices))
    return PceVector(basis, coeffs)


def load_pce(path) -> PceVector:
    with open(path) as f:
        return read_pce(f)
