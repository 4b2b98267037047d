"""Multi-index bookkeeping and probabilists' Hermite polynomial algebra.

Everything in this package uses the probabilists' Hermite polynomials
``He_n`` (monic, orthogonal under the standard Gaussian density), for which

    E[He_a(t) He_b(t)] = delta_ab * a!

NumPy's ``numpy.polynomial.hermite_e`` module follows the same convention.
The physicists' polynomials ``H_n`` (weight ``exp(-t^2)``) do *not* and must
never be mixed in: every norm and structure coefficient below depends on the
``He`` convention.

Multivariate basis functions are products of univariate factors over
independent standard Gaussian germ variables, addressed by a
:class:`MultiIndex` of exponents.  Products of basis functions linearize
back into the basis with integer structure coefficients, which makes
expectations of arbitrary products exactly computable; those coefficients
are memoized with ``functools.lru_cache`` (internally synchronized, so
concurrent readers are safe).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from numpy.polynomial import hermite_e


def _trim(exponents):
    """Drop trailing zeros (padding positions) from an exponent tuple."""
    n = len(exponents)
    while n and exponents[n - 1] == 0:
        n -= 1
    return tuple(exponents[:n])


class MultiIndex:
    """Exponent vector selecting one multivariate Hermite basis function.

    Trailing zeros are padding: ``MultiIndex((1, 0))`` and ``MultiIndex((1,))``
    compare and hash equal.  Instances are immutable value objects.
    """

    __slots__ = ("_exponents", "_key", "_hash")

    def __init__(self, exponents=()):
        if isinstance(exponents, MultiIndex):
            exponents = exponents.exponents
        elif isinstance(exponents, (int, np.integer)):
            exponents = (exponents,)
        exp = tuple(int(a) for a in exponents)
        if any(a < 0 for a in exp):
            raise ValueError(f"multi-index entries must be >= 0, got {exp}")
        self._exponents = exp
        self._key = _trim(exp)
        self._hash = hash(self._key)

    @property
    def exponents(self) -> tuple[int, ...]:
        return self._exponents

    @property
    def degree(self) -> int:
        """Total degree (sum of entries)."""
        return sum(self._exponents)

    def trimmed(self) -> tuple[int, ...]:
        """Canonical exponent tuple with trailing zeros removed."""
        return self._key

    def padded(self, dimension: int) -> tuple[int, ...]:
        """Exponent tuple padded (or safely shortened) to ``dimension``."""
        exp = self._exponents
        if len(exp) > dimension:
            if any(exp[dimension:]):
                raise ValueError(
                    f"multi-index {exp} has nonzero entries beyond "
                    f"dimension {dimension}"
                )
            return exp[:dimension]
        return exp + (0,) * (dimension - len(exp))

    def __eq__(self, other):
        if isinstance(other, MultiIndex):
            return self._key == other._key
        if isinstance(other, tuple):
            return self._key == _trim(other)
        return NotImplemented

    def __hash__(self):
        return self._hash

    def __len__(self):
        return len(self._exponents)

    def __iter__(self):
        return iter(self._exponents)

    def __getitem__(self, k):
        return self._exponents[k]

    def __repr__(self):
        return f"MultiIndex{self._exponents}"


def _as_key(alpha) -> tuple[int, ...]:
    """Canonical trimmed tuple for a MultiIndex or raw exponent sequence."""
    if isinstance(alpha, MultiIndex):
        return alpha.trimmed()
    return _trim(tuple(int(a) for a in alpha))


def graded_key(alpha):
    """Sort key realizing the graded-lexicographic order (degree-major)."""
    key = _as_key(alpha)
    return (sum(key), tuple(-a for a in key))


@dataclass(frozen=True)
class IndexSet:
    """Deterministically ordered finite set of multi-indices.

    The order is graded lexicographic: ascending total degree, and within a
    degree the first germ variable carries the highest exponent first.  The
    zero index therefore always sits at position 0, and coefficient tensors
    assembled against the set are reproducible across runs.
    """

    dimension: int
    degree_bound: int
    indices: tuple[MultiIndex, ...]

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if not self.indices:
            raise ValueError("index set must not be empty")
        keys = [a.trimmed() for a in self.indices]
        if keys[0] != ():
            raise ValueError("zero multi-index must be at position 0")
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate multi-indices")
        graded = [graded_key(a) for a in self.indices]
        if graded != sorted(graded):
            raise ValueError("indices are not in graded-lex order")
        for a in self.indices:
            a.padded(self.dimension)  # raises if it does not fit
            if a.degree > self.degree_bound:
                raise ValueError(
                    f"index {a} exceeds degree bound {self.degree_bound}"
                )

    @classmethod
    def from_indices(cls, dimension: int, indices) -> "IndexSet":
        """Build a set from arbitrary indices: dedup, sort, infer the bound."""
        uniq = {MultiIndex(a) for a in indices}
        uniq.add(MultiIndex(()))
        ordered = tuple(sorted(uniq, key=graded_key))
        bound = max(a.degree for a in ordered)
        return cls(dimension, bound, ordered)

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __getitem__(self, j):
        return self.indices[j]

    @cached_property
    def _positions(self) -> dict:
        return {a.trimmed(): j for j, a in enumerate(self.indices)}

    def index_of(self, alpha) -> int:
        """Position of ``alpha`` in the set; raises ``KeyError`` if absent."""
        return self._positions[_as_key(alpha)]

    def __contains__(self, alpha) -> bool:
        return _as_key(alpha) in self._positions

    @cached_property
    def exponent_matrix(self) -> np.ndarray:
        """Integer matrix of shape (len(self), dimension) of padded exponents."""
        return np.array(
            [a.padded(self.dimension) for a in self.indices], dtype=int
        )

    @cached_property
    def factorial_norms(self) -> np.ndarray:
        """Vector of squared basis norms ``alpha!``, aligned with the order."""
        return np.array([factorial_norm(a) for a in self.indices])


def _compositions(total: int, parts: int):
    """All ways to write ``total`` as ``parts`` ordered nonnegative addends,
    first part descending (the lex-minor order within one degree)."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


@lru_cache(maxsize=None)
def total_degree_set(dim: int, degree: int) -> IndexSet:
    """All multi-indices of ``dim`` variables with total degree <= ``degree``.

    The result has cardinality ``C(dim + degree, degree)`` and is graded-lex
    ordered.  Results are cached; sets are immutable and shareable.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if degree < 0:
        raise ValueError("degree must be >= 0")
    indices = []
    for d in range(degree + 1):
        indices.extend(MultiIndex(c) for c in _compositions(d, dim))
    return IndexSet(dim, degree, tuple(indices))


def _herme_value(n: int, t: float) -> float:
    """Univariate ``He_n(t)`` by the three-term recurrence."""
    if n == 0:
        return 1.0
    prev, cur = 1.0, float(t)
    for k in range(1, n):
        prev, cur = cur, t * cur - k * prev
    return cur


def hermite_eval(alpha, theta) -> float:
    """Evaluate the multivariate basis function at a germ point.

    The value is the product of univariate ``He`` factors; ``theta`` must
    provide a coordinate for every nonzero exponent position.
    """
    key = _as_key(alpha)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if len(key) > theta.size:
        raise ValueError(
            f"germ point of dimension {theta.size} cannot evaluate "
            f"multi-index with {len(key)} active positions"
        )
    value = 1.0
    for a, t in zip(key, theta):
        if a:
            value *= _herme_value(a, t)
    return value


def basis_matrix(index_set: IndexSet, points) -> np.ndarray:
    """Evaluate every basis function of ``index_set`` at many germ points.

    Parameters
    ----------
    index_set:
        The basis to evaluate.
    points:
        Array of shape (npts, dimension).

    Returns
    -------
    np.ndarray
        Matrix of shape (npts, len(index_set)).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != index_set.dimension:
        raise ValueError(
            f"points have dimension {pts.shape[1]}, basis needs "
            f"{index_set.dimension}"
        )
    exps = index_set.exponent_matrix
    out = np.ones((pts.shape[0], len(index_set)))
    for k in range(index_set.dimension):
        dmax = int(exps[:, k].max())
        if dmax == 0:
            continue
        vander = hermite_e.hermevander(pts[:, k], dmax)
        out *= vander[:, exps[:, k]]
    return out


def factorial_norm(alpha) -> float:
    """Product of entrywise factorials ``alpha!`` = E[H_alpha^2].

    Computed exactly in integer arithmetic; raises ``OverflowError`` if the
    value exceeds double-precision range instead of silently wrapping.
    """
    n = 1
    for a in _as_key(alpha):
        n *= math.factorial(a)
    try:
        return float(n)
    except OverflowError as exc:
        raise OverflowError(
            f"factorial norm of {alpha} exceeds double precision"
        ) from exc


@lru_cache(maxsize=None)
def _uni_product(a: int, b: int) -> tuple:
    """Structure terms of ``He_a * He_b`` as ((degree, coefficient), ...)."""
    terms = []
    for r in range(min(a, b) + 1):
        c = math.comb(a, r) * math.comb(b, r) * math.factorial(r)
        terms.append((a + b - 2 * r, float(c)))
    return tuple(terms)


@lru_cache(maxsize=None)
def linearize_tuples(a: tuple, b: tuple) -> tuple:
    """Tuple-keyed fast path of :func:`product_linearize`.

    Returns ``((gamma, coefficient), ...)`` with trimmed exponent tuples.
    The arguments must already be trimmed tuples.
    """
    if a > b:  # symmetric, so canonicalize the cache key
        a, b = b, a
    if not a:
        return ((b, 1.0),)
    dim = max(len(a), len(b))
    ap = a + (0,) * (dim - len(a))
    bp = b + (0,) * (dim - len(b))
    terms = [((), 1.0)]
    for k in range(dim):
        if ap[k] == 0 and bp[k] == 0:
            terms = [(g + (0,), c) for g, c in terms]
            continue
        terms = [
            (g + (d,), c * ck)
            for g, c in terms
            for d, ck in _uni_product(ap[k], bp[k])
        ]
    return tuple((_trim(g), c) for g, c in terms)


def product_linearize(alpha, beta) -> dict:
    """Expand ``H_alpha * H_beta`` back into the Hermite basis.

    Returns a sparse map ``MultiIndex -> coefficient`` holding only the
    nonzero structure coefficients.  Symmetric in its arguments.
    """
    out = {}
    for gamma, c in linearize_tuples(_as_key(alpha), _as_key(beta)):
        out[MultiIndex(gamma)] = out.get(MultiIndex(gamma), 0.0) + c
    return out


def poly_product(poly: dict, key: tuple) -> dict:
    """Multiply a tuple-keyed Hermite expansion by one basis function."""
    out = {}
    for gamma, c in poly.items():
        for g, ck in linearize_tuples(gamma, key):
            out[g] = out.get(g, 0.0) + c * ck
    return out


def expect_hermite_product(alphas) -> float:
    """E[prod_i H_{alpha_i}] under independent standard Gaussian germs.

    Folds pairwise product linearization; the expectation is the resulting
    coefficient of the zero index (all other basis functions have zero mean).
    Exact for the desk-scale degrees this package targets, since all
    structure coefficients are integers.
    """
    keys = [_as_key(a) for a in alphas]
    if not keys:
        raise ValueError("need at least one multi-index")
    poly = {keys[0]: 1.0}
    for key in keys[1:]:
        poly = poly_product(poly, key)
    return poly.get((), 0.0)
