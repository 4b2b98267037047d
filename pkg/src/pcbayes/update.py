"""Bayesian update engine on polynomial chaos coefficients.

Three routes to the posterior are provided, all sampling-free:

* :func:`lbu_update` -- the linear update ``q_a = q_f + K(z_hat - z)``
  with the Kalman gain ``K = C_qz C_zz^{-1}``, applied coefficientwise to
  the chaos expansion (the tensorized, filter-like form).
* :func:`nlbu2_closed_form` -- the degree-2 polynomial filter obtained by
  symbolic block elimination of the moment system.
* :func:`build_hankel_system` / :func:`solve_update_map` -- the general
  degree-n filter ``psi_n(z) = sum_k kH z^{vee k}``, whose coefficient
  blocks solve a symmetric positive definite moment system.

Coordinates: a symmetric k-linear block is stored once per sorted
combination of measurement indices (column order of
:func:`pcbayes.pce.sym_combinations`).  Contracting such a block against
``z^{vee k}`` sums every index tuple, which on sorted combinations shows up
as the permutation-count weights of :func:`pcbayes.pce.multiplicity`; the
same weights symmetrize the assembled moment matrix.

Covariances and moment matrices are inverted through a symmetric
eigendecomposition with a relative eigenvalue cutoff; a truncated
(pseudo-inverse) solve is flagged rather than hidden, since it signals an
ill-conditioned or degenerate measurement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import pce
from .hermite import MultiIndex, graded_key
from .pce import IndexSet, PceVector, multiplicity, sym_combinations


class InvalidCovarianceError(ValueError):
    """A matrix that must be a covariance has a significant negative eigenvalue."""


@dataclass(frozen=True)
class SolveInfo:
    """Diagnostics of one symmetric solve."""

    cond: float
    truncated: bool
    rank: int


def _check_symmetric(a: np.ndarray, tol: float, what: str):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{what} must be square, got shape {a.shape}")
    scale = np.abs(a).max()
    if scale > 0 and np.abs(a - a.T).max() > max(tol, 1e-12) * scale:
        raise ValueError(f"{what} is not symmetric within tolerance")
    return 0.5 * (a + a.T)


def _eig_solve(a: np.ndarray, b: np.ndarray, tol: float,
               reject_negative: bool = False, what: str = "matrix"):
    """Solve ``a @ x = b`` for symmetric ``a`` with eigenvalue truncation.

    Eigenvalues below ``tol * max eigenvalue`` are dropped (pseudo-inverse);
    with ``reject_negative`` a negative eigenvalue beyond the same cut is an
    error instead.
    """
    vals, vecs = np.linalg.eigh(a)
    vmax = float(vals.max(initial=0.0))
    cut = tol * max(vmax, np.abs(vals).max(initial=0.0))
    if reject_negative and vals.min(initial=0.0) < -cut:
        raise InvalidCovarianceError(
            f"{what} has negative eigenvalue {vals.min():.3e}"
        )
    keep = vals > cut
    rank = int(keep.sum())
    if rank == 0:
        x = np.zeros_like(b, dtype=float)
        return x, SolveInfo(cond=np.inf, truncated=True, rank=0)
    vk = vecs[:, keep]
    x = vk @ ((vk.T @ b) / vals[keep][:, np.newaxis])
    info = SolveInfo(
        cond=float(vmax / vals[keep].min()),
        truncated=bool(rank < vals.size),
        rank=rank,
    )
    return x, info


def symmetric_sqrt(c: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition."""
    c = _check_symmetric(c, tol, "covariance")
    vals, vecs = np.linalg.eigh(c)
    if vals.min(initial=0.0) < -tol * max(1.0, vals.max(initial=0.0)):
        raise InvalidCovarianceError(f"negative eigenvalue {vals.min():.3e}")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def kalman_gain(c_qz: np.ndarray, c_zz: np.ndarray, tol: float = 1e-10,
                return_info: bool = False):
    """Kalman gain ``K = C_qz C_zz^{-1}`` via symmetric factorization.

    ``c_zz`` must be symmetric; eigenvalues below ``tol`` (relative to the
    largest) are truncated, turning the inverse into a pseudo-inverse, and a
    negative eigenvalue beyond the same cut raises
    :class:`InvalidCovarianceError`.  With ``return_info=True`` the
    condition number and truncation flag come back alongside the gain.
    """
    c_qz = np.atleast_2d(np.asarray(c_qz, dtype=float))
    c_zz = _check_symmetric(np.atleast_2d(c_zz), tol, "c_zz")
    if c_qz.shape[1] != c_zz.shape[0]:
        raise ValueError(
            f"c_qz has {c_qz.shape[1]} columns but c_zz is {c_zz.shape[0]}x"
            f"{c_zz.shape[1]}"
        )
    kt, info = _eig_solve(c_zz, c_qz.T, tol, reject_negative=True, what="c_zz")
    k = kt.T
    return (k, info) if return_info else k


# ---------------------------------------------------------------------------
# measurement model: adjoin noise germs
# ---------------------------------------------------------------------------


def adjoin_noise(q_f: PceVector, y_f: PceVector, noise_cov) -> tuple:
    """Build the noisy measurement ``z = y_f + eps`` on a joint basis.

    ``eps`` gets one fresh Gaussian germ per measurement channel, with the
    symmetric square root of ``noise_cov`` as degree-1 coefficients; fresh
    germs keep the error independent of everything already in play
    (uncorrelated is what the update actually needs).  Returns
    ``(q_f, z)`` rebased onto the common extended basis.
    """
    q_f, y_f = pce.common_basis(q_f, y_f)
    r = y_f.spatial_dim
    noise_cov = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    if noise_cov.shape != (r, r):
        raise ValueError(
            f"noise covariance shape {noise_cov.shape} does not match "
            f"{r} measurement channels"
        )
    root = symmetric_sqrt(noise_cov)
    d = q_f.basis.dimension
    noise_indices = [
        MultiIndex((0,) * (d + j) + (1,)) for j in range(r)
    ]
    joint = IndexSet.from_indices(
        d + r, list(q_f.basis.indices) + noise_indices
    )
    q_ext = pce.rebase(pce.adjoin_germs(q_f, r), joint)
    z_coeffs = pce.rebase(pce.adjoin_germs(y_f, r), joint).coeffs.copy()
    for j, alpha in enumerate(noise_indices):
        z_coeffs[:, joint.index_of(alpha)] += root[:, j]
    z = PceVector(joint, z_coeffs, label="z")
    return q_ext, z


def lbu_update(q_f: PceVector, y_f: PceVector, noise_cov, z_hat,
               tol: float = 1e-10, return_info: bool = False):
    """Linear Bayesian update of the chaos coefficients (the PCE Kalman filter).

    Adjoins fresh noise germs to form ``z = y_f + eps``, computes
    ``C_qz = C_qy`` and ``C_zz = C_yy + C_eps`` from the coefficients, and
    shifts every coefficient column by the gain times the innovation:
    ``q_a^a = q_f^a + K(z_hat^a - z^a)`` (the observed value ``z_hat`` only
    enters the zero-index column).
    """
    z_hat = np.atleast_1d(np.asarray(z_hat, dtype=float))
    if z_hat.size != y_f.spatial_dim:
        raise ValueError(
            f"observation has {z_hat.size} entries, expected {y_f.spatial_dim}"
        )
    q_ext, z = adjoin_noise(q_f, y_f, noise_cov)
    c_qz = pce.covariance(q_ext, z)
    c_zz = pce.covariance(z, z)
    k, info = kalman_gain(c_qz, c_zz, tol, return_info=True)
    coeffs = q_ext.coeffs - k @ z.coeffs
    coeffs[:, 0] += k @ z_hat
    q_a = PceVector(q_ext.basis, coeffs, label=q_f.label)
    return (q_a, info) if return_info else q_a


# ---------------------------------------------------------------------------
# the degree-n polynomial filter
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UpdateMap:
    """Coefficient blocks of the polynomial filter ``psi_n``.

    ``blocks[k]`` has shape (M, C(R+k-1, k)): one column per sorted
    combination of measurement indices, holding the (symmetric) tensor
    entry of the k-linear block.  ``cond`` and ``truncated`` carry the
    diagnostics of the solve that produced the map.
    """

    degree: int
    meas_dim: int
    blocks: tuple
    cond: float = 1.0
    truncated: bool = False

    def __post_init__(self):
        if len(self.blocks) != self.degree + 1:
            raise ValueError("need one block per degree 0..n")
        m = self.blocks[0].shape[0]
        for k, blk in enumerate(self.blocks):
            want = len(sym_combinations(self.meas_dim, k))
            if blk.shape != (m, want):
                raise ValueError(
                    f"block {k} has shape {blk.shape}, expected ({m}, {want})"
                )

    @property
    def spatial_dim(self) -> int:
        return self.blocks[0].shape[0]

    def block_norms(self) -> list:
        """Frobenius norm of each block (with permutation multiplicities)."""
        out = []
        for k, blk in enumerate(self.blocks):
            mus = np.array(
                [multiplicity(c) for c in sym_combinations(self.meas_dim, k)]
            )
            out.append(float(np.sqrt(((blk**2) * mus).sum())))
        return out


@dataclass(frozen=True)
class HankelSystem:
    """Moment system whose solution is the polynomial filter.

    One symmetric positive (semi-)definite matrix serves all M output
    components (the full system is block diagonal over the component
    index), so the right-hand side has one column per component.  Row and
    column slots are the sorted combinations of measurement indices,
    concatenated over block orders 0..n; ``offsets[k]`` is where block k
    starts.
    """

    degree: int
    meas_dim: int
    matrix: np.ndarray
    rhs: np.ndarray
    combinations: tuple
    offsets: tuple


def build_hankel_system(z: PceVector, q: PceVector, n: int,
                        max_degree: int = 3) -> HankelSystem:
    """Assemble the degree-n moment system from analytic PCE moments.

    Needs raw moments of ``z`` up to order 2n and cross moments with ``q``
    up to order n; :class:`~pcbayes.pce.MomentBudgetError` propagates when
    the analytic budget is exceeded.  ``max_degree`` guards against
    combinatorial blowup; raise it explicitly to go past 3.
    """
    if n < 0:
        raise ValueError("degree must be >= 0")
    if n > max_degree:
        raise ValueError(
            f"degree {n} above cap {max_degree}; pass max_degree to override"
        )
    r = z.spatial_dim
    mono = pce.symmetric_monomials(z, 2 * n)
    per_k = [sym_combinations(r, k) for k in range(n + 1)]
    offsets = []
    combos = []
    for k in range(n + 1):
        offsets.append(len(combos))
        combos.extend(per_k[k])
    d = len(combos)
    mus = np.array([multiplicity(c) for c in combos])

    matrix = np.empty((d, d))
    for i, v in enumerate(combos):
        for j, u in enumerate(combos):
            if j < i:
                matrix[i, j] = matrix[j, i]
                continue
            merged = tuple(sorted(v + u))
            matrix[i, j] = mono[len(merged)][merged].get((), 0.0)
    matrix *= mus[:, np.newaxis] * mus[np.newaxis, :]

    qw = pce._weighted_components(q)
    rhs = np.zeros((d, q.spatial_dim))
    for i, v in enumerate(combos):
        acc = rhs[i]
        for gamma, c in mono[len(v)][v].items():
            vec = qw.get(gamma)
            if vec is not None:
                acc += c * vec
        acc *= mus[i]
    return HankelSystem(n, r, matrix, rhs, tuple(combos), tuple(offsets))


def solve_update_map(sys: HankelSystem, tol: float = 1e-10) -> UpdateMap:
    """Solve the moment system and unpack the filter blocks.

    The matrix is symmetric positive definite for a nondegenerate
    measurement; if it is indefinite or singular beyond ``tol`` the solve
    truncates the offending eigenvalues and flags the map.
    """
    matrix = _check_symmetric(sys.matrix, tol, "moment matrix")
    x, info = _eig_solve(matrix, sys.rhs, tol)
    blocks = []
    for k in range(sys.degree + 1):
        start = sys.offsets[k]
        stop = sys.offsets[k + 1] if k + 1 <= sys.degree else len(sys.combinations)
        blocks.append(np.array(x[start:stop].T))
    return UpdateMap(
        sys.degree, sys.meas_dim, tuple(blocks),
        cond=info.cond, truncated=info.truncated,
    )


def nlbu2_closed_form(z: PceVector, q: PceVector, tol: float = 1e-10) -> UpdateMap:
    """Degree-2 filter by symbolic block elimination of the moment system.

    Uses the elimination tensors

        F = (E[z x3] - E[z x2] (x) E[z]) . C_zz^{-1}
        E = E[q (x) z x2] - E[q] (x) E[z x2] - K . (E[z x3] - E[z] (x) E[z x2])
        G = (E[z x4] - E[z x2] (x) E[z x2]) - F . (E[z x3] - E[z] (x) E[z x2])

    then ``2H = E : G^{-1}``, ``1H = K - E : G^{-1} : F`` and
    ``0H = E[q] - 1H E[z] - 2H : E[z x2]``, where ``G^{-1}`` is realized as
    a (pseudo-)inverse on the symmetric-pair index space.  Agrees with
    :func:`solve_update_map` at degree 2 up to solver tolerance.
    """
    r = z.spatial_dim
    m1 = pce.raw_moment_tensor(z, 1).to_dense()
    m2 = pce.raw_moment_tensor(z, 2).to_dense()
    m3 = pce.raw_moment_tensor(z, 3).to_dense()
    m4 = pce.raw_moment_tensor(z, 4).to_dense()
    q0 = pce.mean(q)
    q1 = pce.cross_moment_dense(q, z, 1)
    q2 = pce.cross_moment_dense(q, z, 2)

    cov_zz = m2 - np.outer(m1, m1)
    cov_qz = q1 - np.outer(q0, m1)
    k_gain, kinfo = kalman_gain(cov_qz, cov_zz, tol, return_info=True)
    czz_inv, cinfo = _eig_solve(cov_zz, np.eye(r), tol)

    # third-moment fluctuations, slotted (leading pair; trailing index) and
    # (leading index; trailing pair)
    t3 = m3 - m2[:, :, np.newaxis] * m1[np.newaxis, np.newaxis, :]
    u3 = m3 - m1[:, np.newaxis, np.newaxis] * m2[np.newaxis, :, :]
    f_t = np.einsum("abj,jl->abl", t3, czz_inv)
    e_t = q2 - q0[:, np.newaxis, np.newaxis] * m2[np.newaxis, :, :]
    e_t -= np.einsum("mi,icd->mcd", k_gain, u3)
    g_t = m4 - np.einsum("ab,cd->abcd", m2, m2)
    g_t -= np.einsum("abi,icd->abcd", f_t, u3)

    pairs = sym_combinations(r, 2)
    mus = np.array([multiplicity(c) for c in pairs])
    g_sym = np.empty((len(pairs), len(pairs)))
    for i, (c, dd) in enumerate(pairs):
        for j, (a, b) in enumerate(pairs):
            g_sym[i, j] = g_t[a, b, c, dd]
    g_sym *= mus[:, np.newaxis] * mus[np.newaxis, :]
    e_sym = np.array([[e_t[m, c, dd] for (c, dd) in pairs]
                      for m in range(q.spatial_dim)]).T
    e_sym *= mus[:, np.newaxis]
    h2_t, ginfo = _eig_solve(g_sym, e_sym, tol)
    h2 = h2_t.T  # (M, pairs): tensor entries of 2H

    # contractions of 2H against F and second moments need the
    # permutation-count weights back
    h2_weighted = h2 * mus[np.newaxis, :]
    f_flat = np.array([f_t[a, b, :] for (a, b) in pairs])  # (pairs, R)
    h1 = k_gain - h2_weighted @ f_flat
    m2_flat = np.array([m2[a, b] for (a, b) in pairs])
    h0 = q0 - h1 @ m1 - h2_weighted @ m2_flat

    cond = max(kinfo.cond, cinfo.cond, ginfo.cond)
    truncated = kinfo.truncated or cinfo.truncated or ginfo.truncated
    return UpdateMap(
        2, r, (h0[:, np.newaxis], h1, h2), cond=cond, truncated=truncated
    )


# ---------------------------------------------------------------------------
# applying a filter map
# ---------------------------------------------------------------------------


def evaluate_map(update_map: UpdateMap, z_value) -> np.ndarray:
    """Evaluate ``psi_n`` at a deterministic measurement vector."""
    z_value = np.atleast_1d(np.asarray(z_value, dtype=float))
    if z_value.size != update_map.meas_dim:
        raise ValueError(
            f"value has {z_value.size} entries, map expects {update_map.meas_dim}"
        )
    out = update_map.blocks[0][:, 0].copy()
    for k in range(1, update_map.degree + 1):
        for pos, combo in enumerate(sym_combinations(update_map.meas_dim, k)):
            out += (
                multiplicity(combo)
                * update_map.blocks[k][:, pos]
                * math.prod(z_value[i] for i in combo)
            )
    return out


def _psi_terms(update_map: UpdateMap, z: PceVector) -> dict:
    """Hermite expansion of ``psi_n(z)`` as {trimmed index: (M,) vector}."""
    mono = pce.symmetric_monomials(z, update_map.degree)
    m = update_map.spatial_dim
    terms = {(): update_map.blocks[0][:, 0].copy()}
    for k in range(1, update_map.degree + 1):
        for pos, combo in enumerate(sym_combinations(update_map.meas_dim, k)):
            vec = multiplicity(combo) * update_map.blocks[k][:, pos]
            if not np.any(vec):
                continue
            for gamma, c in mono[k][combo].items():
                acc = terms.get(gamma)
                if acc is None:
                    terms[gamma] = c * vec
                else:
                    acc += c * vec
    return terms


def apply_update_map(update_map: UpdateMap, q_f: PceVector, z: PceVector,
                     z_hat) -> PceVector:
    """Posterior ``q_a = q_f + psi_n(z_hat) - psi_n(z)``.

    ``psi_n(z_hat)`` is deterministic and lands in the zero-index column;
    ``psi_n(z)`` is expanded into the Hermite basis through product
    linearization, growing the basis as far as degree ``n * deg(z)``
    requires.  At degree 1 this reproduces :func:`lbu_update` exactly.
    """
    if update_map.meas_dim != z.spatial_dim:
        raise ValueError("map and measurement dimensions differ")
    if update_map.spatial_dim != q_f.spatial_dim:
        raise ValueError("map and parameter dimensions differ")
    z_hat = np.atleast_1d(np.asarray(z_hat, dtype=float))
    terms = _psi_terms(update_map, z)
    dim = max(q_f.basis.dimension, z.basis.dimension)
    keys = set(terms) | {alpha.trimmed() for alpha in q_f.basis}
    basis = IndexSet.from_indices(dim, keys)
    coeffs = np.zeros((q_f.spatial_dim, len(basis)))
    for j, alpha in enumerate(q_f.basis):
        coeffs[:, basis.index_of(alpha)] += q_f.coeffs[:, j]
    for gamma, vec in terms.items():
        coeffs[:, basis.index_of(gamma)] -= vec
    coeffs[:, 0] += evaluate_map(update_map, z_hat)
    return PceVector(basis, coeffs, label=q_f.label)


def _pack_blocks(update_map: UpdateMap) -> np.ndarray:
    return np.vstack([blk.T for blk in update_map.blocks])


def expected_squared_error(update_map: UpdateMap, q: PceVector, z: PceVector,
                           system: HankelSystem | None = None) -> float:
    """Loss ``E|q - psi_n(z)|^2`` of a filter map on a given pair.

    Evaluated analytically through the same moment system the solve uses:
    ``E|q|^2 - 2 x.b + x.A x`` with the packed block vector ``x``.
    """
    if system is None:
        system = build_hankel_system(z, q, update_map.degree)
    x = _pack_blocks(update_map)
    quad = float(np.einsum("im,ij,jm->", x, system.matrix, x))
    cross = float((x * system.rhs).sum())
    return pce.second_moment_total(q) - 2.0 * cross + quad


def half_normal_moment(k: int, sigma: float = 1.0) -> float:
    """Odd absolute moment ``E[|x|^{2k+1}]`` of a centered Gaussian:
    ``sigma^{2k+1} 2^k k! sqrt(2/pi)`` (the half-normal moments)."""
    if k < 0:
        raise ValueError("k must be >= 0")
    return sigma ** (2 * k + 1) * 2**k * math.factorial(k) * math.sqrt(2.0 / math.pi)


# ---------------------------------------------------------------------------
# update-map serialization (same text family as PceVector)
# ---------------------------------------------------------------------------


def write_update_map(update_map: UpdateMap, stream):
    stream.write(
        f"{update_map.degree} {update_map.meas_dim} {update_map.spatial_dim}\n"
    )
    for k, blk in enumerate(update_map.blocks):
        combos = sym_combinations(update_map.meas_dim, k)
        stream.write(f"block {k} {len(combos)}\n")
        for pos, combo in enumerate(combos):
            cells = [str(i) for i in combo]
            cells += [repr(float(v)) for v in blk[:, pos]]
            stream.write(" ".join(cells) + "\n")


def save_update_map(update_map: UpdateMap, path):
    with open(path, "w") as f:
        write_update_map(update_map, f)


def read_update_map(stream) -> UpdateMap:
    degree, r, m = (int(x) for x in stream.readline().split())
    blocks = []
    for k in range(degree + 1):
        tag, kk, count = stream.readline().split()
        if tag != "block" or int(kk) != k:
            raise ValueError(f"expected 'block {k} ...' header")
        combos = sym_combinations(r, k)
        if int(count) != len(combos):
            raise ValueError(f"block {k}: wrong combination count")
        blk = np.zeros((m, len(combos)))
        for pos in range(len(combos)):
            parts = stream.readline().split()
            blk[:, pos] = [float(x) for x in parts[k:]]
        blocks.append(blk)
    return UpdateMap(degree, r, tuple(blocks))


def load_update_map(path) -> UpdateMap:
    with open(path) as f:
        return read_update_map(f)
