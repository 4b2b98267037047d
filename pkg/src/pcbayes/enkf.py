"""Ensemble Kalman Filter baseline (perturbed-observation variant).

The same linear update as :func:`pcbayes.update.lbu_update`, realized on
Monte Carlo samples instead of chaos coefficients: empirical covariances
from member deviations, and each member shifted with an independently
perturbed observation.  Serves as the sampling oracle the coefficient-based
filter is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import pce
from .update import SolveInfo, _eig_solve, _check_symmetric, symmetric_sqrt


@dataclass(frozen=True)
class Ensemble:
    """Parameter samples, one member per row, plus the seeds that made them."""

    members: np.ndarray
    seed_lineage: tuple = ()

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.members, dtype=float))
        if m.shape[0] < 2:
            raise ValueError("an ensemble needs at least 2 members")
        m.flags.writeable = False
        object.__setattr__(self, "members", m)

    @property
    def size(self) -> int:
        return self.members.shape[0]

    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    def covariance(self) -> np.ndarray:
        dev = self.members - self.members.mean(axis=0)
        return dev.T @ dev / (self.size - 1)


def from_pce(q: pce.PceVector, n: int, seed: int) -> Ensemble:
    """Draw an ensemble from a chaos expansion with a seeded generator."""
    return Ensemble(pce.sample(q, n, seed), seed_lineage=(seed,))


def enkf_update(ens: Ensemble, y_members: np.ndarray, noise_cov, z_hat,
                seed: int, tol: float = 1e-10, return_info: bool = False):
    """One stochastic EnKF analysis step.

    Parameters
    ----------
    ens:
        Prior ensemble, shape (N, M).
    y_members:
        Predicted measurement per member, shape (N, R).
    noise_cov:
        Measurement error covariance (R, R).
    z_hat:
        Observed value, shape (R,).
    seed:
        Seed for the observation perturbations; all N draws come from one
        seeded stream, so the result is schedule-independent.

    Returns
    -------
    Ensemble
        Posterior ensemble (with ``return_info=True`` also the gain solve
        diagnostics; a singular ``C_yy + noise_cov`` falls back to a
        pseudo-inverse and is flagged there).
    """
    y_members = np.atleast_2d(np.asarray(y_members, dtype=float))
    if y_members.shape[0] != ens.size:
        raise ValueError(
            f"{y_members.shape[0]} measurement rows for {ens.size} members"
        )
    z_hat = np.atleast_1d(np.asarray(z_hat, dtype=float))
    r = y_members.shape[1]
    noise_cov = _check_symmetric(
        np.atleast_2d(np.asarray(noise_cov, dtype=float)), tol, "noise_cov"
    )

    dev_q = ens.members - ens.members.mean(axis=0)
    dev_y = y_members - y_members.mean(axis=0)
    c_qy = dev_q.T @ dev_y / (ens.size - 1)
    c_yy = dev_y.T @ dev_y / (ens.size - 1)
    kt, info = _eig_solve(c_yy + noise_cov, c_qy.T, tol)

    rng = np.random.default_rng(seed)
    perturb = rng.standard_normal((ens.size, r)) @ symmetric_sqrt(noise_cov).T
    innovation = z_hat[np.newaxis, :] + perturb - y_members
    posterior = Ensemble(
        ens.members + innovation @ kt,
        seed_lineage=ens.seed_lineage + (seed,),
    )
    return (posterior, info) if return_info else posterior
