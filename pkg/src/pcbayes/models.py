"""Forward problems and measurement operators for the virtual experiments.

Three system models:

* the identity (the parameter is observed directly),
* the Lorenz-84 low-order atmospheric circulation model, run in its chaotic
  regime and propagated non-intrusively through quadrature,
* a 1D stationary diffusion problem on [0, 1] with homogeneous Dirichlet
  ends, parameterized by the log-conductivity so every realization of the
  coefficient stays positive.

Measurement operators: full-state (linear), componentwise cube, the
sign-preserving quadratic ``s |s|``, and patch averages of the diffusion
solution.  The first three are strictly monotone (injective), in contrast
to a plain square, which destroys sign information beyond repair of any
polynomial update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solveh_banded

from . import pce
from .pce import IndexSet, PceVector, QuadratureRule


# ---------------------------------------------------------------------------
# Lorenz-84
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Lorenz84Config:
    """Parameters of the Lorenz-84 system and its integrator.

    Defaults are the classic chaotic setting a=1/4, b=4, F=8, G=1; state
    scaling keeps time in days.
    """

    a: float = 0.25
    b: float = 4.0
    F: float = 8.0
    G: float = 1.0
    dt: float = 0.05
    method: str = "rk4"

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.method != "rk4":
            raise ValueError(f"unknown integrator {self.method!r}")


def lorenz84_rhs(state, cfg: Lorenz84Config) -> np.ndarray:
    """Right-hand side of the Lorenz-84 equations.

    dx/dt = -y^2 - z^2 - a x + a F
    dy/dt = x y - b x z - y + G
    dz/dt = b x y + x z - z

    Vectorized over leading axes of ``state`` (shape (..., 3)).
    """
    state = np.asarray(state, dtype=float)
    x, y, z = state[..., 0], state[..., 1], state[..., 2]
    dx = -y * y - z * z - cfg.a * x + cfg.a * cfg.F
    dy = x * y - cfg.b * x * z - y + cfg.G
    dz = cfg.b * x * y + x * z - z
    return np.stack([dx, dy, dz], axis=-1)


def lorenz84_integrate(state, t_span: float, cfg: Lorenz84Config) -> np.ndarray:
    """Fixed-step RK4 over ``t_span`` days, batched over leading axes.

    The step count is ``ceil(t_span / dt)`` with the step shrunk to land on
    the horizon exactly, keeping results deterministic for any span.
    """
    state = np.array(state, dtype=float)
    if t_span < 0:
        raise ValueError("t_span must be >= 0")
    if t_span == 0:
        return state
    steps = max(1, int(np.ceil(t_span / cfg.dt - 1e-12)))
    h = t_span / steps
    for _ in range(steps):
        k1 = lorenz84_rhs(state, cfg)
        k2 = lorenz84_rhs(state + 0.5 * h * k1, cfg)
        k3 = lorenz84_rhs(state + 0.5 * h * k2, cfg)
        k4 = lorenz84_rhs(state + h * k3, cfg)
        state += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(state)):
        raise FloatingPointError("trajectory diverged (non-finite state)")
    return state


def propagate_pce(state: PceVector, t_span: float, cfg: Lorenz84Config,
                  basis: IndexSet, rule: QuadratureRule) -> PceVector:
    """Push a state expansion through the dynamics, non-intrusively.

    The state is evaluated at the quadrature nodes, each node trajectory is
    integrated with RK4, and the result is projected back onto ``basis``.
    With ``t_span = 0`` this is the plain projection round trip.
    """
    values = pce.evaluate(state, rule.nodes)
    moved = lorenz84_integrate(values, t_span, cfg)
    out = pce.project(lambda _: moved, basis, rule, vectorized=True)
    return PceVector(out.basis, out.coeffs, label=state.label)


# ---------------------------------------------------------------------------
# 1D stationary diffusion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Diffusion1dConfig:
    """Desk-scale diffusion identification setup on [0, 1].

    ``mesh`` linear elements with homogeneous Dirichlet ends; the
    log-conductivity field is a cosine-mode expansion with ``kl_modes``
    independent Gaussian germs and algebraically decaying amplitudes.
    ``patches`` are disjoint observation intervals over which the solution
    is averaged; ``rhs_cases`` name the load functions cycled through the
    update schedule.
    """

    mesh: int = 40
    kl_modes: int = 4
    prior_mean: float = 0.0
    kl_amplitude: float = 0.5
    kl_decay: float = 2.0
    patches: tuple = ((0.1, 0.2), (0.45, 0.55), (0.8, 0.9))
    rhs_cases: tuple = ("uniform",)

    def __post_init__(self):
        if self.mesh < 2:
            raise ValueError("mesh must have at least 2 elements")
        if self.kl_modes < 1:
            raise ValueError("need at least one conductivity mode")
        last = 0.0
        for a, b in self.patches:
            if not (0.0 <= a < b <= 1.0) or a < last:
                raise ValueError("patches must be disjoint intervals in [0, 1]")
            last = b

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.mesh + 1)


_LOADS = {
    "uniform": lambda x: np.ones_like(x),
    "ramp": lambda x: x,
    "sine": lambda x: np.sin(np.pi * x),
    "bump": lambda x: np.exp(-50.0 * (x - 0.5) ** 2),
}


def load_function(name: str):
    try:
        return _LOADS[name]
    except KeyError:
        raise ValueError(
            f"unknown load {name!r}; available: {sorted(_LOADS)}"
        ) from None


def log_conductivity_prior(cfg: Diffusion1dConfig, degree: int = 1) -> PceVector:
    """Prior expansion of the nodal log-conductivity field.

    Mode k contributes ``amplitude * k^(-decay) * sqrt(2) cos(k pi x)``
    times an independent germ, on a basis of the requested degree (higher
    columns start at zero and are filled by updates).
    """
    x = cfg.nodes
    basis = pce.total_degree_set(cfg.kl_modes, max(1, degree))
    coeffs = np.zeros((x.size, len(basis)))
    coeffs[:, 0] = cfg.prior_mean
    for k in range(1, cfg.kl_modes + 1):
        sigma = cfg.kl_amplitude * k ** (-cfg.kl_decay)
        mode = np.sqrt(2.0) * np.cos(k * np.pi * x)
        e_k = (0,) * (k - 1) + (1,)
        coeffs[:, basis.index_of(e_k)] = sigma * mode
    return PceVector(basis, coeffs, label="log-conductivity")


def diffusion_solve(q_sample, load, cfg: Diffusion1dConfig) -> np.ndarray:
    """Solve ``-(exp(q) u')' = f`` with linear elements, u(0) = u(1) = 0.

    ``q_sample`` holds nodal log-conductivities; the coefficient is
    evaluated at element midpoints.  ``load`` is a name from the load
    registry or a callable ``f(x)``.  Returns the full nodal solution.
    """
    q_sample = np.asarray(q_sample, dtype=float)
    if q_sample.size != cfg.mesh + 1:
        raise ValueError(
            f"expected {cfg.mesh + 1} nodal values, got {q_sample.size}"
        )
    f = load_function(load) if isinstance(load, str) else load
    q_mid = 0.5 * (q_sample[:-1] + q_sample[1:])
    kappa = np.exp(q_mid)
    if not np.all(np.isfinite(kappa)):
        raise FloatingPointError("non-finite conductivity")
    h = 1.0 / cfg.mesh
    # interior SPD tridiagonal stiffness in banded (upper) storage
    diag = (kappa[:-1] + kappa[1:]) / h
    offdiag = -kappa[1:-1] / h
    band = np.zeros((2, cfg.mesh - 1))
    band[0, 1:] = offdiag
    band[1, :] = diag
    rhs = h * f(cfg.nodes[1:-1])
    u = np.zeros(cfg.mesh + 1)
    u[1:-1] = solveh_banded(band, rhs)
    return u


# ---------------------------------------------------------------------------
# measurement operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeasurementOp:
    """Observation map plus its error covariance.

    ``kind`` is one of ``linear`` (identity), ``cubic`` (componentwise
    s^3), ``quad_sign`` (componentwise s|s|, quadratic but sign-preserving)
    or ``patch_average`` (means of a nodal field over the configured
    intervals).
    """

    kind: str
    noise_cov: np.ndarray
    patches: tuple = ()

    def __post_init__(self):
        if self.kind not in ("linear", "cubic", "quad_sign", "patch_average"):
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        cov = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        vals = np.linalg.eigvalsh(0.5 * (cov + cov.T))
        if vals.min() <= 0:
            raise ValueError("noise covariance must be positive definite")
        cov.flags.writeable = False
        object.__setattr__(self, "noise_cov", cov)
        if self.kind == "patch_average" and not self.patches:
            raise ValueError("patch_average needs patch intervals")

    @property
    def meas_dim(self) -> int:
        return self.noise_cov.shape[0]


def observe(op: MeasurementOp, state_or_field) -> np.ndarray:
    """Apply the observation map to states (rows) or a single vector.

    For ``patch_average`` the input rows are nodal values of a field on the
    uniform mesh over [0, 1]; each output channel is the mean of the nodal
    values inside one patch interval.
    """
    v = np.asarray(state_or_field, dtype=float)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    if op.kind == "linear":
        out = v.copy()
    elif op.kind == "cubic":
        out = v**3
    elif op.kind == "quad_sign":
        out = v * np.abs(v)
    else:
        x = np.linspace(0.0, 1.0, v.shape[1])
        cols = []
        for a, b in op.patches:
            mask = (x >= a - 1e-12) & (x <= b + 1e-12)
            if not mask.any():
                raise ValueError(f"patch ({a}, {b}) contains no mesh node")
            cols.append(v[:, mask].mean(axis=1))
        out = np.stack(cols, axis=1)
    if op.kind != "patch_average" and out.shape[1] != op.meas_dim:
        raise ValueError(
            f"{op.kind} measurement of dimension {out.shape[1]} does not "
            f"match noise covariance of size {op.meas_dim}"
        )
    return out[0] if single else out


def predicted_measurement(op: MeasurementOp, q_pce: PceVector, forward,
                          basis: IndexSet, rule: QuadratureRule) -> PceVector:
    """Expansion of the predicted measurement ``Y(q)`` (without noise).

    Composes the forward solve and the observation map at the quadrature
    nodes and projects onto ``basis``; this pushes the parameter
    uncertainty through the system.  ``forward`` maps a batch of parameter
    rows to a batch of system-response rows (``None`` for the identity
    model).  Noise germs are attached later by the update step.
    """
    values = pce.evaluate(q_pce, rule.nodes)
    responses = values if forward is None else np.atleast_2d(forward(values))
    measured = observe(op, responses)
    out = pce.project(lambda _: measured, basis, rule, vectorized=True)
    return PceVector(out.basis, out.coeffs, label="predicted measurement")


def rowwise(f):
    """Adapt a one-sample forward solve to the batched hook contract."""

    def batched(rows):
        return np.array([np.atleast_1d(f(row)) for row in np.atleast_2d(rows)])

    return batched


def diffusion_forward(cfg: Diffusion1dConfig, load):
    """Batched forward hook solving the diffusion problem per parameter row."""
    return rowwise(lambda q: diffusion_solve(q, load, cfg))
