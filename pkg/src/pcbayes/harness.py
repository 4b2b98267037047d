"""Virtual-experiment harness: config files, update loops, CSV artifacts.

An experiment is described declaratively in an INI-style config file (see
``configs/`` for the bundled fixtures) and executed by
:func:`run_experiment`: simulate a truth, observe it through a noisy
measurement operator, update the parameter expansion with the configured
filter, optionally propagate between cycles, and emit one row of
diagnostics per cycle plus density/quantile/posterior artifacts.

Everything is seeded: one root seed fans out into named substreams (truth,
per-cycle noise, density sampling, ensemble draws), so identical configs
produce byte-identical CSV output.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import enkf as enkf_mod
from . import models, pce, update
from .pce import PceVector


class ConfigError(ValueError):
    """A config file failed validation; the message names section and key."""


# ---------------------------------------------------------------------------
# seeded substreams
# ---------------------------------------------------------------------------


def stream_seed(root: int, name: str) -> int:
    """Derive a stable substream seed from the root seed and a name."""
    digest = hashlib.sha256(f"{root}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def substream(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(root, name))


# ---------------------------------------------------------------------------
# post-processing: KDE, quantiles, errors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KdeCurve:
    """Gaussian-kernel density estimate on a fixed grid.

    If the sample has zero spread no curve exists; ``spike`` is set and
    ``location`` holds the atom instead.
    """

    x: np.ndarray
    density: np.ndarray | None
    bandwidth: float
    spike: bool = False
    location: float = 0.0


def kde(samples, grid, bandwidth: float | None = None) -> KdeCurve:
    """Kernel density estimate with Gaussian kernels.

    ``grid`` is either ``(lo, hi, npoints)`` or an array of evaluation
    points.  The default bandwidth is Silverman's rule
    ``1.06 * std * n**(-1/5)``.
    """
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size < 2:
        raise ValueError("need at least 2 samples")
    if isinstance(grid, tuple):
        lo, hi, npts = grid
        x = np.linspace(float(lo), float(hi), int(npts))
    else:
        x = np.asarray(grid, dtype=float)
    sd = samples.std()
    if sd == 0.0:
        return KdeCurve(x, None, 0.0, spike=True, location=float(samples[0]))
    h = bandwidth if bandwidth is not None else 1.06 * sd * samples.size ** (-0.2)
    density = np.zeros_like(x)
    chunk = max(1, int(4e6) // x.size)
    for start in range(0, samples.size, chunk):
        part = samples[start : start + chunk]
        u = (x[:, np.newaxis] - part[np.newaxis, :]) / h
        density += np.exp(-0.5 * u * u).sum(axis=1)
    density /= samples.size * h * math.sqrt(2.0 * math.pi)
    return KdeCurve(x, density, float(h))


def curve_l1(c1: KdeCurve, c2: KdeCurve) -> float:
    """L1 distance between two density curves on the same grid."""
    if c1.spike or c2.spike:
        raise ValueError("cannot compare spike results")
    if c1.x.shape != c2.x.shape or not np.allclose(c1.x, c2.x):
        raise ValueError("curves live on different grids")
    return float(np.trapezoid(np.abs(c1.density - c2.density), c1.x))


def quantile_track(state_pce_per_time, probs, n_samples: int = 20000,
                   seed: int = 0) -> np.ndarray:
    """Empirical quantiles of each component over a sequence of expansions.

    Returns an array of shape (T, M, P): per time point, per component, the
    requested quantiles, estimated from ``n_samples`` seeded draws.
    """
    probs = np.asarray(probs, dtype=float)
    if np.any((probs <= 0) | (probs >= 1)):
        raise ValueError("quantile probabilities must lie in (0, 1)")
    out = []
    for t, q in enumerate(state_pce_per_time):
        draws = pce.sample(q, n_samples, seed=seed + t)
        out.append(np.quantile(draws, probs, axis=0).T)
    return np.array(out)


def rms_error(q_pce: PceVector, truth) -> float:
    """Component-averaged error of the mean: ``|mean - truth| / sqrt(M)``."""
    truth = np.atleast_1d(np.asarray(truth, dtype=float))
    m = pce.mean(q_pce)
    if m.shape != truth.shape:
        raise ValueError(f"mean has shape {m.shape}, truth {truth.shape}")
    return float(np.linalg.norm(m - truth) / math.sqrt(truth.size))


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, declarative description of one virtual experiment."""

    experiment_id: str
    seed: int
    out_dir: str
    model_kind: str                       # identity | lorenz84 | diffusion1d
    model: object                         # model-specific config object
    prior_mean: np.ndarray
    prior_std: np.ndarray
    truth_kind: str                       # pce | value | prior_sample
    truth_coeffs: np.ndarray | None
    truth_value: np.ndarray | None
    meas_kind: str
    noise_std: np.ndarray
    proj_degree: int
    cycles: int
    span: float
    filter_kind: str                      # lbu | nlbu2 | general | enkf
    filter_n: int
    ensemble_size: int
    regerm: str                           # none | gaussian
    regerm_germs: int
    basis_degree: int
    kde_grid: tuple
    kde_samples: int
    kde_components: tuple | None
    quantile_probs: tuple


def _floats(raw: str) -> np.ndarray:
    return np.array([float(x) for x in raw.replace(",", " ").split()])


def _intervals(raw: str) -> tuple:
    out = []
    for token in raw.replace(",", " ").split():
        a, b = token.split(":")
        out.append((float(a), float(b)))
    return tuple(out)


def _get(section, key, conv, default=None, required=False):
    name = section.name if hasattr(section, "name") else "?"
    if key not in section:
        if required:
            raise ConfigError(f"[{name}] {key}: required field is missing")
        return default
    try:
        return conv(section[key])
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"[{name}] {key}: cannot parse {section[key]!r} ({exc})")


def load_config(path) -> ExperimentConfig:
    """Parse and validate a config file."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file {path!r} not found or empty")
    return parse_config(parser, default_out=str(Path(path).stem))


def parse_config(parser: configparser.ConfigParser, default_out: str = "run") -> ExperimentConfig:
    for name in ("experiment", "model", "measurement", "schedule", "filter", "basis"):
        if name not in parser:
            raise ConfigError(f"[{name}]: required section is missing")
    exp = parser["experiment"]
    experiment_id = _get(exp, "id", str, required=True)
    seed = _get(exp, "seed", int, required=True)
    out_dir = _get(exp, "out", str, default=f"runs/{default_out}")

    msec = parser["model"]
    model_kind = _get(msec, "kind", str, required=True)
    prior_mean = np.array([0.0])
    prior_std = np.array([1.0])
    if model_kind == "identity":
        if "prior" not in parser:
            raise ConfigError("[prior]: required for the identity model")
        prior_mean = _get(parser["prior"], "mean", _floats, required=True)
        prior_std = _get(parser["prior"], "std", _floats, required=True)
        model = None
    elif model_kind == "lorenz84":
        if "prior" not in parser:
            raise ConfigError("[prior]: required for the lorenz84 model")
        prior_mean = _get(parser["prior"], "mean", _floats, required=True)
        prior_std = _get(parser["prior"], "std", _floats, required=True)
        if prior_mean.size != 3 or prior_std.size != 3:
            raise ConfigError("[prior] mean/std: lorenz84 state has 3 components")
        model = models.Lorenz84Config(
            a=_get(msec, "a", float, 0.25),
            b=_get(msec, "b", float, 4.0),
            F=_get(msec, "f", float, 8.0),
            G=_get(msec, "g", float, 1.0),
            dt=_get(msec, "dt", float, 0.05),
        )
    elif model_kind == "diffusion1d":
        model = models.Diffusion1dConfig(
            mesh=_get(msec, "mesh", int, 40),
            kl_modes=_get(msec, "kl_modes", int, 4),
            prior_mean=_get(msec, "prior_mean", float, 0.0),
            kl_amplitude=_get(msec, "kl_amplitude", float, 0.5),
            kl_decay=_get(msec, "kl_decay", float, 2.0),
            patches=_get(msec, "patches", _intervals, required=True),
            rhs_cases=tuple(_get(msec, "loads", str, "uniform").split()),
        )
    else:
        raise ConfigError(f"[model] kind: unknown model {model_kind!r}")

    truth_kind, truth_coeffs, truth_value = "prior_sample", None, None
    if "truth" in parser:
        tsec = parser["truth"]
        truth_kind = _get(tsec, "kind", str, "prior_sample")
        if truth_kind == "pce":
            truth_coeffs = _get(tsec, "coeffs", _floats, required=True)
        elif truth_kind == "value":
            truth_value = _get(tsec, "value", _floats, required=True)
        elif truth_kind != "prior_sample":
            raise ConfigError(f"[truth] kind: unknown truth kind {truth_kind!r}")

    osec = parser["measurement"]
    meas_kind = _get(osec, "kind", str, required=True)
    if meas_kind not in ("linear", "cubic", "quad_sign", "patch_average"):
        raise ConfigError(f"[measurement] kind: unknown operator {meas_kind!r}")
    noise_std = _get(osec, "noise_std", _floats, required=True)
    if np.any(noise_std <= 0):
        raise ConfigError("[measurement] noise_std: must be positive")
    proj_degree = _get(osec, "proj_degree", int, 0)

    ssec = parser["schedule"]
    cycles = _get(ssec, "cycles", int, required=True)
    if cycles < 1:
        raise ConfigError("[schedule] cycles: must be >= 1")
    span = _get(ssec, "span", float, 0.0)
    if span < 0:
        raise ConfigError("[schedule] span: must be >= 0")

    fsec = parser["filter"]
    filter_kind = _get(fsec, "kind", str, required=True)
    if filter_kind not in ("lbu", "nlbu2", "general", "enkf"):
        raise ConfigError(f"[filter] kind: unknown filter {filter_kind!r}")
    filter_n = _get(fsec, "n", int, 1)
    if filter_kind == "general" and not (0 <= filter_n <= 3):
        raise ConfigError("[filter] n: general filter degree must be in 0..3")
    ensemble_size = _get(fsec, "ensemble", int, 1000)
    if filter_kind == "enkf" and ensemble_size < 2:
        raise ConfigError("[filter] ensemble: need at least 2 members")
    regerm = _get(fsec, "regerm", str, "none")
    if regerm not in ("none", "gaussian"):
        raise ConfigError(f"[filter] regerm: unknown mode {regerm!r}")
    regerm_germs = _get(fsec, "regerm_germs", int, 0)

    bsec = parser["basis"]
    basis_degree = _get(bsec, "degree", int, required=True)
    if basis_degree < 1:
        raise ConfigError("[basis] degree: must be >= 1")

    kde_grid = (-8.0, 8.0, 301)
    kde_samples = 20000
    kde_components = None
    quantile_probs = (0.05, 0.25, 0.5, 0.75, 0.95)
    if "output" in parser:
        out_sec = parser["output"]
        if "kde_grid" in out_sec:
            lo, hi, npts = out_sec["kde_grid"].split(":")
            kde_grid = (float(lo), float(hi), int(npts))
        kde_samples = _get(out_sec, "kde_samples", int, kde_samples)
        if "kde_components" in out_sec and out_sec["kde_components"] != "all":
            kde_components = tuple(
                int(x) for x in out_sec["kde_components"].split()
            )
        if "quantiles" in out_sec:
            quantile_probs = tuple(float(x) for x in out_sec["quantiles"].split())

    cfg = ExperimentConfig(
        experiment_id=experiment_id, seed=seed, out_dir=out_dir,
        model_kind=model_kind, model=model,
        prior_mean=prior_mean, prior_std=prior_std,
        truth_kind=truth_kind, truth_coeffs=truth_coeffs, truth_value=truth_value,
        meas_kind=meas_kind, noise_std=noise_std, proj_degree=proj_degree,
        cycles=cycles, span=span,
        filter_kind=filter_kind, filter_n=filter_n, ensemble_size=ensemble_size,
        regerm=regerm, regerm_germs=regerm_germs,
        basis_degree=basis_degree,
        kde_grid=kde_grid, kde_samples=kde_samples, kde_components=kde_components,
        quantile_probs=quantile_probs,
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig):
    """Cross-field checks; raises :class:`ConfigError` with precise messages."""
    if cfg.model_kind == "identity":
        if cfg.meas_kind == "patch_average":
            raise ConfigError("[measurement] kind: patch_average needs diffusion1d")
        if cfg.prior_mean.shape != cfg.prior_std.shape:
            raise ConfigError("[prior] mean/std: lengths differ")
        if cfg.truth_kind == "value" and cfg.truth_value.size != cfg.prior_mean.size:
            raise ConfigError("[truth] value: length differs from prior mean")
        if cfg.truth_kind == "pce" and cfg.prior_mean.size != 1:
            raise ConfigError("[truth] coeffs: explicit truth expansions are scalar")
    if cfg.model_kind == "diffusion1d":
        if cfg.meas_kind != "patch_average":
            raise ConfigError("[measurement] kind: diffusion1d observes patch_average")
        if cfg.noise_std.size not in (1, len(cfg.model.patches)):
            raise ConfigError(
                "[measurement] noise_std: need one value or one per patch"
            )
    if cfg.model_kind == "lorenz84":
        if cfg.meas_kind == "patch_average":
            raise ConfigError("[measurement] kind: patch_average needs diffusion1d")
        if cfg.noise_std.size not in (1, 3):
            raise ConfigError("[measurement] noise_std: need 1 or 3 values")
    if cfg.meas_kind in ("cubic", "quad_sign") and cfg.proj_degree == 0:
        raise ConfigError(
            "[measurement] proj_degree: required for nonlinear operators"
        )
    if cfg.regerm == "gaussian" and cfg.filter_kind == "enkf":
        raise ConfigError("[filter] regerm: not applicable to the enkf filter")


# ---------------------------------------------------------------------------
# model adapters
# ---------------------------------------------------------------------------


class _IdentityAdapter:
    """The parameter is the state; forward model is the identity."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        m = cfg.prior_mean.size
        self.op = models.MeasurementOp(cfg.meas_kind, np.diag(self._noise(m) ** 2))
        self.prior = pce.independent_gaussian(
            cfg.prior_mean, cfg.prior_std, degree=cfg.basis_degree, label="prior"
        )
        if cfg.truth_kind == "value":
            self.truth = np.asarray(cfg.truth_value, dtype=float)
        elif cfg.truth_kind == "pce":
            coeffs = np.asarray(cfg.truth_coeffs, dtype=float)
            truth_pce = PceVector(
                pce.total_degree_set(1, coeffs.size - 1), coeffs[np.newaxis, :]
            )
            theta = substream(cfg.seed, "truth").standard_normal(1)
            self.truth = pce.evaluate(truth_pce, theta[np.newaxis, :])[0]
        else:
            theta = substream(cfg.seed, "truth").standard_normal(
                self.prior.basis.dimension
            )
            self.truth = pce.evaluate(self.prior, theta[np.newaxis, :])[0]

    def _noise(self, r):
        return np.broadcast_to(self.cfg.noise_std, (r,))

    def propagate(self, state, span):
        return state

    def propagate_members(self, members, span):
        return members

    def predict(self, state, cycle):
        if self.op.kind == "linear":
            return state
        degree = max(self.cfg.proj_degree, state.basis.degree_bound)
        basis = pce.total_degree_set(state.basis.dimension, degree)
        rule = pce.rule_for_basis(basis, extra_degree=2)
        return models.predicted_measurement(self.op, state, None, basis, rule)

    def predict_members(self, members, cycle):
        return models.observe(self.op, members)

    def truth_measurement(self, cycle):
        return models.observe(self.op, self.truth)

    def truth_vector(self):
        return self.truth


class _LorenzAdapter:
    """Chaotic three-variable state, advanced between updates."""

    MAX_NODES = 300_000

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.model = cfg.model
        self.op = models.MeasurementOp(cfg.meas_kind, np.diag(self._noise(3) ** 2))
        self.prior = pce.independent_gaussian(
            cfg.prior_mean, cfg.prior_std, degree=cfg.basis_degree, label="state"
        )
        theta = substream(cfg.seed, "truth").standard_normal(3)
        self.truth = pce.evaluate(self.prior, theta[np.newaxis, :])[0]

    def _noise(self, r):
        return np.broadcast_to(self.cfg.noise_std, (r,))

    def _rule(self, basis):
        level = basis.degree_bound + 1
        if level**basis.dimension > self.MAX_NODES:
            raise ConfigError(
                f"propagation would need {level**basis.dimension} quadrature "
                "nodes; enable [filter] regerm or reduce cycles"
            )
        return pce.gauss_hermite_rule(basis.dimension, level)

    def propagate(self, state, span):
        self.truth = models.lorenz84_integrate(self.truth, span, self.model)
        working = pce.total_degree_set(
            state.basis.dimension, self.cfg.basis_degree
        )
        if state.basis.degree_bound > self.cfg.basis_degree:
            state = pce.truncate(state, working)
        return models.propagate_pce(
            state, span, self.model, working, self._rule(working)
        )

    def propagate_members(self, members, span):
        self.truth = models.lorenz84_integrate(self.truth, span, self.model)
        return models.lorenz84_integrate(members, span, self.model)

    def predict(self, state, cycle):
        if self.op.kind == "linear":
            return state
        degree = max(self.cfg.proj_degree, state.basis.degree_bound)
        basis = pce.total_degree_set(state.basis.dimension, degree)
        rule = pce.rule_for_basis(basis, extra_degree=2)
        return models.predicted_measurement(self.op, state, None, basis, rule)

    def predict_members(self, members, cycle):
        return models.observe(self.op, members)

    def truth_measurement(self, cycle):
        return models.observe(self.op, self.truth)

    def truth_vector(self):
        return self.truth


class _DiffusionAdapter:
    """Static log-conductivity field observed through patch averages."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.model = cfg.model
        noise = np.broadcast_to(cfg.noise_std, (len(self.model.patches),))
        self.op = models.MeasurementOp(
            "patch_average", np.diag(noise**2), patches=self.model.patches
        )
        self.prior = models.log_conductivity_prior(
            self.model, degree=cfg.basis_degree
        )
        theta = substream(cfg.seed, "truth").standard_normal(self.model.kl_modes)
        self.truth = pce.evaluate(self.prior, theta[np.newaxis, :])[0]

    def _load(self, cycle):
        cases = self.model.rhs_cases
        return cases[cycle % len(cases)]

    def propagate(self, state, span):
        return state

    def propagate_members(self, members, span):
        return members

    def predict(self, state, cycle):
        basis = pce.total_degree_set(
            state.basis.dimension, state.basis.degree_bound
        )
        rule = pce.rule_for_basis(basis)
        forward = models.diffusion_forward(self.model, self._load(cycle))
        return models.predicted_measurement(self.op, state, forward, basis, rule)

    def predict_members(self, members, cycle):
        forward = models.diffusion_forward(self.model, self._load(cycle))
        return models.observe(self.op, forward(members))

    def truth_measurement(self, cycle):
        u = models.diffusion_solve(self.truth, self._load(cycle), self.model)
        return models.observe(self.op, u)

    def truth_vector(self):
        return self.truth


_ADAPTERS = {
    "identity": _IdentityAdapter,
    "lorenz84": _LorenzAdapter,
    "diffusion1d": _DiffusionAdapter,
}


# ---------------------------------------------------------------------------
# filter steps
# ---------------------------------------------------------------------------


@dataclass
class _StepDiag:
    cond: float
    pinv: bool
    loss: float


def _linear_step(q_f, y_f, noise_cov, z_hat, tol=1e-10):
    """LBU on coefficients, with gain diagnostics and the minimized loss."""
    q_ext, z = update.adjoin_noise(q_f, y_f, noise_cov)
    c_qz = pce.covariance(q_ext, z)
    c_zz = pce.covariance(z, z)
    gain, info = update.kalman_gain(c_qz, c_zz, tol, return_info=True)
    coeffs = q_ext.coeffs - gain @ z.coeffs
    coeffs[:, 0] += gain @ np.asarray(z_hat, dtype=float)
    q_a = PceVector(q_ext.basis, coeffs, label=q_f.label)
    loss = float(
        np.trace(pce.covariance(q_ext, q_ext)) - np.trace(gain @ c_qz.T)
    )
    return q_a, _StepDiag(info.cond, info.truncated, loss)


def _polynomial_step(q_f, y_f, noise_cov, z_hat, kind, n, tol=1e-10):
    q_ext, z = update.adjoin_noise(q_f, y_f, noise_cov)
    if kind == "nlbu2":
        fmap = update.nlbu2_closed_form(z, q_ext, tol)
        system = None
    else:
        system = update.build_hankel_system(z, q_ext, n)
        fmap = update.solve_update_map(system, tol)
    # the constant block absorbs the mean, so this is the residual variance
    loss = update.expected_squared_error(fmap, q_ext, z, system=system)
    q_a = update.apply_update_map(fmap, q_ext, z, z_hat)
    return q_a, _StepDiag(fmap.cond, fmap.truncated, loss)


def _enkf_step(ens, y_members, noise_cov, z_hat, seed, tol=1e-10):
    posterior, info = enkf_mod.enkf_update(
        ens, y_members, noise_cov, z_hat, seed, tol=tol, return_info=True
    )
    dev_q = ens.members - ens.members.mean(axis=0)
    dev_y = y_members - y_members.mean(axis=0)
    n = ens.size
    c_qy = dev_q.T @ dev_y / (n - 1)
    c_yy = dev_y.T @ dev_y / (n - 1)
    gain = update.kalman_gain(c_qy, c_yy + noise_cov, tol)
    loss = float(np.trace(ens.covariance()) - np.trace(gain @ c_qy.T))
    return posterior, _StepDiag(info.cond, info.truncated, loss)


# ---------------------------------------------------------------------------
# report and artifacts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CycleRow:
    """Per-cycle diagnostics of one experiment run."""

    cycle: int
    pre_trace: float
    post_trace: float
    loss: float
    cond: float
    pinv: bool
    rms: float
    post_mean: np.ndarray


@dataclass
class RunReport:
    """All per-cycle rows plus the manifest of emitted files."""

    experiment_id: str
    rows: list = field(default_factory=list)
    files: list = field(default_factory=list)


def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: list, rows):
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(row) + "\n")


def _write_report(out: Path, report: RunReport):
    m = report.rows[0].post_mean.size
    header = ["cycle", "rms", "pre_trace", "post_trace", "loss", "cond", "pinv"]
    header += [f"mean_{i}" for i in range(m)]
    rows = []
    for r in report.rows:
        cells = [str(r.cycle), _fmt(r.rms), _fmt(r.pre_trace), _fmt(r.post_trace),
                 _fmt(r.loss), _fmt(r.cond), str(int(r.pinv))]
        cells += [_fmt(v) for v in r.post_mean]
        rows.append(cells)
    _write_csv(out / "report.csv", header, rows)
    report.files.append("report.csv")

    _write_csv(
        out / "diagnostics.csv",
        ["cycle", "cond", "pinv", "loss"],
        [[str(r.cycle), _fmt(r.cond), str(int(r.pinv)), _fmt(r.loss)]
         for r in report.rows],
    )
    report.files.append("diagnostics.csv")


def _emit_pdf(out: Path, report: RunReport, cycle, samples, components, grid):
    curves = []
    for i in components:
        curves.append(kde(samples[:, i], grid))
    name = f"pdf_{cycle}.csv"
    header = ["x"] + [f"density_{i}" for i in components]
    rows = []
    x = curves[0].x
    for j in range(x.size):
        cells = [_fmt(x[j])]
        for c in curves:
            cells.append(_fmt(c.density[j]) if not c.spike else _fmt(0.0))
        rows.append(cells)
    _write_csv(out / name, header, rows)
    report.files.append(name)


def _emit_quantiles(out: Path, report: RunReport, labels, table, probs):
    header = ["cycle", "stage", "component"] + [f"p_{p:g}" for p in probs]
    rows = []
    for (cycle, stage), block in zip(labels, table):
        for comp in range(block.shape[0]):
            cells = [str(cycle), stage, str(comp)]
            cells += [_fmt(v) for v in block[comp]]
            rows.append(cells)
    _write_csv(out / "quantiles.csv", header, rows)
    report.files.append("quantiles.csv")


# ---------------------------------------------------------------------------
# the runner
# ---------------------------------------------------------------------------


def _default_components(m, requested):
    if requested is not None:
        return tuple(requested)
    if m <= 6:
        return tuple(range(m))
    return (m // 2,)


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    """Execute the configured update loop and write all artifacts.

    Per cycle: propagate (if the model is dynamic), observe the simulated
    truth with freshly drawn noise, apply the configured filter, then emit
    the per-cycle report row, density curves and posterior expansion.
    Outputs are bit-identical for identical configs.
    """
    validate_config(cfg)
    adapter = _ADAPTERS[cfg.model_kind](cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = RunReport(cfg.experiment_id)

    noise_cov = adapter.op.noise_cov
    noise_root = update.symmetric_sqrt(noise_cov)
    use_enkf = cfg.filter_kind == "enkf"
    if use_enkf:
        state = enkf_mod.from_pce(
            adapter.prior, cfg.ensemble_size, stream_seed(cfg.seed, "enkf-init")
        )
    else:
        state = adapter.prior

    components = _default_components(
        adapter.prior.spatial_dim, cfg.kde_components
    )
    quant_labels = []
    quant_blocks = []

    def _record_quantiles(cycle, stage, current):
        if use_enkf:
            block = np.quantile(
                current.members, cfg.quantile_probs, axis=0
            ).T
        else:
            block = quantile_track(
                [current], cfg.quantile_probs, n_samples=cfg.kde_samples,
                seed=stream_seed(cfg.seed, f"quantiles-{cycle}-{stage}"),
            )[0]
        quant_labels.append((cycle, stage))
        quant_blocks.append(block)

    _record_quantiles(0, "prior", state)

    for cycle in range(1, cfg.cycles + 1):
        try:
            if cfg.span > 0:
                if use_enkf:
                    state = enkf_mod.Ensemble(
                        adapter.propagate_members(state.members, cfg.span),
                        seed_lineage=state.seed_lineage,
                    )
                else:
                    state = adapter.propagate(state, cfg.span)
                _record_quantiles(cycle, "pre", state)

            if use_enkf:
                pre_trace = float(np.trace(state.covariance()))
            else:
                pre_trace = float(np.trace(pce.covariance(state, state)))

            y_truth = adapter.truth_measurement(cycle - 1)
            noise_rng = substream(cfg.seed, f"noise-{cycle}")
            z_hat = y_truth + noise_root @ noise_rng.standard_normal(
                noise_cov.shape[0]
            )

            if use_enkf:
                y_members = adapter.predict_members(state.members, cycle - 1)
                state, diag = _enkf_step(
                    state, y_members, noise_cov, z_hat,
                    stream_seed(cfg.seed, f"enkf-{cycle}"),
                )
                post_trace = float(np.trace(state.covariance()))
                post_mean = state.mean()
                samples = state.members
            else:
                y_f = adapter.predict(state, cycle - 1)
                if cfg.filter_kind == "lbu":
                    state, diag = _linear_step(state, y_f, noise_cov, z_hat)
                else:
                    n = 2 if cfg.filter_kind == "nlbu2" else cfg.filter_n
                    state, diag = _polynomial_step(
                        state, y_f, noise_cov, z_hat, cfg.filter_kind, n
                    )
                if cfg.regerm == "gaussian":
                    germs = cfg.regerm_germs or adapter.prior.basis.dimension
                    state = pce.gaussian_approximation(state, germs)
                post_trace = float(np.trace(pce.covariance(state, state)))
                post_mean = pce.mean(state)
                samples = pce.sample(
                    state, cfg.kde_samples,
                    stream_seed(cfg.seed, f"kde-{cycle}"),
                )
        except (ConfigError,):
            raise
        except Exception as exc:
            raise RuntimeError(
                f"filter failed at cycle {cycle}: {exc}"
            ) from exc

        row = CycleRow(
            cycle=cycle, pre_trace=pre_trace, post_trace=post_trace,
            loss=diag.loss, cond=diag.cond, pinv=diag.pinv,
            rms=float(
                np.linalg.norm(post_mean - adapter.truth_vector())
                / math.sqrt(post_mean.size)
            ),
            post_mean=post_mean,
        )
        report.rows.append(row)
        _record_quantiles(cycle, "post", state)
        _emit_pdf(out, report, cycle, samples, components, cfg.kde_grid)
        if not use_enkf:
            pce.save_pce(state, out / f"posterior_{cycle}.pce")
        else:
            gauss = _ensemble_gaussian(state)
            pce.save_pce(gauss, out / f"posterior_{cycle}.pce")
        report.files.append(f"posterior_{cycle}.pce")

    _write_report(out, report)
    _emit_quantiles(out, report, quant_labels, quant_blocks, cfg.quantile_probs)
    return report


def _ensemble_gaussian(ens) -> PceVector:
    """Moment-matched degree-1 expansion of an ensemble (for serialization)."""
    m = ens.mean()
    cov = ens.covariance()
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    k = max(1, int((vals > 1e-300).sum()))
    basis = pce.total_degree_set(k, 1)
    coeffs = np.zeros((m.size, len(basis)))
    coeffs[:, 0] = m
    for i in range(k):
        if vals[i] <= 0:
            break
        e_i = (0,) * i + (1,)
        coeffs[:, basis.index_of(e_i)] = math.sqrt(vals[i]) * vecs[:, i]
    return PceVector(basis, coeffs, label="ensemble")
