"""Experiment configuration, orchestration and plot-ready file export."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .forward import (
    MEDIUM_PROFILES,
    TRUTH_PROFILES,
    HelmholtzProblem,
    NoiseSpec,
    assemble_forward_stack,
    generate_data,
    per_wavenumber_scale,
)
from .prior import Grid1D, TruncatedPrior, build_eigensystem, project_between_grids
from .sequential import FrequencySchedule, run_sequential
from .vb_gaussian import GaussianFactor, GaussianHyper, run_vb_gaussian
from .vb_laplace import LaplaceHyper, run_vb_laplace

MODELS = ("gaussian", "laplace", "sequential")


def _kappa_range(start, stop, step):
    n = int(round((stop - start) / step)) + 1
    return [float(start + i * step) for i in range(n)]


@dataclass
class ProblemConfig:
    gen_nodes: int = 1000
    inv_nodes: int = 600
    truth: str = "two-bumps"
    q: str = "zero"
    wavenumbers: list = field(default_factory=lambda: _kappa_range(0.5, 50.0, 0.5))
    # physical positions; each grid measures at its nearest node
    meas_positions: list = field(default_factory=lambda: [0.0, 1.0])


@dataclass
class PriorConfig:
    p: int = 1
    threshold: float = 1e-3
    u0: str = "zero"


@dataclass
class NoiseConfig:
    kind: str = "gaussian"
    sigma: float = 1e-3
    r: float = 0.0
    eps_mag: float = 0.0
    # scale sigma / eps_mag by each wavenumber's max |clean data|
    relative: bool = False


@dataclass
class SolverConfig:
    model: str = "gaussian"
    alpha0: float = 1.0
    beta0: float = 1e-1
    alpha1: float = 1.0
    beta1: float = 1e-5
    tau_init: float = 1e-7
    tol: float = 1e-4
    max_sweeps: int = 200
    method: str = "dense"
    inner_model: str = "gaussian"
    inner_sweeps: int = 3
    map_steps: int = 0
    coarse_nodes: Optional[int] = None


@dataclass
class OutputConfig:
    directory: str = "out"
    formats: list = field(default_factory=lambda: ["csv", "json"])
    seed: int = 0


@dataclass
class ExperimentConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        """Build a config from a (possibly partial) nested dict layered over ``base``."""
        base = base or cls()
        blocks = {}
        for f in fields(cls):
            block = getattr(base, f.name)
            given = data.get(f.name, {}) or {}
            unknown = set(given) - {g.name for g in fields(block)}
            if unknown:
                raise ValueError(f"unknown keys in [{f.name}]: {sorted(unknown)}")
            blocks[f.name] = replace(block, **given)
        extra = set(data) - set(blocks)
        if extra:
            raise ValueError(f"unknown config sections: {sorted(extra)}")
        config = cls(**blocks)
        config.validate()
        return config

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, base=None) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text), base)

    @classmethod
    def load(cls, path, base=None) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text(), base)

    def validate(self):
        p, s = self.problem, self.solver
        if not p.wavenumbers:
            raise ValueError("wavenumber schedule is empty")
        if np.any(np.diff(p.wavenumbers) <= 0) or min(p.wavenumbers) <= 0:
            raise ValueError("wavenumbers must be positive and strictly increasing")
        if p.gen_nodes < 3 or p.inv_nodes < 3:
            raise ValueError("grids need at least 3 nodes")
        if not s.tol > 0:
            raise ValueError("tol must be positive")
        if s.model not in MODELS:
            raise ValueError(f"unknown model {s.model!r}; expected one of {MODELS}")
        if s.inner_model not in ("gaussian", "laplace"):
            raise ValueError(f"unknown inner model {s.inner_model!r}")
        if not 0 < self.prior.threshold <= 1:
            raise ValueError("prior threshold must lie in (0, 1]")
        for name in (p.truth, p.q, self.prior.u0):
            _check_profile(name)
        NoiseSpec(self.noise.kind, self.noise.sigma, self.noise.r, self.noise.eps_mag)
        return self


def _check_profile(name):
    if name in TRUTH_PROFILES or name in MEDIUM_PROFILES:
        return
    if not Path(name).exists():
        raise ValueError(f"profile {name!r} is neither built in nor an existing CSV file")


def load_profile(name: str, grid: Grid1D) -> np.ndarray:
    """Built-in profile or a two-column ``x,value`` CSV interpolated onto ``grid``."""
    if name in TRUTH_PROFILES:
        return TRUTH_PROFILES[name](grid.nodes)
    if name in MEDIUM_PROFILES:
        return MEDIUM_PROFILES[name](grid.nodes)
    table = np.loadtxt(name, delimiter=",", skiprows=1, ndmin=2)
    return np.interp(grid.nodes, table[:, 0], table[:, 1])


PRESETS = {
    "gaussian-1d": (
        "Gaussian noise sigma=1e-3, kappa=0.5..50, Gaussian noise model",
        {},
    ),
    "laplace-1d": (
        "impulsive noise r=0.5, eps=0.1, kappa=0.5..50, Laplace noise model",
        {"noise": {"kind": "impulsive", "sigma": 0.0, "r": 0.5, "eps_mag": 0.1},
         "solver": {"model": "laplace"}},
    ),
    "sequential-1d": (
        "frequency marching kappa=1..20 with 5% relative Gaussian noise per wavenumber",
        {"problem": {"wavenumbers": _kappa_range(1.0, 20.0, 1.0)},
         "noise": {"sigma": 0.05, "relative": True},
         "solver": {"model": "sequential", "inner_model": "gaussian", "inner_sweeps": 3}},
    ),
}


def preset(name: str) -> ExperimentConfig:
    try:
        _, overrides = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None
    return ExperimentConfig.from_dict(overrides)


@dataclass
class Setup:
    """Everything derived from a config before inversion."""

    gen_problem: HelmholtzProblem
    inv_problem: HelmholtzProblem
    gen_stack: object
    truth_gen: np.ndarray
    truth: np.ndarray
    prior: TruncatedPrior
    d: np.ndarray
    d_clean: np.ndarray
    mask: Optional[np.ndarray]


def _problem(config: ExperimentConfig, grid: Grid1D) -> HelmholtzProblem:
    pc = config.problem
    points = tuple(int(np.argmin(np.abs(grid.nodes - x))) for x in pc.meas_positions)
    return HelmholtzProblem(grid, tuple(pc.wavenumbers), points, load_profile(pc.q, grid))


def build_setup(config: ExperimentConfig, seed: int, d=None) -> Setup:
    """Problems on both grids, truth, prior and (unless supplied) synthetic data."""
    pc = config.problem
    gen_grid, inv_grid = Grid1D(pc.gen_nodes), Grid1D(pc.inv_nodes)
    gen_problem, inv_problem = _problem(config, gen_grid), _problem(config, inv_grid)
    gen_stack = assemble_forward_stack(gen_problem)
    truth_gen = load_profile(pc.truth, gen_grid)
    truth = load_profile(pc.truth, inv_grid)
    d_clean = gen_stack.apply(truth_gen)

    nc = config.noise
    noise = NoiseSpec(nc.kind, nc.sigma, nc.r, nc.eps_mag, seed)
    scale = per_wavenumber_scale(gen_stack, d_clean) if nc.relative else None
    mask = None
    if d is None:
        d, mask = generate_data(gen_stack, truth_gen, noise, scale)
    else:
        d = np.asarray(d, dtype=float)
        if d.shape != d_clean.shape:
            raise ValueError(f"supplied data has {d.size} entries, the configuration expects {d_clean.size}")

    eigsys = build_eigensystem(inv_grid, p=config.prior.p)
    u0 = load_profile(config.prior.u0, inv_grid)
    prior = TruncatedPrior.from_threshold(eigsys, config.prior.threshold, u0)
    return Setup(gen_problem, inv_problem, gen_stack, truth_gen, truth, prior, d, d_clean, mask)


def relative_error_linf(estimate, truth) -> float:
    """``max|estimate - truth| / max|truth|``."""
    truth = np.asarray(truth, dtype=float)
    scale = np.max(np.abs(truth))
    if scale == 0:
        raise ValueError("truth is identically zero")
    return float(np.max(np.abs(np.asarray(estimate, dtype=float) - truth)) / scale)


def credible_band(factor: GaussianFactor, factor_count: float = 2.0):
    """Pointwise ``mean -/+ factor_count * std``."""
    std = np.sqrt(np.clip(factor.pointwise_var(), 0.0, None))
    return factor.mean - factor_count * std, factor.mean + factor_count * std


@dataclass
class RunReport:
    model: str
    status: str
    iterations: int
    nodes: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    truth: np.ndarray
    rel_error: float
    error_trace: list
    lambda_trace: list
    tau_trace: list
    elbo_trace: list
    trace_index: list
    sigma_hat: float
    seed: int
    config: dict
    timing: float = 0.0
    weights: Optional[np.ndarray] = None
    layout: list = field(default_factory=list)
    data: Optional[np.ndarray] = None
    data_clean: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def summary(self) -> dict:
        return {
            "model": self.model,
            "status": self.status,
            "iterations": self.iterations,
            "rel_error": self.rel_error,
            "sigma_hat": self.sigma_hat,
            "lambda": self.lambda_trace[-1] if self.lambda_trace else None,
            "tau": self.tau_trace[-1] if self.tau_trace else None,
            "seed": self.seed,
            "timing_seconds": self.timing,
            "config": self.config,
        }


def _band_from(factor, grid_from, grid_to, mean):
    std = np.sqrt(np.clip(factor.pointwise_var(), 0.0, None))
    if grid_from != grid_to:
        std = project_between_grids(std, grid_from, grid_to)
    return std, mean - 2.0 * std, mean + 2.0 * std


def run_experiment(config: ExperimentConfig, seed: Optional[int] = None, d=None) -> RunReport:
    """Generate data on the fine grid, invert on the coarse grid and collect diagnostics."""
    config.validate()
    seed = config.output.seed if seed is None else int(seed)
    t0 = time.perf_counter()
    setup = build_setup(config, seed, d)
    sc = config.solver
    inv_grid = setup.prior.grid
    inv_stack = assemble_forward_stack(setup.inv_problem)
    weights = None

    if sc.model == "gaussian":
        hyper = GaussianHyper(sc.alpha0, sc.beta0, sc.alpha1, sc.beta1)
        state = run_vb_gaussian(inv_stack, setup.d, setup.prior, hyper, tol=sc.tol, max_sweeps=sc.max_sweeps,
                                method=sc.method)
        mean, factor = state.mean, state.u_factor
        errors = [relative_error_linf(m, setup.truth) for m in state.mean_trace]
        lam_tr, tau_tr, elbo_tr = state.lambda_trace, state.tau_trace, state.elbo_trace
        index = list(range(1, state.iteration + 1))
        sigma_hat = state.sigma_hat
        status = "converged" if state.converged else "not-converged"
        iterations = state.iteration
    elif sc.model == "laplace":
        hyper = LaplaceHyper(sc.alpha0, sc.beta0, sc.tau_init)
        state = run_vb_laplace(inv_stack, setup.d, setup.prior, hyper, tol=sc.tol, max_sweeps=sc.max_sweeps,
                               method=sc.method)
        mean, factor = state.mean, state.u_factor
        errors = [relative_error_linf(m, setup.truth) for m in state.mean_trace]
        lam_tr, tau_tr, elbo_tr = state.lambda_trace, state.tau_trace, state.elbo_trace
        index = list(range(1, state.iteration + 1))
        sigma_hat = float(np.sqrt(state.tau))
        weights = state.weights
        status = "converged" if state.converged else "not-converged"
        iterations = state.iteration
    else:
        schedule = FrequencySchedule(tuple(config.problem.wavenumbers), sc.inner_sweeps, sc.inner_model)
        if sc.inner_model == "gaussian":
            hyper = GaussianHyper(sc.alpha0, sc.beta0, sc.alpha1, sc.beta1)
        else:
            hyper = LaplaceHyper(sc.alpha0, sc.beta0, sc.tau_init)
        pairs = [(k, setup.d[setup.gen_stack.rows_for(i)]) for i, k in enumerate(schedule.wavenumbers)]
        coarse = None
        if sc.coarse_nodes:
            cgrid = Grid1D(sc.coarse_nodes)
            coarse = TruncatedPrior.from_threshold(build_eigensystem(cgrid, p=config.prior.p),
                                                   config.prior.threshold,
                                                   project_between_grids(setup.prior.u0, inv_grid, cgrid))
        result = run_sequential(setup.inv_problem, schedule, pairs, setup.prior, hyper, tol=0.0,
                                truth=setup.truth, map_steps=sc.map_steps, coarse_prior=coarse)
        state = result.final_state
        mean, factor = result.mean, state.u_factor
        errors = list(result.errors)
        lam_tr = [s.lambda_mean for s in result.per_frequency]
        tau_tr = [s.tau_mean for s in result.per_frequency]
        elbo_tr = [float("nan")] * len(lam_tr)
        index = list(schedule.wavenumbers)
        if sc.inner_model == "gaussian":
            sigma_hat = state.sigma_hat
        else:
            sigma_hat = float(np.sqrt(state.tau))
            weights = state.weights
        status = "converged"
        iterations = len(result.per_frequency)

    std, lower, upper = _band_from(factor, factor.eigsys.grid, inv_grid, mean)
    return RunReport(
        model=sc.model,
        status=status,
        iterations=iterations,
        nodes=inv_grid.nodes,
        mean=mean,
        std=std,
        lower=lower,
        upper=upper,
        truth=setup.truth,
        rel_error=relative_error_linf(mean, setup.truth),
        error_trace=errors,
        lambda_trace=list(lam_tr),
        tau_trace=list(tau_tr),
        elbo_trace=list(elbo_tr),
        trace_index=index,
        sigma_hat=float(sigma_hat),
        seed=seed,
        config=config.to_dict(),
        timing=time.perf_counter() - t0,
        weights=weights,
        layout=_physical_layout(setup.gen_stack),
        data=setup.d,
        data_clean=setup.d_clean,
        mask=setup.mask,
    )


def _physical_layout(stack):
    x = stack.grid.nodes
    return [(k, float(x[p]), part) for k, p, part in stack.layout()]


# -- file export -------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return format(float(v), ".17g")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_data_csv(path, layout, d, d_clean, mask=None):
    mask = np.zeros(len(d), dtype=bool) if mask is None else mask
    write_csv(path, ["kappa", "point", "part", "value", "clean", "corrupted"],
              [(k, x, part, v, c, m) for (k, x, part), v, c, m in zip(layout, d, d_clean, mask)])


def read_data_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "value" not in rows[0]:
        raise ValueError(f"{path} has no 'value' column")
    return np.array([float(r["value"]) for r in rows])


def write_report(report: RunReport, directory) -> list:
    """Write CSV tables and a JSON summary; returns the written paths.

    CSV files hold no timing so that reruns are byte-identical.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    formats = report.config["output"]["formats"]
    written = []
    if "csv" in formats:
        p = out / "estimate.csv"
        write_csv(p, ["x", "mean", "std", "lower", "upper", "truth"],
                  zip(report.nodes, report.mean, report.std, report.lower, report.upper, report.truth))
        written.append(p)
        p = out / "trace.csv"
        key = "kappa" if report.model == "sequential" else "iteration"
        write_csv(p, [key, "rel_error", "lambda", "tau", "elbo"],
                  zip(report.trace_index, report.error_trace, report.lambda_trace, report.tau_trace,
                      report.elbo_trace))
        written.append(p)
        if report.weights is not None:
            p = out / "weights.csv"
            layout = report.layout if len(report.layout) == len(report.weights) else [("", "", "")] * len(report.weights)
            mask = report.mask if report.mask is not None else np.zeros(len(report.weights), dtype=bool)
            write_csv(p, ["kappa", "point", "part", "weight", "corrupted"],
                      [(*lay, w, m) for lay, w, m in zip(layout, report.weights, mask)])
            written.append(p)
        if report.data is not None:
            p = out / "data.csv"
            write_data_csv(p, report.layout, report.data, report.data_clean, report.mask)
            written.append(p)
    if "json" in formats:
        p = out / "summary.json"
        p.write_text(json.dumps(_jsonable(report.summary()), indent=2, sort_keys=True) + "\n")
        written.append(p)
    return written


def _jsonable(obj):
    if is_dataclass(obj):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj
