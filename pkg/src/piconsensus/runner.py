"""Config-driven experiments: parse, tune, run, and emit CSV traces.

Experiment configs are sectioned key-value text (INI syntax)::

    [experiment]
    problem = quadratic          ; quadratic | rsi_suite | logistic_synthetic | logistic_idx
    topology = ring:5            ; ring:N | path:N | complete:N | star:N | file:PATH
    methods = pi_consensus_precond, pi_consensus, pi, dgd
    seed = 0
    max_iters = 20000
    grad_tol = 1e-8
    consensus_tol = 1e-8
    record_every = 1
    check_every = 1
    out = out

    [problem]
    m = 5
    d = 4
    condition = 1e4              ; problem-kind specific keys, see _PROBLEM_KEYS
    seed = 1

    [method.pi_consensus_precond]
    alpha = 0.05, 0.1, 0.2       ; a comma list makes the key a tuning grid
    h = 0.1
    gamma = 1.0

Every method starts from the same seeded x(0) (normal, 0.1 standard
deviation); the PI-consensus family additionally gets one shared random
v(0) draw while PI and the baselines start from v(0) = 0.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from piconsensus import analysis, costs, data_io, graph
from piconsensus.algorithms import (
    AlgorithmConfig,
    DivergenceError,
    NetworkState,
    build_preconditioner,
    run,
)

METHOD_NAMES = {
    # name -> (algorithm tag, preconditioned)
    "pi_consensus": ("pi_consensus", False),
    "pi_consensus_precond": ("pi_consensus", True),
    "pi": ("pi", False),
    "dgd": ("dgd", False),
    "extra": ("extra", False),
    "diging": ("diging", False),
}

PROBLEM_KINDS = ("quadratic", "rsi_suite", "logistic_synthetic", "logistic_idx")

_EXPERIMENT_KEYS = {"problem", "topology", "methods", "seed", "max_iters", "grad_tol",
                    "consensus_tol", "record_every", "check_every", "out"}
_PROBLEM_KEYS = {
    "quadratic": {"m", "d", "condition", "seed"},
    "rsi_suite": {"m", "d", "c", "spread"},
    "logistic_synthetic": {"m", "n", "d", "separation", "scale_spread", "seed"},
    "logistic_idx": {"m", "images", "labels", "digit_a", "digit_b", "seed"},
}
_METHOD_KEYS = {"alpha", "beta", "h", "gamma"}
_METHOD_DEFAULTS = {"alpha": 0.1, "beta": 1.0, "h": 0.1, "gamma": 1.0}


class ConfigError(ValueError):
    """Malformed experiment configuration; the message names the field."""


@dataclass
class MethodSpec:
    """One method entry: fixed parameter values plus optional tuning grids."""

    name: str
    params: dict = field(default_factory=dict)
    grids: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in METHOD_NAMES:
            raise ConfigError(f"unknown method {self.name!r}; choose from "
                              f"{sorted(METHOD_NAMES)}")
        for key in list(self.params) + list(self.grids):
            if key not in _METHOD_KEYS:
                raise ConfigError(f"unknown key {key!r} in [method.{self.name}]")
        for key, default in _METHOD_DEFAULTS.items():
            if key not in self.params and key not in self.grids:
                self.params[key] = default

    @property
    def algorithm(self):
        return METHOD_NAMES[self.name][0]

    @property
    def preconditioned(self):
        return METHOD_NAMES[self.name][1]


@dataclass
class ExperimentConfig:
    """Fully validated experiment description."""

    problem_kind: str
    topology_spec: str
    methods: list
    problem_options: dict = field(default_factory=dict)
    seed: int = 0
    max_iters: int = 20000
    grad_tol: float = 1e-8
    consensus_tol: float = 1e-8
    record_every: int = 1
    check_every: int = 1
    out_dir: str = "out"

    def __post_init__(self):
        if self.problem_kind not in PROBLEM_KINDS:
            raise ConfigError(f"unknown problem {self.problem_kind!r}; choose from "
                              f"{PROBLEM_KINDS}")
        allowed = _PROBLEM_KEYS[self.problem_kind]
        for key in self.problem_options:
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in [problem] for "
                                  f"{self.problem_kind}")
        if not self.methods:
            raise ConfigError("methods list is empty")


def _parse_number(section, key, value, caster):
    try:
        return caster(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r} in [{section}]: {value!r}") from exc


def parse_config(text):
    """Parse sectioned key-value text into an ExperimentConfig."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc
    if "experiment" not in cp:
        raise ConfigError("missing [experiment] section")
    exp = cp["experiment"]
    for key in exp:
        if key not in _EXPERIMENT_KEYS:
            raise ConfigError(f"unknown key {key!r} in [experiment]")
    for required in ("problem", "topology", "methods"):
        if required not in exp:
            raise ConfigError(f"missing key {required!r} in [experiment]")

    method_names = [s.strip() for s in exp["methods"].split(",") if s.strip()]
    methods = []
    for name in method_names:
        section = f"method.{name}"
        params, grids = {}, {}
        if cp.has_section(section):
            for key, raw in cp[section].items():
                values = [_parse_number(section, key, v.strip(), float)
                          for v in raw.split(",") if v.strip()]
                if not values:
                    raise ConfigError(f"empty value for {key!r} in [{section}]")
                if len(values) == 1:
                    params[key] = values[0]
                else:
                    grids[key] = values
        methods.append(MethodSpec(name=name, params=params, grids=grids))

    problem_options = dict(cp["problem"]) if cp.has_section("problem") else {}

    known_sections = {"experiment", "problem"} | {f"method.{n}" for n in method_names}
    for section in cp.sections():
        if section not in known_sections:
            raise ConfigError(f"unknown section [{section}]")

    return ExperimentConfig(
        problem_kind=exp["problem"].strip(),
        topology_spec=exp["topology"].strip(),
        methods=methods,
        problem_options=problem_options,
        seed=_parse_number("experiment", "seed", exp.get("seed", "0"), int),
        max_iters=_parse_number("experiment", "max_iters", exp.get("max_iters", "20000"), int),
        grad_tol=_parse_number("experiment", "grad_tol", exp.get("grad_tol", "1e-8"), float),
        consensus_tol=_parse_number("experiment", "consensus_tol",
                                    exp.get("consensus_tol", "1e-8"), float),
        record_every=_parse_number("experiment", "record_every",
                                   exp.get("record_every", "1"), int),
        check_every=_parse_number("experiment", "check_every",
                                  exp.get("check_every", "1"), int),
        out_dir=exp.get("out", "out").strip(),
    )


def serialize_config(config):
    """Render an ExperimentConfig back to config text (parse round-trips)."""
    cp = configparser.ConfigParser()
    cp["experiment"] = {
        "problem": config.problem_kind,
        "topology": config.topology_spec,
        "methods": ", ".join(spec.name for spec in config.methods),
        "seed": str(config.seed),
        "max_iters": str(config.max_iters),
        "grad_tol": repr(config.grad_tol),
        "consensus_tol": repr(config.consensus_tol),
        "record_every": str(config.record_every),
        "check_every": str(config.check_every),
        "out": config.out_dir,
    }
    if config.problem_options:
        cp["problem"] = dict(config.problem_options)
    for spec in config.methods:
        section = {key: repr(val) for key, val in sorted(spec.params.items())}
        for key, vals in sorted(spec.grids.items()):
            section[key] = ", ".join(repr(v) for v in vals)
        cp[f"method.{spec.name}"] = section
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def parse_topology_spec(spec):
    """Build a Topology from 'kind:N' or 'file:PATH'."""
    if ":" not in spec:
        raise ConfigError(f"topology spec {spec!r} must look like ring:5 or file:PATH")
    kind, _, arg = spec.partition(":")
    kind = kind.strip()
    if kind == "file":
        return graph.Topology.from_edge_list_text(Path(arg.strip()).read_text())
    try:
        m = int(arg)
    except ValueError as exc:
        raise ConfigError(f"bad agent count in topology spec {spec!r}") from exc
    return graph.build_topology(kind, m)


def _opt(options, key, default, caster):
    if key not in options:
        return default
    return _parse_number("problem", key, options[key], caster)


def build_problem(config):
    """Instantiate the ProblemInstance a config describes."""
    kind = config.problem_kind
    opts = config.problem_options
    m = _opt(opts, "m", 5, int)
    if kind == "quadratic":
        return costs.build_quadratic_suite(
            m=m, d=_opt(opts, "d", 3, int),
            condition=_opt(opts, "condition", 10.0, float),
            seed=_opt(opts, "seed", 1, int))
    if kind == "rsi_suite":
        spread = _opt(opts, "spread", 0.3, float)
        offsets = np.linspace(-spread, spread, m) if m > 1 else np.zeros(1)
        return costs.build_rsi_suite(m=m, d=_opt(opts, "d", 1, int),
                                     a_offsets=offsets, c=_opt(opts, "c", 1.5, float))
    if kind == "logistic_synthetic":
        dataset = data_io.synthetic_logistic(
            n=_opt(opts, "n", 100, int), d=_opt(opts, "d", 4, int),
            separation=_opt(opts, "separation", 1.0, float),
            seed=_opt(opts, "seed", 0, int),
            scale_spread=_opt(opts, "scale_spread", 1.0, float))
        return costs.build_logistic(data_io.partition(dataset, m, seed=_opt(opts, "seed", 0, int)))
    if kind == "logistic_idx":
        for key in ("images", "labels"):
            if key not in opts:
                raise ConfigError(f"logistic_idx requires {key!r} in [problem]")
            if not Path(opts[key]).exists():
                raise ConfigError(f"{key} file not found: {opts[key]}")
        images = data_io.load_idx(opts["images"]).data
        labels = data_io.load_idx(opts["labels"]).data
        dataset = data_io.filter_binary(images, labels,
                                        _opt(opts, "digit_a", 1, int),
                                        _opt(opts, "digit_b", 5, int))
        return costs.build_logistic(data_io.partition(dataset, m, seed=_opt(opts, "seed", 0, int)))
    raise ConfigError(f"unknown problem kind {kind!r}")


def _initial_states(config, problem):
    """Shared x(0) plus the v(0) draw used by the PI-consensus family."""
    md = problem.m * problem.dim
    rng = np.random.default_rng(config.seed)
    x0 = rng.normal(0.0, 0.1, md)
    v0_draw = rng.normal(0.0, 0.1, md)
    return x0, v0_draw


def _state_for(spec, x0, v0_draw):
    v0 = v0_draw if spec.algorithm == "pi_consensus" else np.zeros_like(x0)
    return NetworkState(x=x0.copy(), v=v0.copy())


def _algorithm_config(spec, params, config, problem, x0):
    precond = None
    if spec.preconditioned:
        precond = build_preconditioner(problem, x0, gamma=params["gamma"])
    return AlgorithmConfig(
        alpha=params["alpha"], beta=params["beta"], h=params["h"],
        method=spec.algorithm, preconditioner=precond,
        max_iters=config.max_iters, grad_tol=config.grad_tol,
        consensus_tol=config.consensus_tol, record_every=config.record_every,
        check_every=config.check_every)


def tune_grid(problem, topology, spec, config, x0, v0_draw):
    """Score every grid cell by iterations-to-tolerance and pick the best.

    Cells are visited in lexicographic parameter order (keys sorted
    alphabetically), so equal scores resolve to the lexicographically
    smallest parameters.  Divergent or non-converging cells score infinity;
    if every cell does, an error carrying the full table is raised.
    """
    keys = sorted(set(spec.params) | set(spec.grids))
    axes = [spec.grids.get(k, [spec.params[k]]) for k in keys]
    axes = [sorted(vals) for vals in axes]
    table = []
    best = None
    for combo in itertools.product(*axes):
        params = dict(zip(keys, combo))
        try:
            algo = _algorithm_config(spec, params, config, problem, x0)
            trace = run(problem, topology, algo, _state_for(spec, x0, v0_draw))
            score = trace.converged_at if trace.converged else np.inf
            note = ""
        except DivergenceError as exc:
            score, note = np.inf, f"diverged at {exc.iteration}"
        except ValueError as exc:
            score, note = np.inf, str(exc)
        table.append({"params": params, "score": score, "note": note})
        if score != np.inf and (best is None or score < best["score"]):
            best = table[-1]
    if best is None:
        err = RuntimeError(f"every grid cell failed for {spec.name}")
        err.table = table
        raise err
    return best["params"], table


@dataclass
class MethodResult:
    """Summary of one method's run within an experiment."""

    name: str
    params: dict
    iterations_to_tol: float          # inf when tolerance was never met
    final_cost: float
    final_grad_norm: float
    final_consensus_err: float
    rho: float | None
    r_squared: float | None
    effective_connectivity_ratio: float | None
    scalars_sent: int
    error: str | None = None


@dataclass
class ComparisonReport:
    """Per-method results of one experiment, all from identical x(0)."""

    problem_kind: str
    topology_spec: str
    x0_sha256: str
    results: list


def _fit_rate(trace):
    name = "dist_to_opt" if "dist_to_opt" in trace.columns else "grad_norm"
    try:
        est = analysis.estimate_rate(trace.column(name))
        return est.rho, est.r_squared
    except ValueError:
        return None, None


def run_experiment(config, out_dir=None):
    """Run every configured method from identical initial conditions.

    Grids are tuned first (scored by iterations-to-tolerance), then each
    method runs once with its chosen parameters.  Per-method trace CSVs, a
    summary CSV, and a long-format plot-data CSV land in the output
    directory.  Returns the ComparisonReport; per-method failures are
    recorded in it rather than aborting the experiment.
    """
    problem = build_problem(config)
    topology = parse_topology_spec(config.topology_spec)
    if topology.m != problem.m:
        raise ConfigError(f"topology has {topology.m} agents but problem has {problem.m}")
    lap = graph.laplacian(topology, problem.dim)
    x0, v0_draw = _initial_states(config, problem)
    x0_hash = hashlib.sha256(x0.tobytes()).hexdigest()

    out = Path(out_dir if out_dir is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    results = []
    traces = {}
    for spec in config.methods:
        assert hashlib.sha256(x0.tobytes()).hexdigest() == x0_hash  # fairness: shared x(0)
        params = dict(spec.params)
        error = None
        trace = None
        try:
            if spec.grids:
                tuned, _ = tune_grid(problem, topology, spec, config, x0, v0_draw)
                params.update(tuned)
            algo = _algorithm_config(spec, params, config, problem, x0)
            trace = run(problem, topology, algo, _state_for(spec, x0, v0_draw))
        except DivergenceError as exc:
            error = str(exc)
            trace = exc.trace
        except (RuntimeError, ValueError) as exc:
            error = str(exc)

        if trace is not None and len(trace):
            traces[spec.name] = trace
            _write_trace_csv(out / f"{spec.name}.csv", trace)
            rho, r2 = _fit_rate(trace)
            final = trace.final
            eff = None
            if problem.m > 1:
                precond = None
                if spec.preconditioned:
                    precond = build_preconditioner(problem, x0, gamma=params["gamma"])
                eff = (graph.effective_connectivity(params["h"], params["beta"], precond, lap)
                       / lap.lam_min_nonzero)
            results.append(MethodResult(
                name=spec.name, params=params,
                iterations_to_tol=(trace.converged_at if trace.converged else np.inf),
                final_cost=final["aggregate_cost"],
                final_grad_norm=final["grad_norm"],
                final_consensus_err=final["consensus_err"],
                rho=rho, r_squared=r2,
                effective_connectivity_ratio=eff,
                scalars_sent=trace.scalars_communicated,
                error=error))
        else:
            results.append(MethodResult(
                name=spec.name, params=params, iterations_to_tol=np.inf,
                final_cost=np.nan, final_grad_norm=np.nan, final_consensus_err=np.nan,
                rho=None, r_squared=None, effective_connectivity_ratio=None,
                scalars_sent=0, error=error))

    report = ComparisonReport(problem_kind=config.problem_kind,
                              topology_spec=config.topology_spec,
                              x0_sha256=x0_hash, results=results)
    _write_summary_csv(out / "summary.csv", report)
    emit_plotdata(traces, out / "plotdata.csv")
    return report


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _write_trace_csv(path, trace):
    order = [c for c in ("k", "t", "aggregate_cost", "grad_norm", "consensus_err",
                         "dist_to_opt", "V", "V2") if c in trace.columns]
    order += [c for c in trace.columns if c not in order]
    lines = [",".join(order)]
    cols = [trace.column(c) for c in order]
    for row in zip(*cols):
        lines.append(",".join(_fmt(float(v)) if c != "k" else str(int(v))
                              for c, v in zip(order, row)))
    Path(path).write_text("\n".join(lines) + "\n")


def _write_summary_csv(path, report):
    header = ["method", "iterations_to_tol", "final_cost", "final_grad_norm",
              "final_consensus_err", "rho", "r_squared",
              "effective_connectivity_ratio", "scalars_sent", "error"]
    lines = [",".join(header)]
    for r in report.results:
        lines.append(",".join([
            r.name, _fmt(r.iterations_to_tol), _fmt(r.final_cost),
            _fmt(r.final_grad_norm), _fmt(r.final_consensus_err),
            _fmt(r.rho), _fmt(r.r_squared), _fmt(r.effective_connectivity_ratio),
            str(r.scalars_sent), r.error or ""]))
    Path(path).write_text("\n".join(lines) + "\n")


def emit_plotdata(traces, path):
    """Long-format CSV (method, k, metric, value) covering the figure panels."""
    metrics = ("aggregate_cost", "grad_norm", "consensus_err", "dist_to_opt")
    lines = ["method,k,metric,value"]
    for name, trace in traces.items():
        ks = trace.column("k")
        for metric in metrics:
            if metric not in trace.columns:
                continue
            vals = trace.column(metric)
            for k, v in zip(ks, vals):
                lines.append(f"{name},{int(k)},{metric},{_fmt(float(v))}")
    Path(path).write_text("\n".join(lines) + "\n")
