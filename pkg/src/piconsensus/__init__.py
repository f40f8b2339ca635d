"""Distributed optimization over peer-to-peer networks with PI consensus dynamics.

The package simulates synchronous multi-agent networks in which every agent
holds a private cost and repeatedly exchanges state with its neighbors.  The
centerpiece is the pre-conditioned PI consensus update (discrete and
continuous-time), together with the PI algorithm and the classic
DGD/EXTRA/DIGing baselines, plus the spectral and Lyapunov diagnostics needed
to certify convergence rates numerically.
"""

from piconsensus.graph import (
    Topology,
    LaplacianOperator,
    build_topology,
    laplacian,
    spectral_interval,
    effective_connectivity,
)
from piconsensus.costs import (
    CostFunction,
    QuadraticCost,
    RsiNonconvexCost,
    LogisticCost,
    ProblemInstance,
    aggregate_value_and_gradient,
    cumulative_gradient,
    build_rsi_suite,
    build_quadratic_suite,
    build_logistic,
)
from piconsensus.algorithms import (
    NetworkState,
    Preconditioner,
    AlgorithmConfig,
    Trace,
    DivergenceError,
    build_preconditioner,
    pi_consensus_step,
    pi_step,
    baseline_step,
    continuous_rhs,
    rk4_integrate,
    run,
    run_continuous,
    equilibrium_residual,
)
from piconsensus.analysis import (
    FeasibilityReport,
    RateEstimate,
    LyapunovMonitor,
    rsi_estimate,
    lipschitz_estimate,
    check_feasibility,
    suggest_parameters,
    lyapunov_value,
    lyapunov_v2,
    estimate_rate,
    consensus_error,
    gradient_check,
    hessian_check,
)

__version__ = "0.1.0"
