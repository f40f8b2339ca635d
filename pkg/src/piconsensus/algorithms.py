"""Distributed optimization dynamics: PI consensus, PI, and the usual baselines.

Every algorithm is a pure one-round transition on a NetworkState (round-k
snapshot in, round-k+1 state out) plus a shared driver loop.  Agents only
ever read neighbor values: all coupling between agents goes through the
graph Laplacian, so locality is structural rather than policed.

The pre-conditioned PI consensus round for agent i is

    x_i+ = x_i + h K_i [ sum_j (x_j - x_i) - beta sum_j (v_j - v_i)
                         - alpha grad f_i(x_i) ],
    v_i+ = v_i + h beta K_i sum_j (x_j - x_i),

with sums over the neighbors of i; the PI algorithm feeds its integral
state back directly (x_i+ uses -beta v_i) and flips the sign of the
v-update, exchanging only x with neighbors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from piconsensus.costs import aggregate_value_and_gradient, cumulative_gradient
from piconsensus.graph import laplacian

METHODS = ("pi_consensus", "pi", "dgd", "extra", "diging")

HESSIAN_FLOOR = 1e-8  # eigenvalue clamp so preconditioner blocks stay SPD for nonconvex costs


class DivergenceError(RuntimeError):
    """An iterate became non-finite; carries the iteration and last finite data."""

    def __init__(self, message, iteration=None, state=None, trace=None):
        super().__init__(message)
        self.iteration = iteration
        self.state = state
        self.trace = trace


@dataclass
class NetworkState:
    """Stacked agent estimates x, integral states v, and the clock.

    ``aux`` carries method-internal arrays (EXTRA's previous iterate,
    DIGing's gradient tracker); step functions never mutate it in place.
    """

    x: np.ndarray
    v: np.ndarray
    k: int = 0
    t: float = 0.0
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.x.shape != self.v.shape or self.x.ndim != 1:
            raise ValueError("x and v must be stacked vectors of equal length")

    @classmethod
    def zeros(cls, m, d):
        return cls(x=np.zeros(m * d), v=np.zeros(m * d))


class Preconditioner:
    """Block-diagonal SPD matrix K = Diag(K_1 ... K_m), or the tagged identity.

    Blocks are verified symmetric positive definite at construction;
    Cholesky factors are cached for the K^{-1} products the Lyapunov
    machinery needs.
    """

    def __init__(self, blocks):
        self.blocks = np.asarray(blocks, dtype=float)
        if self.blocks.ndim != 3 or self.blocks.shape[1] != self.blocks.shape[2]:
            raise ValueError("expected blocks of shape (m, d, d)")
        self.m, self.d = self.blocks.shape[0], self.blocks.shape[1]
        self.is_identity = False
        scale = max(1.0, float(np.abs(self.blocks).max()))
        self._factors = []
        for i, B in enumerate(self.blocks):
            if not np.allclose(B, B.T, atol=1e-10 * scale):
                raise ValueError(f"preconditioner block {i} is not symmetric")
            try:
                self._factors.append(scipy.linalg.cho_factor(B))
            except np.linalg.LinAlgError as exc:
                raise ValueError(f"preconditioner block {i} is not positive definite") from exc

    @classmethod
    def identity(cls, m, d):
        obj = cls.__new__(cls)
        obj.blocks = None
        obj.m, obj.d = m, d
        obj.is_identity = True
        obj._factors = None
        return obj

    def apply(self, w):
        """Blockwise K @ w on a stacked vector."""
        if self.is_identity:
            return w
        return np.einsum("ijk,ik->ij", self.blocks, w.reshape(self.m, self.d)).ravel()

    def solve(self, w):
        """Blockwise K^{-1} @ w via the cached Cholesky factors."""
        if self.is_identity:
            return w
        out = np.empty_like(w, dtype=float)
        W = w.reshape(self.m, self.d)
        for i, factor in enumerate(self._factors):
            out[i * self.d:(i + 1) * self.d] = scipy.linalg.cho_solve(factor, W[i])
        return out


@dataclass
class AlgorithmConfig:
    """Parameters of one algorithm run.

    alpha weighs the gradient, beta the integral feedback, h is the Euler
    stepsize.  The run stops once the aggregate gradient norm and the
    consensus error both drop below their tolerances.
    """

    alpha: float
    beta: float
    h: float
    method: str = "pi_consensus"
    preconditioner: Preconditioner | None = None
    max_iters: int = 10000
    grad_tol: float = 1e-8
    consensus_tol: float = 1e-8
    record_every: int = 1
    check_every: int = 1

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0 or self.h <= 0:
            raise ValueError("alpha, beta, h must all be positive")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.record_every < 1 or self.check_every < 1:
            raise ValueError("record_every and check_every must be >= 1")
        if (self.preconditioner is not None and not self.preconditioner.is_identity
                and self.method != "pi_consensus"):
            raise ValueError("only pi_consensus supports pre-conditioning")


class Trace:
    """Per-iteration diagnostics of a run, column-oriented.

    The first append fixes the column set; iteration indices must be
    strictly increasing.
    """

    def __init__(self, method):
        self.method = method
        self._data = None
        self.converged_at = None
        self.scalars_per_round = 0
        self.final_state = None

    def append(self, **values):
        if self._data is None:
            self._data = {name: [] for name in values}
        if set(values) != set(self._data):
            raise ValueError("record fields changed mid-trace")
        if self._data["k"] and values["k"] <= self._data["k"][-1]:
            raise ValueError("iteration indices must be strictly increasing")
        for name, val in values.items():
            self._data[name].append(val)

    def column(self, name):
        if self._data is None or name not in self._data:
            raise KeyError(name)
        return np.asarray(self._data[name])

    @property
    def columns(self):
        return tuple(self._data) if self._data else ()

    @property
    def final(self):
        return {name: vals[-1] for name, vals in self._data.items()}

    def __len__(self):
        return 0 if self._data is None else len(self._data["k"])

    @property
    def converged(self):
        return self.converged_at is not None

    @property
    def rounds(self):
        return int(self._data["k"][-1]) if self._data else 0

    @property
    def scalars_communicated(self):
        return self.scalars_per_round * self.rounds


def scalars_per_round(method, d, n_edges):
    """Scalars sent over the network per round (both directions of each edge).

    PI consensus and DIGing exchange two d-vectors per neighbor per round,
    the others one; all are O(d) per edge.
    """
    per_vector = d * n_edges * 2
    return 2 * per_vector if method in ("pi_consensus", "diging") else per_vector


def build_preconditioner(problem, x0_per_agent, gamma, floor=HESSIAN_FLOOR):
    """K_i = (hessian of f_i at the agent's start + gamma I)^{-1}, clamped SPD.

    For nonconvex local costs the shifted Hessian can have eigenvalues at or
    below zero; those are clamped to ``floor`` before inversion so each
    block stays SPD.  Costs without a Hessian fall back to the identity with
    a warning.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    m, d = problem.m, problem.dim
    x0 = np.asarray(x0_per_agent, dtype=float).reshape(m, d)
    if not all(c.has_hessian for c in problem.costs):
        warnings.warn("cost family offers no Hessian; using identity preconditioner")
        return Preconditioner.identity(m, d)
    blocks = np.empty((m, d, d))
    for i, c in enumerate(problem.costs):
        M = c.hessian(x0[i]) + gamma * np.eye(d)
        w, V = np.linalg.eigh(M)
        w = np.maximum(w, floor)
        blocks[i] = (V / w) @ V.T
    return Preconditioner(blocks)


def continuous_rhs(state, problem, lap, config):
    """Right-hand side (dx/dt, dv/dt) of the consensus flow.

    PI consensus: dx = -K(L~x - beta L~v + alpha grad F(x)), dv = -beta K L~x.
    PI:           dx = -(L~x + beta v + alpha grad F(x)),    dv = +beta L~x.
    """
    Lx = lap.apply(state.x)
    grad = cumulative_gradient(problem, state.x)
    if config.method == "pi_consensus":
        K = config.preconditioner or Preconditioner.identity(lap.m, lap.d)
        Lv = lap.apply(state.v)
        dx = -K.apply(Lx - config.beta * Lv + config.alpha * grad)
        dv = -config.beta * K.apply(Lx)
    elif config.method == "pi":
        dx = -(Lx + config.beta * state.v + config.alpha * grad)
        dv = config.beta * Lx
    else:
        raise ValueError(f"no continuous flow for method {config.method!r}")
    return dx, dv


def _advance(state, x_new, v_new, aux=None):
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(v_new))):
        raise DivergenceError(f"non-finite iterate at round {state.k + 1}",
                              iteration=state.k + 1, state=state)
    return NetworkState(x=x_new, v=v_new, k=state.k + 1,
                        t=state.t, aux=state.aux if aux is None else aux)


def pi_consensus_step(state, problem, lap, config):
    """One explicit-Euler round of (pre-conditioned) PI consensus."""
    dx, dv = continuous_rhs(state, problem, lap, config)
    return _advance(state, state.x + config.h * dx, state.v + config.h * dv)


def pi_step(state, problem, lap, config):
    """One explicit-Euler round of the PI algorithm (v enters the x-update directly)."""
    dx, dv = continuous_rhs(state, problem, lap, config)
    return _advance(state, state.x + config.h * dx, state.v + config.h * dv)


def _mixing_check(lap, h):
    deg_max = float(lap.L.diagonal().max())
    if h * deg_max >= 1.0:
        raise ValueError(
            f"h={h:g} too large: I - h L must keep a positive diagonal (max degree {deg_max:g})"
        )


def baseline_step(state, problem, lap, config):
    """One round of DGD, EXTRA, or DIGing with mixing matrix W = I - h L~.

    Auxiliary state (EXTRA's previous iterate and gradient, DIGing's
    tracker) lives in ``state.aux`` and follows the standard
    initializations: EXTRA's first round is a plain DGD round, DIGing's
    tracker starts at the local gradients.
    """
    _mixing_check(lap, config.h)
    h, alpha = config.h, config.alpha

    if config.method == "dgd":
        grad = cumulative_gradient(problem, state.x)
        x_new = state.x - h * lap.apply(state.x) - alpha * grad
        return _advance(state, x_new, state.v)

    if config.method == "extra":
        grad = cumulative_gradient(problem, state.x)
        if "x_prev" not in state.aux:
            x_new = state.x - h * lap.apply(state.x) - alpha * grad
        else:
            x_prev = state.aux["x_prev"]
            grad_prev = state.aux["grad_prev"]
            Wx = state.x - h * lap.apply(state.x)
            Wt_xprev = x_prev - 0.5 * h * lap.apply(x_prev)  # (I + W)/2 applied to x_prev
            x_new = state.x + Wx - Wt_xprev - alpha * (grad - grad_prev)
        return _advance(state, x_new, state.v, aux={"x_prev": state.x, "grad_prev": grad})

    if config.method == "diging":
        if "tracker" not in state.aux:
            grad = cumulative_gradient(problem, state.x)
            y = grad
        else:
            y = state.aux["tracker"]
            grad = state.aux["grad_prev"]
        x_new = state.x - h * lap.apply(state.x) - alpha * y
        if not np.all(np.isfinite(x_new)):
            raise DivergenceError(f"non-finite iterate at round {state.k + 1}",
                                  iteration=state.k + 1, state=state)
        grad_new = cumulative_gradient(problem, x_new)
        y_new = y - h * lap.apply(y) + grad_new - grad
        return _advance(state, x_new, state.v,
                        aux={"tracker": y_new, "grad_prev": grad_new})

    raise ValueError(f"not a baseline method: {config.method!r}")


_STEP_FUNCTIONS = {
    "pi_consensus": pi_consensus_step,
    "pi": pi_step,
    "dgd": baseline_step,
    "extra": baseline_step,
    "diging": baseline_step,
}


def equilibrium_residual(state, problem, lap, config):
    """Norm of the flow field at a state: one-step displacement divided by h."""
    dx, dv = continuous_rhs(state, problem, lap, config)
    return float(np.sqrt(np.dot(dx, dx) + np.dot(dv, dv)))


def _consensus_metrics(problem, x):
    """Aggregate cost and gradient norm at the agent mean, plus consensus error."""
    m, d = problem.m, problem.dim
    X = x.reshape(m, d)
    xbar = X.mean(axis=0)
    cost, grad = aggregate_value_and_gradient(problem, xbar)
    cerr = float(np.max(np.linalg.norm(X - xbar, axis=1)))
    return cost, float(np.linalg.norm(grad)), cerr


def run(problem, topology, config, state0=None, monitors=()):
    """Iterate the configured method until tolerance or the budget runs out.

    Records a Trace row at ``record_every`` strides (always including round
    0 and the final round); monitors are called on every round and may add
    columns.  Raises DivergenceError with the partial trace attached if an
    iterate goes non-finite.
    """
    if topology.m != problem.m:
        raise ValueError(f"topology has {topology.m} agents, problem has {problem.m}")
    lap = laplacian(topology, problem.dim)
    md = problem.m * problem.dim
    state = NetworkState.zeros(problem.m, problem.dim) if state0 is None else state0
    if state.x.shape != (md,):
        raise ValueError(f"state vectors must have length {md}")
    if config.method == "pi" and np.any(state.v != 0.0):
        warnings.warn("PI algorithm expects v(0) = 0; a nonzero total drives the "
                      "limit away from the minimizer")
    if config.method in ("dgd", "extra", "diging"):
        _mixing_check(lap, config.h)

    step = _STEP_FUNCTIONS[config.method]
    x_star = problem.stacked_minimizer()
    trace = Trace(method=config.method)
    trace.scalars_per_round = scalars_per_round(config.method, problem.dim, len(topology.edges))

    last_recorded = -1

    def record(st, cost, gnorm, cerr, extras):
        nonlocal last_recorded
        if st.k == last_recorded:
            return
        row = {"k": st.k, "aggregate_cost": cost, "grad_norm": gnorm,
               "consensus_err": cerr}
        if x_star is not None:
            row["dist_to_opt"] = float(np.linalg.norm(st.x - x_star))
        row.update(extras)
        trace.append(**row)
        last_recorded = st.k

    extras = {}
    for mon in monitors:
        extras.update(mon(state))
    cost, gnorm, cerr = _consensus_metrics(problem, state.x)
    record(state, cost, gnorm, cerr, extras)
    trace.final_state = state
    if gnorm <= config.grad_tol and cerr <= config.consensus_tol:
        trace.converged_at = state.k
        return trace

    for it in range(1, config.max_iters + 1):
        try:
            state = step(state, problem, lap, config)
        except DivergenceError as exc:
            exc.trace = trace
            raise
        trace.final_state = state
        extras = {}
        for mon in monitors:
            extras.update(mon(state))
        is_last = it == config.max_iters
        check_due = state.k % config.check_every == 0 or is_last
        record_due = state.k % config.record_every == 0 or is_last
        if not (check_due or record_due):
            continue
        cost, gnorm, cerr = _consensus_metrics(problem, state.x)
        if check_due and gnorm <= config.grad_tol and cerr <= config.consensus_tol:
            trace.converged_at = state.k
            record(state, cost, gnorm, cerr, extras)
            return trace
        if record_due:
            record(state, cost, gnorm, cerr, extras)
    return trace


def rk4_integrate(y0, rhs, h, steps):
    """Classical fixed-step 4th-order Runge-Kutta.

    Parameters
    ----------
    y0 : array_like
        Initial state (any flat vector).
    rhs : callable
        Maps a state vector to its time derivative.
    h : float
        Step length.
    steps : int
        Number of steps; the trajectory has steps + 1 rows.
    """
    if h <= 0:
        raise ValueError("step length must be positive")
    y = np.atleast_1d(np.asarray(y0, dtype=float)).copy()
    out = np.empty((steps + 1, y.size))
    out[0] = y
    for s in range(steps):
        k1 = np.asarray(rhs(y))
        k2 = np.asarray(rhs(y + 0.5 * h * k1))
        k3 = np.asarray(rhs(y + 0.5 * h * k2))
        k4 = np.asarray(rhs(y + h * k3))
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise DivergenceError(f"non-finite state at RK4 step {s + 1}", iteration=s + 1)
        out[s + 1] = y
    return out


def run_continuous(problem, topology, config, state0=None, t_end=50.0, dt=0.01,
                   record_every=10):
    """Integrate the continuous flow with RK4 and record the usual metrics.

    Higher-fidelity companion to the Euler-discretized ``run``: used to
    observe the exponential decay of the continuous-time dynamics directly.
    """
    if topology.m != problem.m:
        raise ValueError(f"topology has {topology.m} agents, problem has {problem.m}")
    lap = laplacian(topology, problem.dim)
    md = problem.m * problem.dim
    state = NetworkState.zeros(problem.m, problem.dim) if state0 is None else state0

    def packed_rhs(z):
        st = NetworkState(x=z[:md], v=z[md:])
        dx, dv = continuous_rhs(st, problem, lap, config)
        return np.concatenate([dx, dv])

    steps = int(round(t_end / dt))
    traj = rk4_integrate(np.concatenate([state.x, state.v]), packed_rhs, dt, steps)

    x_star = problem.stacked_minimizer()
    trace = Trace(method=config.method)
    for s in range(0, steps + 1, record_every):
        x = traj[s, :md]
        cost, gnorm, cerr = _consensus_metrics(problem, x)
        row = {"k": s, "t": s * dt, "aggregate_cost": cost, "grad_norm": gnorm,
               "consensus_err": cerr}
        if x_star is not None:
            row["dist_to_opt"] = float(np.linalg.norm(x - x_star))
        trace.append(**row)
    return trace
