"""Local cost functions and the aggregate / cumulative views used everywhere.

Each agent i holds a private cost f_i on R^d.  Two global views matter:

* the aggregate cost  f(x)  = sum_i f_i(x)   for a single point x in R^d,
* the cumulative cost F(x)  = sum_i f_i(x_i) on the stacked space R^{md}.

Cost objects expose value/gradient and, when available, a Hessian; they are
immutable and safe to share.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

STATIONARITY_TOL = 1e-8  # aggregate gradient norm allowed at a declared minimizer


class CostFunction:
    """Base class: a continuously differentiable cost on R^d."""

    d: int
    has_hessian = False
    known_minimizer = None

    def value(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError

    def hessian(self, x):
        raise NotImplementedError(f"{type(self).__name__} offers no Hessian")

    def _check_point(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.d,):
            raise ValueError(f"expected point of dimension {self.d}, got shape {x.shape}")
        return x


class QuadraticCost(CostFunction):
    """f(x) = 1/2 x'Ax - b'x with A symmetric positive semidefinite."""

    def __init__(self, A, b):
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.d = self.b.shape[0]
        if self.A.shape != (self.d, self.d):
            raise ValueError("A and b dimensions disagree")
        if not np.allclose(self.A, self.A.T, atol=1e-10):
            raise ValueError("A must be symmetric")
        eigs = np.linalg.eigvalsh(self.A)
        if eigs[0] < -1e-10:
            raise ValueError(f"A must be positive semidefinite (lambda_min={eigs[0]:g})")
        self.has_hessian = True
        if eigs[0] > 1e-12:
            self.known_minimizer = np.linalg.solve(self.A, self.b)

    def value(self, x):
        x = self._check_point(x)
        return float(0.5 * x @ (self.A @ x) - self.b @ x)

    def gradient(self, x):
        x = self._check_point(x)
        return self.A @ x - self.b

    def hessian(self, x):
        self._check_point(x)
        return self.A.copy()


class RsiNonconvexCost(CostFunction):
    """Coordinatewise (t-a)^2 + c sin^2(t-a), summed over coordinates.

    Nonconvex for c > 1 (the second derivative 2 + 2c cos(2(t-a)) turns
    negative), yet the secant slope from the minimizer a stays bounded away
    from zero for moderate c, which is exactly the regime the convergence
    theory covers without convexity.
    """

    def __init__(self, a, c):
        self.a = np.atleast_1d(np.asarray(a, dtype=float))
        if not 0.0 <= c < 2.0:
            raise ValueError(f"c={c} outside [0, 2); the secant inequality may fail")
        self.c = float(c)
        self.d = self.a.shape[0]
        self.has_hessian = True
        self.known_minimizer = self.a.copy()

    def value(self, x):
        x = self._check_point(x)
        t = x - self.a
        return float(np.sum(t * t + self.c * np.sin(t) ** 2))

    def gradient(self, x):
        x = self._check_point(x)
        t = x - self.a
        return 2.0 * t + self.c * np.sin(2.0 * t)

    def hessian(self, x):
        x = self._check_point(x)
        t = x - self.a
        return np.diag(2.0 + 2.0 * self.c * np.cos(2.0 * t))


def _log_sigmoid(t):
    """log(sigma(t)) = -softplus(-t), computed without overflow."""
    return np.minimum(t, 0.0) - np.log1p(np.exp(-np.abs(t)))


class LogisticCost(CostFunction):
    """Cross-entropy of a logistic model on one agent's data shard.

    value(w) = sum_j [log(1 + exp(w'x_j)) - y_j w'x_j], written with the
    stable softplus form so extreme margins (ill-conditioned features blow
    w'x up) do not overflow.
    """

    def __init__(self, features, labels):
        self.features = np.asarray(features, dtype=float)
        self.labels = np.asarray(labels, dtype=float)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (n, d) aligned with n labels")
        if self.features.shape[0] == 0:
            raise ValueError("empty data shard")
        if not np.all(np.isin(self.labels, (0.0, 1.0))):
            raise ValueError("labels must be binary 0/1")
        self.d = self.features.shape[1]
        self.has_hessian = True

    def value(self, w):
        w = self._check_point(w)
        t = self.features @ w
        # softplus(t) - y*t, with softplus(t) = max(t,0) + log1p(exp(-|t|))
        softplus = np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))
        return float(np.sum(softplus - self.labels * t))

    def gradient(self, w):
        w = self._check_point(w)
        t = self.features @ w
        sigma = np.exp(_log_sigmoid(t))
        return self.features.T @ (sigma - self.labels)

    def hessian(self, w):
        w = self._check_point(w)
        t = self.features @ w
        sigma = np.exp(_log_sigmoid(t))
        weights = sigma * (1.0 - sigma)
        return (self.features * weights[:, None]).T @ self.features


@dataclass
class ProblemInstance:
    """m local costs of equal dimension plus optional analytic metadata.

    ``x_star`` is the minimizer of the aggregate cost when known; ``mu`` and
    ``lipschitz`` are the secant-inequality and gradient-Lipschitz constants
    of the cumulative cost when analytically available (quadratics), else
    None and estimated empirically by the analysis module.
    """

    costs: list
    x_star: np.ndarray | None = None
    mu: float | None = None
    lipschitz: float | None = None

    def __post_init__(self):
        if not self.costs:
            raise ValueError("need at least one local cost")
        dims = {c.d for c in self.costs}
        if len(dims) != 1:
            raise ValueError(f"local costs disagree on dimension: {sorted(dims)}")
        if self.x_star is not None:
            self.x_star = np.asarray(self.x_star, dtype=float)
            _, grad = aggregate_value_and_gradient(self, self.x_star)
            gnorm = float(np.linalg.norm(grad))
            if gnorm > STATIONARITY_TOL:
                raise ValueError(
                    f"declared minimizer is not stationary: |grad f(x_star)| = {gnorm:.3e}"
                )

    @property
    def m(self):
        return len(self.costs)

    @property
    def dim(self):
        return self.costs[0].d

    def stacked_minimizer(self):
        """X_star = x_star repeated for every agent, or None."""
        if self.x_star is None:
            return None
        return np.tile(self.x_star, self.m)


def aggregate_value_and_gradient(problem, x):
    """f(x) = sum_i f_i(x) and its gradient at a common point x in R^d."""
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.dim,):
        raise ValueError(f"expected point of dimension {problem.dim}")
    total = 0.0
    grad = np.zeros(problem.dim)
    for c in problem.costs:
        total += c.value(x)
        grad += c.gradient(x)
    return total, grad


def cumulative_gradient(problem, x_stacked):
    """grad F(x) for stacked x in R^{md}: block i is grad f_i(x_i)."""
    m, d = problem.m, problem.dim
    x_stacked = np.asarray(x_stacked, dtype=float)
    if x_stacked.shape != (m * d,):
        raise ValueError(f"expected stacked vector of length {m * d}")
    out = np.empty(m * d)
    for i, c in enumerate(problem.costs):
        out[i * d:(i + 1) * d] = c.gradient(x_stacked[i * d:(i + 1) * d])
    return out


def cumulative_value(problem, x_stacked):
    """F(x) = sum_i f_i(x_i) for stacked x in R^{md}."""
    m, d = problem.m, problem.dim
    x_stacked = np.asarray(x_stacked, dtype=float)
    if x_stacked.shape != (m * d,):
        raise ValueError(f"expected stacked vector of length {m * d}")
    return float(sum(c.value(x_stacked[i * d:(i + 1) * d]) for i, c in enumerate(problem.costs)))


class StackedCost(CostFunction):
    """The cumulative cost F as a single cost on R^{md}.

    Lets the secant-inequality and Lipschitz estimators treat F like any
    other cost function.
    """

    def __init__(self, problem):
        self.problem = problem
        self.d = problem.m * problem.dim
        self.has_hessian = all(c.has_hessian for c in problem.costs)
        self.known_minimizer = problem.stacked_minimizer()

    def value(self, x):
        return cumulative_value(self.problem, x)

    def gradient(self, x):
        return cumulative_gradient(self.problem, x)

    def hessian(self, x):
        x = self._check_point(x)
        m, d = self.problem.m, self.problem.dim
        H = np.zeros((m * d, m * d))
        for i, c in enumerate(self.problem.costs):
            H[i * d:(i + 1) * d, i * d:(i + 1) * d] = c.hessian(x[i * d:(i + 1) * d])
        return H


def minimize_aggregate(problem, x0=None, grad_tol=1e-10, max_newton=100):
    """Centralized minimizer of the aggregate cost (BFGS plus Newton polish).

    Serves as the reference solution the distributed runs are judged
    against; it never touches the network machinery.
    """
    d = problem.dim
    x = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float).copy()

    def fun(z):
        return aggregate_value_and_gradient(problem, z)

    res = scipy.optimize.minimize(fun, x, jac=True, method="BFGS",
                                  options={"gtol": 1e-12, "maxiter": 2000})
    x = res.x
    if all(c.has_hessian for c in problem.costs):
        for _ in range(max_newton):
            _, g = aggregate_value_and_gradient(problem, x)
            if np.linalg.norm(g) <= grad_tol:
                break
            H = sum(c.hessian(x) for c in problem.costs)
            w, V = np.linalg.eigh(H)
            w = np.maximum(w, 1e-8)  # keep the polish step descending even off the convex region
            x = x - V @ ((V.T @ g) / w)
    _, g = aggregate_value_and_gradient(problem, x)
    if np.linalg.norm(g) > STATIONARITY_TOL:
        raise RuntimeError(f"centralized solve stalled at |grad| = {np.linalg.norm(g):.3e}")
    return x


def build_rsi_suite(m, d, a_offsets=None, c=1.5, verify_box=3.0, verify_samples=2000, seed=0):
    """Suite of m nonconvex secant-inequality costs with per-agent shifts.

    Every agent gets the quadratic-plus-sin^2 family shifted by its own
    offset; the aggregate minimizer is located by the centralized solver and
    the cumulative cost is verified (not assumed) to satisfy the secant
    inequality on a sampled box around it.

    Parameters
    ----------
    m, d : int
        Agent count and dimension.
    a_offsets : array of shape (m,) or (m, d), optional
        Per-agent minimizer shifts; defaults to an even spread in
        [-0.3, 0.3], small enough that the cumulative cost stays RSI.
    c : float
        Nonconvexity strength, 0 <= c < 2; c > 1 makes each local cost
        nonconvex.
    """
    if m < 1 or d < 1:
        raise ValueError("m and d must be >= 1")
    if a_offsets is None:
        a_offsets = np.linspace(-0.3, 0.3, m) if m > 1 else np.zeros(1)
    a_offsets = np.asarray(a_offsets, dtype=float)
    if a_offsets.shape == (m,):
        shifts = np.repeat(a_offsets[:, None], d, axis=1)
    elif a_offsets.shape == (m, d):
        shifts = a_offsets
    else:
        raise ValueError(f"a_offsets must have shape ({m},) or ({m},{d})")

    costs = [RsiNonconvexCost(shifts[i], c) for i in range(m)]
    problem = ProblemInstance(costs=costs)
    problem.x_star = minimize_aggregate(problem, x0=shifts.mean(axis=0))

    # verify the cumulative cost is empirically RSI around the consensus point;
    # X* is not blockwise stationary, only the sum of block gradients vanishes
    from piconsensus.analysis import rsi_estimate

    mu_hat = rsi_estimate(StackedCost(problem), problem.stacked_minimizer(),
                          sample_box=(-verify_box, verify_box),
                          n_samples=verify_samples, seed=seed, check_stationary=False)
    if mu_hat <= 0.0:
        raise ValueError(
            f"cumulative cost fails the secant inequality on the test box (mu_hat={mu_hat:.3e}); "
            "reduce the offset spread or c"
        )
    return problem


def build_quadratic_suite(m, d, condition=10.0, seed=0):
    """m quadratic costs whose aggregate Hessian has a prescribed condition number.

    The aggregate Hessian eigenvalues are log-spaced over [1, condition] in a
    shared random eigenbasis; each agent holds a positive share of every
    eigenvalue so each local cost is strongly convex and the analytic
    constants mu = min_i lambda_min(A_i), L_f = max_i lambda_max(A_i) are
    recorded exactly.
    """
    if m < 1 or d < 1:
        raise ValueError("m and d must be >= 1")
    if condition < 1.0:
        raise ValueError("condition number must be >= 1")
    rng = np.random.default_rng(seed)
    Q = np.linalg.qr(rng.normal(size=(d, d)))[0]
    total = np.logspace(0.0, np.log10(condition), d) if d > 1 else np.array([1.0])

    # positive per-agent shares of each aggregate eigenvalue, summing to 1
    shares = rng.uniform(0.5, 1.5, size=(m, d))
    shares /= shares.sum(axis=0, keepdims=True)

    costs = []
    mu = np.inf
    lipschitz = 0.0
    for i in range(m):
        w = shares[i] * total
        A = (Q * w) @ Q.T
        b = rng.normal(size=d)
        costs.append(QuadraticCost(A, b))
        mu = min(mu, w.min())
        lipschitz = max(lipschitz, w.max())

    A_total = sum(c.A for c in costs)
    b_total = sum(c.b for c in costs)
    x_star = np.linalg.solve(A_total, b_total)
    return ProblemInstance(costs=costs, x_star=x_star, mu=float(mu), lipschitz=float(lipschitz))


def build_logistic(shards):
    """One LogisticCost per agent from (features, labels) shards.

    Accepts data_io Dataset objects or plain (features, labels) pairs.  No
    strong convexity is assumed; convergence on these problems is monitored
    by gradient norm and consensus error.
    """
    costs = []
    for shard in shards:
        if hasattr(shard, "features"):
            X, y = shard.features, shard.labels
        else:
            X, y = shard
        costs.append(LogisticCost(X, y))
    return ProblemInstance(costs=costs)
