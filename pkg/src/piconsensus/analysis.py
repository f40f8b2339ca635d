"""Executable pieces of the convergence theory.

Estimators for the secant-inequality constant mu and the gradient Lipschitz
constant, the four-way parameter feasibility check with its admissible
p-interval, the quadratic Lyapunov candidates V and V2 with a per-run
monitor, geometric rate fitting, and finite-difference derivative checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EQUALITY_RTOL = 1e-12      # relative slack on the beta*c1 - beta*c2 + c3 = 0 constraint
RATE_FLOOR_FACTOR = 100.0  # residuals below 100 x eps x r(0) are noise, not signal


def rsi_estimate(cost, x_star, sample_box, n_samples, seed, stationarity_tol=1e-6,
                 check_stationary=True):
    """Empirical secant-inequality constant of a cost around a reference point.

    Draws points uniformly from the box and returns the smallest observed
    ratio (grad g(x) - grad g(x*))'(x - x*) / |x - x*|^2, an upper estimate
    of the true constant restricted to the box.  A positive value certifies
    the inequality on the sample; the estimate tightens as sampling
    densifies.

    Parameters
    ----------
    cost : CostFunction
        Anything with ``gradient`` and dimension ``d``.
    x_star : array
        Reference point, normally the minimizer (stationarity is checked).
        Pass ``check_stationary=False`` for consensus-constrained references
        like the stacked X* of a cumulative cost, where only the sum of the
        block gradients vanishes, not each block.
    sample_box : (float, float)
        Absolute per-coordinate bounds to sample from.
    """
    x_star = np.asarray(x_star, dtype=float)
    g_star = np.asarray(cost.gradient(x_star), dtype=float)
    if check_stationary and np.linalg.norm(g_star) > stationarity_tol:
        raise ValueError(f"x_star is not stationary: |grad| = {np.linalg.norm(g_star):.3e}")
    if n_samples < 1:
        raise ValueError("need at least one sample")
    lo, hi = sample_box
    rng = np.random.default_rng(seed)
    best = np.inf
    used = 0
    for _ in range(n_samples):
        x = rng.uniform(lo, hi, size=x_star.shape)
        diff = x - x_star
        dist2 = float(diff @ diff)
        if dist2 < 1e-24:
            continue
        ratio = float((cost.gradient(x) - g_star) @ diff) / dist2
        best = min(best, ratio)
        used += 1
    if used == 0:
        raise ValueError("every sample coincided with x_star")
    return best


def lipschitz_estimate(grad, sample_box, n_pairs, seed, dim=None):
    """Empirical Lipschitz constant of a gradient map over a box.

    ``grad`` is either a callable x -> grad(x) (then ``dim`` is required) or
    a cost object with ``gradient`` and ``d``.  Returns the largest observed
    |grad(x) - grad(y)| / |x - y|, a lower estimate of the true constant.
    """
    if hasattr(grad, "gradient"):
        dim = grad.d
        grad_fn = grad.gradient
    else:
        if dim is None:
            raise ValueError("dim required when grad is a bare callable")
        grad_fn = grad
    if n_pairs < 1:
        raise ValueError("need at least one pair")
    lo, hi = sample_box
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(n_pairs):
        x = rng.uniform(lo, hi, size=dim)
        y = rng.uniform(lo, hi, size=dim)
        dist = float(np.linalg.norm(x - y))
        if dist < 1e-12:
            continue
        best = max(best, float(np.linalg.norm(np.asarray(grad_fn(x)) - np.asarray(grad_fn(y)))) / dist)
    return best


@dataclass
class FeasibilityReport:
    """Verdict on one (c1, c2, c3, alpha, beta) tuple for given problem constants.

    mu1 is the derived margin constant; the case tag records which branch of
    its min attains it.  ``p_interval`` is the admissible range for the
    Young-inequality parameter; the tuple is feasible exactly when all four
    conditions hold and that interval is nonempty.
    """

    c1: float
    c2: float
    c3: float
    alpha: float
    beta: float
    mu: float
    lipschitz: float
    lambda_min: float
    m: int
    mu1: float = field(init=False)
    case: str = field(init=False)
    pd_ok: bool = field(init=False)          # c1 c2 > c3^2
    coupling_ok: bool = field(init=False)    # c1 > beta c3
    alpha_ok: bool = field(init=False)       # alpha^2 L^2 c3 < beta mu1 lambda_min
    equality_ok: bool = field(init=False)    # beta c1 - beta c2 + c3 = 0
    p_interval: tuple = field(init=False)

    def __post_init__(self):
        for name in ("c1", "c2", "c3", "alpha", "beta", "mu", "lipschitz", "lambda_min"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        L, a, c1 = self.lipschitz, self.alpha, self.c1
        first = self.mu * a * c1 / (2.0 * self.m)
        second = ((c1 - self.beta * self.c3) * self.lambda_min
                  - (2.0 * self.m * L * L + self.mu * a * c1 * L) / (self.mu * a * c1))
        self.mu1 = min(first, second)
        self.case = "I" if first <= second else "II"
        self.pd_ok = c1 * self.c2 > self.c3 ** 2
        self.coupling_ok = c1 > self.beta * self.c3
        residual = self.beta * c1 - self.beta * self.c2 + self.c3
        scale = max(abs(self.beta * c1), abs(self.beta * self.c2), abs(self.c3))
        self.equality_ok = abs(residual) <= EQUALITY_RTOL * scale
        self.alpha_ok = a * a * L * L * self.c3 < self.beta * self.mu1 * self.lambda_min
        p_low = a * L * L * self.c3 / self.mu1 if self.mu1 > 0 else np.inf
        p_high = self.beta * self.lambda_min / a
        self.p_interval = (p_low, p_high)

    @property
    def feasible(self):
        return (self.pd_ok and self.coupling_ok and self.alpha_ok and self.equality_ok
                and self.p_interval[0] < self.p_interval[1])

    def to_dict(self):
        return {
            "c1": self.c1, "c2": self.c2, "c3": self.c3,
            "alpha": self.alpha, "beta": self.beta,
            "mu": self.mu, "lipschitz": self.lipschitz,
            "lambda_min": self.lambda_min, "m": self.m,
            "mu1": self.mu1, "case": self.case,
            "pd_ok": self.pd_ok, "coupling_ok": self.coupling_ok,
            "alpha_ok": self.alpha_ok, "equality_ok": self.equality_ok,
            "p_low": self.p_interval[0], "p_high": self.p_interval[1],
            "feasible": self.feasible,
        }


def check_feasibility(c1, c2, c3, alpha, beta, mu, lipschitz, lambda_min, m):
    """Evaluate the four feasibility conditions; infeasible is a valid report."""
    return FeasibilityReport(c1=c1, c2=c2, c3=c3, alpha=alpha, beta=beta, mu=mu,
                             lipschitz=lipschitz, lambda_min=lambda_min, m=m)


def suggest_parameters(mu, lipschitz, lambda_min, m, max_doublings=60, max_halvings=60):
    """Constructive search for a feasible (alpha, beta, c1, c2, c3) tuple.

    Fixes beta = c3 = 1, sets c2 = c1 + c3/beta so the equality constraint
    holds exactly, then grows c1 by doubling while trying alpha values
    halved down from 1/L.  The returned tuple always passes
    check_feasibility.
    """
    if mu <= 0 or lipschitz <= 0 or lambda_min <= 0:
        raise ValueError("mu, lipschitz, lambda_min must be positive")
    if m < 1:
        raise ValueError("m must be >= 1")
    beta = 1.0
    c3 = 1.0
    c1 = 2.0 * beta * c3
    for _ in range(max_doublings):
        c2 = c1 + c3 / beta
        alpha = 1.0 / lipschitz
        for _ in range(max_halvings):
            report = check_feasibility(c1, c2, c3, alpha, beta, mu, lipschitz, lambda_min, m)
            if report.feasible:
                return alpha, beta, c1, c2, c3
            alpha *= 0.5
        c1 *= 2.0
    raise RuntimeError(
        f"no feasible tuple found up to c1={c1:g}, alpha down to {1.0 / lipschitz * 0.5 ** max_halvings:g} "
        f"(mu={mu:g}, L={lipschitz:g}, lambda_min={lambda_min:g}, m={m})"
    )


def _apply_inverse(K, w):
    if K is None or getattr(K, "is_identity", False):
        return w
    return K.solve(w)


def lyapunov_value(z, y, K, c1, c2, c3):
    """V(z, y) = c1/2 z'K^{-1}z + c2/2 y'K^{-1}y - c3 z'K^{-1}y.

    Positive definite on (z, y) != 0 whenever c1 c2 > c3^2 and K is SPD.
    """
    if c1 <= 0 or c2 <= 0 or c3 <= 0:
        raise ValueError("c1, c2, c3 must be positive")
    if c1 * c2 <= c3 * c3:
        raise ValueError(f"need c1 c2 > c3^2 for positive definiteness "
                         f"(got {c1:g}*{c2:g} <= {c3:g}^2)")
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    Kz = _apply_inverse(K, z)
    Ky = _apply_inverse(K, y)
    return float(0.5 * c1 * (z @ Kz) + 0.5 * c2 * (y @ Ky) - c3 * (z @ Ky))


def lyapunov_v2(z, K):
    """V2(z) = 1/2 z'K^{-1}z, the candidate used when L~y vanishes."""
    z = np.asarray(z, dtype=float)
    return float(0.5 * (z @ _apply_inverse(K, z)))


@dataclass
class RateEstimate:
    """Geometric contraction fitted from a residual series.

    |r(k)| ~ C rho^(k - K) on the post-burn-in window; rho >= 1 marks a
    non-contractive series.
    """

    rho: float
    r_squared: float
    burn_in: int
    constant: float

    @property
    def contractive(self):
        return self.rho < 1.0


def estimate_rate(residuals, burn_in_frac=0.2):
    """Fit log-residual vs iteration on the window after burn-in.

    The first ``burn_in_frac`` of the series is discarded (transients); the
    window ends where residuals hit 100x machine precision relative to the
    initial residual, below which only round-off is left.
    """
    r = np.asarray(residuals, dtype=float)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("need a nonempty 1-D residual series")
    floor = RATE_FLOOR_FACTOR * np.finfo(float).eps * max(r[0], 0.0)
    burn = int(np.floor(r.size * burn_in_frac))
    window = r[burn:]
    dead = np.nonzero(window <= floor)[0]
    if dead.size:
        window = window[:dead[0]]
    if window.size < 10:
        raise ValueError("converged too fast to fit: fewer than 10 residuals above the floor")
    k = np.arange(burn, burn + window.size)
    logr = np.log(window)
    slope, intercept = np.polyfit(k, logr, 1)
    fitted = slope * k + intercept
    ss_res = float(np.sum((logr - fitted) ** 2))
    ss_tot = float(np.sum((logr - logr.mean()) ** 2))
    r_squared = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return RateEstimate(rho=float(np.exp(slope)), r_squared=r_squared,
                        burn_in=burn, constant=float(np.exp(intercept + slope * burn)))


def consensus_error(x_stacked, m, d):
    """max_i |x_i - xbar| over the agents of a stacked vector."""
    x = np.asarray(x_stacked, dtype=float)
    if x.shape != (m * d,):
        raise ValueError(f"expected stacked vector of length {m * d}")
    X = x.reshape(m, d)
    xbar = X.mean(axis=0)
    return float(np.max(np.linalg.norm(X - xbar, axis=1)))


class LyapunovMonitor:
    """Per-iteration V and V2 along a run, measured in error coordinates.

    Needs the true minimizer for z = x - X*; the integral error y is
    measured against an empirical limit of v (e.g. the final v of a
    converged reference run) and projected orthogonal to the Laplacian null
    space to remove the inherent non-uniqueness of that limit.  When L~y
    drops below the switch tolerance the V2 candidate takes over, mirroring
    the case split in the theory.
    """

    def __init__(self, x_star_stacked, v_star, lap, K, c1, c2, c3, switch_tol=1e-10):
        if c1 * c2 <= c3 * c3:
            raise ValueError("need c1 c2 > c3^2")
        self.x_star = np.asarray(x_star_stacked, dtype=float)
        self.v_star = np.asarray(v_star, dtype=float)
        self.lap = lap
        self.K = K
        self.c1, self.c2, self.c3 = c1, c2, c3
        self.switch_tol = switch_tol
        self.v_values = []
        self.v2_values = []
        self.active = []

    def _project(self, y):
        Y = y.reshape(self.lap.m, self.lap.d)
        return (Y - Y.mean(axis=0)).ravel()

    def __call__(self, state):
        z = state.x - self.x_star
        y = self._project(state.v - self.v_star)
        V = lyapunov_value(z, y, self.K, self.c1, self.c2, self.c3)
        V2 = lyapunov_v2(z, self.K)
        self.v_values.append(V)
        self.v2_values.append(V2)
        self.active.append("V" if np.linalg.norm(self.lap.apply(y)) >= self.switch_tol else "V2")
        return {"V": V, "V2": V2}

    def decrease_ratios(self, floor_rel=None):
        """Consecutive V(k+1)/V(k) ratios, optionally only while V is above a floor.

        ``floor_rel`` is relative to V(0); pass 100 x machine epsilon to
        ignore the round-off regime.
        """
        v = np.asarray(self.v_values)
        if v.size < 2:
            return np.empty(0)
        if floor_rel is not None and v[0] > 0:
            keep = v > floor_rel * v[0]
            last = np.nonzero(keep)[0]
            v = v[:last[-1] + 1] if last.size else v[:1]
        if v.size < 2:
            return np.empty(0)
        return v[1:] / v[:-1]


def gradient_check(cost, x, step=1e-5):
    """Relative error between the analytic gradient and central differences."""
    x = np.asarray(x, dtype=float)
    g = np.asarray(cost.gradient(x), dtype=float)
    fd = np.empty_like(g)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        fd[j] = (cost.value(x + e) - cost.value(x - e)) / (2.0 * step)
    denom = max(np.linalg.norm(g), np.linalg.norm(fd), 1e-8)
    return float(np.linalg.norm(fd - g) / denom)


def hessian_check(cost, x, step=1e-5):
    """Relative error between the analytic Hessian and differenced gradients."""
    x = np.asarray(x, dtype=float)
    H = np.asarray(cost.hessian(x), dtype=float)
    fd = np.empty_like(H)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        fd[:, j] = (np.asarray(cost.gradient(x + e)) - np.asarray(cost.gradient(x - e))) / (2.0 * step)
    fd = 0.5 * (fd + fd.T)
    denom = max(np.linalg.norm(H), np.linalg.norm(fd), 1e-8)
    return float(np.linalg.norm(fd - H) / denom)
