"""Water-filling characterization of anti-regularized linear ensembles.

For a linear model with per-feature second moments s2_k, reference weights
theta_star (squared: theta_star_sq) and an expected-loss budget b, the
variance allocation that maximizes sum_k log(sigma2_k + theta_star_sq_k)
subject to sum_k s2_k * sigma2_k = b, sigma2 >= 0, is

    sigma2_k = max(C * b / s2_k - theta_star_sq_k, 0)

with the water level C fixed by the budget constraint (equivalently the
KKT multiplier alpha = 1 / (C * b)). waterfill_solve computes this closed
form; waterfill_oracle maximizes the same objective by projected gradient
ascent without using it, so the two can cross-check each other.

The expected loss of the perturbed model is exactly the spent budget, and
the prediction variance at input x is sum_k x_k^2 * sigma2_k.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .errors import ConfigurationError, ConvergenceError, InsufficientSampleError
from .validation import as_float_vector

BUDGET_TOL = 1e-12


@dataclass
class WaterFillProblem:
    """Inputs of the allocation problem; all arrays length p."""

    s2: np.ndarray
    theta_star_sq: np.ndarray
    budget: float

    def __post_init__(self):
        self.s2 = as_float_vector(self.s2, "s2")
        self.theta_star_sq = as_float_vector(self.theta_star_sq, "theta_star_sq")
        if self.s2.shape != self.theta_star_sq.shape:
            raise ConfigurationError("s2 and theta_star_sq lengths differ")
        if not (self.s2 > 0).all():
            raise ConfigurationError("s2 entries must be strictly positive")
        if (self.theta_star_sq < 0).any():
            raise ConfigurationError("theta_star_sq entries must be >= 0")
        self.budget = float(self.budget)
        if not np.isfinite(self.budget) or self.budget <= 0:
            raise ConfigurationError("budget must be finite and > 0")

    @property
    def p(self) -> int:
        return self.s2.shape[0]


@dataclass
class WaterFillSolution:
    sigma2: np.ndarray
    water_level: float        # C in sigma2_k = max(C*b/s2_k - theta*_k^2, 0)
    alpha: float              # KKT multiplier, alpha = 1/(C*b)
    active: np.ndarray        # indices with sigma2 > 0
    budget_residual: float    # sum(s2*sigma2) - b at the returned solution
    spent: float = 0.0        # sum(s2*sigma2); the expected loss of the perturbation

    @property
    def expected_loss(self) -> float:
        """Expected loss increase of the perturbed model: the spent budget."""
        return float(self.spent)


def _spent(problem, c):
    return np.maximum(c * problem.budget - problem.s2 * problem.theta_star_sq, 0.0).sum()


def waterfill_solve(problem: WaterFillProblem) -> WaterFillSolution:
    """Closed-form allocation via bisection on the water level C.

    sum_k s2_k * max(C*b/s2_k - t_k, 0) = sum_k max(C*b - s2_k*t_k, 0) is
    nondecreasing and piecewise linear in C, so bisection brackets the root;
    the exact level is then recovered on the identified active set, which
    pins the budget residual to machine precision.
    """
    b = problem.budget
    w = problem.s2 * problem.theta_star_sq  # per-feature fill cost
    lo = 0.0
    hi = 1.0 + w.sum() / b  # spent(hi) >= b by construction
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _spent(problem, mid) < b:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    c = 0.5 * (lo + hi)

    # exact level on the active set found by bisection
    active = c * b - w > 0
    if not active.any():
        active = w <= w.min()  # degenerate bracket; fill the cheapest entry
    c = (b + w[active].sum()) / (b * active.sum())
    # one re-derivation in case the polish moved a boundary component
    active2 = c * b - w > 0
    if active2.any() and (active2 != active).any():
        active = active2
        c = (b + w[active].sum()) / (b * active.sum())

    sigma2 = np.maximum(c * b / problem.s2 - problem.theta_star_sq, 0.0)
    residual = float((problem.s2 * sigma2).sum() - b)
    if abs(residual) > max(BUDGET_TOL, 1e-12 * b):
        raise ConvergenceError(
            f"budget residual {residual:.3e} above tolerance", residuals=residual
        )
    return WaterFillSolution(
        sigma2=sigma2,
        water_level=float(c),
        alpha=float(1.0 / (c * b)),
        active=np.flatnonzero(sigma2 > 0),
        budget_residual=residual,
        spent=residual + b,
    )


def kkt_residuals(problem: WaterFillProblem, solution: WaterFillSolution) -> dict:
    """Stationarity/complementary-slackness diagnostics of a solution.

    For the optimum: sigma2_k * (alpha*s2_k - 1/(theta*_k^2 + sigma2_k)) = 0
    and alpha*s2_k >= 1/(theta*_k^2 + sigma2_k) wherever sigma2_k = 0.
    """
    a = solution.alpha
    denom = problem.theta_star_sq + solution.sigma2
    grad = 1.0 / denom
    comp = solution.sigma2 * (a * problem.s2 - grad)
    dual = np.where(solution.sigma2 > 0, 0.0, np.maximum(grad - a * problem.s2, 0.0))
    return {
        "budget": float((problem.s2 * solution.sigma2).sum() - problem.budget),
        "complementary_slackness": comp,
        "dual_feasibility": dual,
        "max_abs_comp": float(np.abs(comp).max()),
        "max_dual_violation": float(dual.max()),
    }


def objective_value(problem: WaterFillProblem, sigma2: np.ndarray) -> float:
    with np.errstate(divide="ignore"):
        return float(np.log(sigma2 + problem.theta_star_sq).sum())


def _project_weighted_simplex(v: np.ndarray, w: np.ndarray, b: float) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum w*x = b} for strictly positive w.

    Solution has the form x = max(v - mu*w, 0); the breakpoint scan finds the
    segment of the piecewise-linear constraint where the level mu lands.
    """
    ratio = v / w
    order = np.argsort(ratio)[::-1]
    cum_wv = np.cumsum((w * v)[order])
    cum_ww = np.cumsum((w * w)[order])
    r_sorted = ratio[order]
    # with the k+1 largest ratios active the level is (cum_wv - b)/cum_ww;
    # the valid prefix is the largest k whose own component stays active,
    # i.e. r_k > mu_k (always true at k = 0 because b > 0)
    mu = (cum_wv - b) / cum_ww
    k = int(np.nonzero(r_sorted * cum_ww > cum_wv - b)[0][-1])
    return np.maximum(v - mu[k] * w, 0.0)


def waterfill_oracle(problem: WaterFillProblem, max_iters: int = 100_000,
                     step: float = 1e-3, tol: float = 1e-13) -> np.ndarray:
    """Maximize the allocation objective independently of the closed form.

    Phase one is spectral projected gradient ascent: probe
    project(x + eta*grad) with Barzilai-Borwein steps, then take the exact
    line-search point on the feasible segment (the objective's -inf at zero
    acts as a barrier wherever theta*^2 = 0). Phase two polishes by exact
    two-coordinate ascent: moving delta along e_i - (w_i/w_j) e_j keeps the
    budget, and the 1-D restriction log(z_i+delta) + log(z_j-(w_i/w_j)delta)
    peaks at delta* = (w_j z_j - w_i z_i) / (2 w_i), so every pair update is
    closed-form and the converged point satisfies the pairwise optimality
    conditions to machine precision. Raises if the final sweep still moves.
    """
    theta = problem.theta_star_sq
    w = problem.s2
    b = problem.budget
    x = b / (problem.p * w)  # uniform spend: each feature takes b/p of the budget

    def fixed_point_residual(point):
        g = 1.0 / (point + theta)
        ref = _project_weighted_simplex(point + step * g, w, b)
        return float(np.abs(ref - point).max())

    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        z = x + theta
        g = 1.0 / z
        eta = float(np.clip(z.min() ** 2, 1e-12, 1e6))
        for it in range(min(max_iters, 2000)):
            d = _project_weighted_simplex(x + eta * g, w, b) - x
            if np.abs(d).max() < 1e-16:
                break
            # exact line search on the feasible segment [x, x+d]: the slope
            # sum d/(z + t d) is decreasing in t, so bisect its sign change
            if float(np.sum(d / (z + d))) >= 0.0:
                t = 1.0
            else:
                lo, hi = 0.0, 1.0
                for _ in range(45):
                    mid = 0.5 * (lo + hi)
                    if float(np.sum(d / (z + mid * d))) > 0.0:
                        lo = mid
                    else:
                        hi = mid
                t = 0.5 * (lo + hi)
            x_new = np.maximum(x + t * d, 0.0)
            z_new = x_new + theta
            g_new = 1.0 / z_new
            s = x_new - x
            curve = -float(s @ (g_new - g))  # positive while f is strictly concave
            if curve > 0.0:
                eta = float(np.clip((s @ s) / curve, 1e-10, 1e6))
            else:
                eta = min(eta * 4.0, 1e6)
            x, z, g = x_new, z_new, g_new
            if it % 10 == 9 and fixed_point_residual(x) <= 1e-9 * max(1.0, float(x.max())):
                break

    # pairwise polish
    p = x.size
    scale = max(1.0, float(np.abs(x).max()))
    worst = 0.0
    if p > 1:
        for _ in range(max_iters):
            worst = 0.0
            for i in range(p):
                for j in range(i + 1, p):
                    zi = x[i] + theta[i]
                    zj = x[j] + theta[j]
                    delta = (w[j] * zj - w[i] * zi) / (2.0 * w[i])
                    delta = min(max(delta, -x[i]), x[j] * w[j] / w[i])
                    if delta != 0.0:
                        x[i] += delta
                        x[j] -= delta * w[i] / w[j]
                        worst = max(worst, abs(delta), abs(delta) * w[i] / w[j])
            scale = max(1.0, float(np.abs(x).max()))
            if worst <= 1e-14 * scale:
                break
        if worst > 1e-9 * scale:
            raise ConvergenceError(
                f"pairwise ascent still moving by {worst:.3e} after the sweep budget",
                residuals=worst,
            )
    return x


def corollary_variance(x: np.ndarray, solution: WaterFillSolution) -> float:
    """Prediction variance sum_k x_k^2 * sigma2_k of the perturbed linear model."""
    x = as_float_vector(x, "x")
    if x.shape != solution.sigma2.shape:
        raise ConfigurationError("x length does not match solution")
    return float((x * x * solution.sigma2).sum())


def log_identity_degeneracy_demo(problem: WaterFillProblem) -> np.ndarray:
    """Allocation when the objective is sum(sigma2) instead of sum(log(...)).

    The linear objective puts the whole budget on the single cheapest feature
    (smallest s2), which is why the log is essential for spreading variance.
    Ties on min s2 are broken by lowest index and flagged with a warning.
    """
    s2 = problem.s2
    k = int(np.argmin(s2))
    if (s2 == s2[k]).sum() > 1:
        warnings.warn(
            "multiple features tie for min s2; budget assigned to the lowest index",
            RuntimeWarning,
            stacklevel=2,
        )
    sigma2 = np.zeros_like(s2)
    sigma2[k] = problem.budget / s2[k]
    return sigma2


@dataclass
class WeightVarianceReport:
    """Across-member weight spread of a trained linear ensemble vs theory."""

    weight_variance: np.ndarray   # per feature, population variance over members
    s2: np.ndarray                # empirical second moments of the features
    inv_s2: np.ndarray
    spearman_rho: float
    n_members: int


def empirical_weight_variance_vs_theory(members, X) -> WeightVarianceReport:
    """Correlate across-member weight variance with 1/s2 on a linear ensemble.

    members: anything with .members (an ensemble) or a list of single-layer
    linear networks. The theory says low-second-moment features absorb the
    variance budget, so the rank correlation should be strongly positive.
    """
    nets = getattr(members, "members", members)
    if len(nets) < 5:
        raise InsufficientSampleError(
            f"need at least 5 members for a variance estimate, got {len(nets)}"
        )
    X = np.asarray(X, dtype=np.float64)
    ws = []
    for net in nets:
        if len(net.layer_dims) != 2 or net.layer_dims[1] != 1:
            raise ConfigurationError(
                "weight-variance analysis needs single-output linear members"
            )
        ws.append(net.weights[0][:, 0])
    W = np.stack(ws)                       # (M, p)
    wvar = W.var(axis=0)                   # population variance across members
    s2 = (X * X).mean(axis=0)
    with np.errstate(divide="ignore"):
        inv = np.where(s2 > 0, 1.0 / s2, np.inf)
    rho = float(spearmanr(wvar, inv).statistic)
    return WeightVarianceReport(
        weight_variance=wvar, s2=s2, inv_s2=inv, spearman_rho=rho, n_members=len(nets)
    )
