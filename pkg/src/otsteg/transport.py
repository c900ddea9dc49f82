"""Discrete optimal transport between two equal-size point clouds on the line.

The coupling problem has uniform marginals (weight 1/N per point) and
squared-difference cost, so its optimum is a permutation. Three routes are
provided: a monotone (sorted) matching that is provably optimal for convex
costs in one dimension, a general assignment solver used for cross-checking,
and an exhaustive brute-force oracle for small N. An entropically regularized
solver gives dense, slightly suboptimal plans for benchmarking.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

KIND_PERMUTATION = "exact-permutation"
KIND_DENSE = "regularized-dense"

WEIGHT_TOL = 1e-12


class SolverError(Exception):
    """Base class for transport solver failures."""


class ConvergenceError(SolverError):
    """Iterative solver did not reach the marginal tolerance."""


class UnderflowError(SolverError):
    """Regularization too small: kernel degenerates even in the log domain."""


@dataclass
class DiscreteDistribution:
    """N support points with nonnegative weights summing to one.

    In this artifact weights are always uniform 1/N; the field exists so the
    invariant is checkable.
    """

    points: np.ndarray
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).ravel()
        if self.points.size == 0:
            raise ValueError("distribution needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("support points must be finite")
        if self.weights is None:
            self.weights = np.full(self.points.size, 1.0 / self.points.size)
        else:
            self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if self.weights.shape != self.points.shape:
            raise ValueError("weights and points must have the same length")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError("weights must be nonnegative and sum to 1")

    @property
    def n(self) -> int:
        return self.points.size


@dataclass
class CostMatrix:
    """Pairwise costs entry (i,j) = (x_i - y_j)^2, plus the source supports.

    The supports are kept so the monotone fast path can sort them; a cost
    matrix built by hand (supports None) is still solvable via the
    assignment route.
    """

    entries: np.ndarray
    source: np.ndarray | None = None
    target: np.ndarray | None = None

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2 or self.entries.shape[0] != self.entries.shape[1]:
            raise ValueError(f"cost matrix must be square, got {self.entries.shape}")

    @property
    def n(self) -> int:
        return self.entries.shape[0]


@dataclass
class TransportPlan:
    """An N-point coupling with uniform marginals.

    Exact plans are permutations scaled by 1/N and carry the permutation
    images (perm[i] = j means source point i goes to target point j);
    regularized plans are dense and have perm = None.
    """

    coupling: np.ndarray
    total_cost: float
    kind: str
    perm: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.coupling.shape[0]


def cost_matrix(x: DiscreteDistribution, y: DiscreteDistribution) -> CostMatrix:
    """Squared-difference cost matrix between two equal-size supports."""
    if x.n != y.n:
        raise ValueError(f"point counts differ: {x.n} vs {y.n}")
    diff = x.points[:, None] - y.points[None, :]
    return CostMatrix(entries=diff * diff, source=x.points.copy(), target=y.points.copy())


def permutation_cost(c: CostMatrix, perm: np.ndarray) -> float:
    """Mean cost of a permutation matching, summed in source-index order.

    Both exact solvers report costs through this one function so equal
    matchings give bitwise-equal costs.
    """
    n = c.n
    return float(np.sum(c.entries[np.arange(n), perm]) / n)


def plan_from_permutation(c: CostMatrix, perm: np.ndarray) -> TransportPlan:
    n = c.n
    coupling = np.zeros((n, n))
    coupling[np.arange(n), perm] = 1.0 / n
    return TransportPlan(
        coupling=coupling,
        total_cost=permutation_cost(c, perm),
        kind=KIND_PERMUTATION,
        perm=np.asarray(perm, dtype=np.int64).copy(),
    )


def monotone_matching(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Rank pairing: the k-th smallest x goes to the k-th smallest y.

    Optimal for any convex cost of the difference on the line. Stable sorts
    make tie handling deterministic.
    """
    order_x = np.argsort(x, kind="stable")
    order_y = np.argsort(y, kind="stable")
    perm = np.empty(len(x), dtype=np.int64)
    perm[order_x] = order_y
    return perm


def solve_exact(c: CostMatrix) -> TransportPlan:
    """Minimum-cost coupling under uniform marginals, as a permutation plan.

    Uses the monotone matching when the supports are available (O(N log N)),
    otherwise falls back to the general assignment solver.
    """
    if not np.all(np.isfinite(c.entries)):
        raise SolverError("cost matrix contains non-finite entries")
    if c.source is not None and c.target is not None:
        perm = monotone_matching(c.source, c.target)
    else:
        perm = assignment_matching(c)
    return plan_from_permutation(c, perm)


def assignment_matching(c: CostMatrix) -> np.ndarray:
    """Permutation from a general assignment solver (Jonker-Volgenant class)."""
    if not np.all(np.isfinite(c.entries)):
        raise SolverError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(c.entries)
    perm = np.empty(c.n, dtype=np.int64)
    perm[rows] = cols
    return perm


def solve_assignment(c: CostMatrix) -> TransportPlan:
    """solve_exact through the assignment route only; must agree on cost."""
    return plan_from_permutation(c, assignment_matching(c))


BRUTE_FORCE_MAX_N = 8


def brute_force_plan(c: CostMatrix) -> TransportPlan:
    """Exhaustive minimum over all N! permutations, N <= 8.

    Ties are broken toward the lexicographically smallest permutation
    (itertools order, first strict minimum kept).
    """
    n = c.n
    if n > BRUTE_FORCE_MAX_N:
        raise ValueError(f"brute force capped at N={BRUTE_FORCE_MAX_N}, got {n}")
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    costs = c.entries[np.arange(n), perms].sum(axis=1)
    best = perms[int(np.argmin(costs))]
    return plan_from_permutation(c, best)


def solve_entropic(
    c: CostMatrix,
    epsilon: float,
    max_iter: int = 20000,
    tol: float = 1e-9,
) -> TransportPlan:
    """Entropically regularized coupling via log-domain iterative scaling.

    Alternates row/column normalization of the exp(-c/epsilon) kernel,
    working on the dual potentials so small epsilon survives. An epsilon
    annealing pass (halving from the cost scale down to the target) warm
    starts the potentials; max_iter bounds the iteration count at the target
    epsilon. Stops when both marginal residuals (max absolute deviation of
    row and column sums from 1/N) fall below tol.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    if not np.all(np.isfinite(c.entries)):
        raise SolverError("cost matrix contains non-finite entries")
    n = c.n
    cost = c.entries
    target = 1.0 / n
    log_marginal = -np.log(n)

    f = np.zeros(n)
    g = np.zeros(n)

    def iterate(eps: float, iters: int, stop_tol: float | None):
        nonlocal f, g
        residual = np.inf
        for _ in range(iters):
            f = -eps * logsumexp((g[None, :] - cost) / eps, axis=1) + eps * log_marginal
            g = -eps * logsumexp((f[:, None] - cost) / eps, axis=0) + eps * log_marginal
            if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
                raise UnderflowError(
                    f"potentials degenerated at epsilon={eps:g}; kernel underflow"
                )
            plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
            residual = max(
                float(np.max(np.abs(plan.sum(axis=1) - target))),
                float(np.max(np.abs(plan.sum(axis=0) - target))),
            )
            if stop_tol is not None and residual < stop_tol:
                return plan, residual
        return plan, residual

    # annealing: halve from the cost scale down toward the requested epsilon,
    # solving each level loosely so the final level starts near its optimum
    scale = float(np.median(cost))
    eps_level = max(scale, epsilon)
    level_tol = max(tol, 1e-4 / n)
    while eps_level > 2 * epsilon and eps_level > 0:
        iterate(eps_level, 500, level_tol)
        eps_level /= 2.0

    plan, residual = iterate(epsilon, max_iter, tol)
    if residual >= tol:
        raise ConvergenceError(
            f"marginal residual {residual:.3e} after {max_iter} iterations (tol {tol:g})"
        )
    total = float(np.sum(cost * plan))
    return TransportPlan(coupling=plan, total_cost=total, kind=KIND_DENSE, perm=None)


def apply_plan(
    plan: TransportPlan, x: DiscreteDistribution, y: DiscreteDistribution
) -> np.ndarray:
    """Point image of x under the plan.

    Exact plans send point i to its matched target y[perm[i]]; dense plans
    give the barycentric image N * sum_j T[i,j] * y_j.
    """
    if plan.n != x.n or plan.n != y.n:
        raise ValueError("plan and distributions disagree on point count")
    if plan.kind == KIND_PERMUTATION:
        return y.points[plan.perm]
    return plan.n * (plan.coupling @ y.points)


def invert_permutation_plan(plan: TransportPlan) -> TransportPlan:
    """Reverse map of an exact plan: coupling transposed, images inverted."""
    if plan.kind != KIND_PERMUTATION:
        raise ValueError("only exact-permutation plans can be inverted")
    inv = np.empty(plan.n, dtype=np.int64)
    inv[plan.perm] = np.arange(plan.n, dtype=np.int64)
    return TransportPlan(
        coupling=plan.coupling.T.copy(),
        total_cost=plan.total_cost,
        kind=KIND_PERMUTATION,
        perm=inv,
    )


def marginal_residual(plan: TransportPlan) -> float:
    """Max absolute deviation of row/column sums from the uniform 1/N."""
    target = 1.0 / plan.n
    return max(
        float(np.max(np.abs(plan.coupling.sum(axis=1) - target))),
        float(np.max(np.abs(plan.coupling.sum(axis=0) - target))),
    )
