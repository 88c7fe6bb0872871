"""Exact discrete optimal transport.

Two solvers live here. `assignment_pairing` matches two equal-size sample
batches by squared Euclidean cost through a shortest-augmenting-path
assignment routine (scipy's), exactly — it is the mini-batch pairing used
by the training losses. `solve_transport` is a dense transportation
simplex over the coupling variables of the weighted mode-to-mode problem;
it returns both the row-conditional plan V (rows sum to one, columns hit
the target marginal scaled by the source weights) and the scaled dual
vector z of length I+J, where source duals are premultiplied by their
weights (z_i = p_i * u_i) and target duals enter the constraints as
p_i * z_{j+I}. Degenerate marginals are handled by a deterministic
epsilon perturbation used for pivoting only; the reported plan is always
the unperturbed basic solution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "CostMatrix",
    "Pairing",
    "TransportPlan",
    "DualSolution",
    "pairwise_cost",
    "assignment_pairing",
    "solve_transport",
    "empirical_wasserstein",
    "SUPPORT_RTOL",
]

# an entry of the coupling counts as support when above this times max(p)
SUPPORT_RTOL = 1e-10

DEFAULT_PAIRING_CAP = 512


@dataclass
class CostMatrix:
    entries: np.ndarray
    metric: str = "sq_euclidean"

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2:
            raise ValueError("cost matrix must be 2-D")
        if self.metric not in ("sq_euclidean", "euclidean"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if not np.all(np.isfinite(self.entries)) or np.any(self.entries < 0):
            raise ValueError("cost entries must be finite and nonnegative")


@dataclass
class Pairing:
    """Permutation tau matching batch index s to target index tau[s]."""

    tau: np.ndarray

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=np.intp)
        n = self.tau.shape[0]
        if sorted(self.tau.tolist()) != list(range(n)):
            raise ValueError("tau is not a permutation")


@dataclass
class TransportPlan:
    """Row-conditional plan V (I x J) with its marginals and objective."""

    V: np.ndarray
    p: np.ndarray
    q: np.ndarray
    objective: float
    degenerate: bool = False

    @property
    def coupling(self) -> np.ndarray:
        return self.V * self.p[:, None]

    def support(self) -> np.ndarray:
        """Boolean support mask at the relative coupling threshold."""
        return self.coupling > SUPPORT_RTOL * self.p.max()

    def support_size(self) -> int:
        return int(self.support().sum())


@dataclass
class DualSolution:
    """Scaled duals: z[:I] pair with rows, z[I:] with columns."""

    z: np.ndarray
    objective: float


def pairwise_cost(X: np.ndarray, Y: np.ndarray, metric: str = "sq_euclidean") -> CostMatrix:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ValueError(f"point sets must be 2-D with equal feature dim, got {X.shape} / {Y.shape}")
    sx = (X * X).sum(1)
    sy = (Y * Y).sum(1)
    d2 = sx[:, None] + sy[None, :] - 2.0 * X @ Y.T
    # the inner-product form cancels catastrophically for coincident points;
    # snap anything below float noise (relative to the magnitudes) to zero
    np.maximum(d2, 0.0, out=d2)
    d2[d2 <= 1e-13 * (sx[:, None] + sy[None, :])] = 0.0
    if metric == "sq_euclidean":
        return CostMatrix(d2, metric)
    return CostMatrix(np.sqrt(d2), "euclidean")


def assignment_pairing(A: np.ndarray, B: np.ndarray, cap: int = DEFAULT_PAIRING_CAP) -> Pairing:
    """Exact min-total-squared-distance matching of two equal-size batches."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ValueError(f"batches must have identical shape, got {A.shape} vs {B.shape}")
    if A.shape[0] > cap:
        raise ValueError(
            f"batch size {A.shape[0]} exceeds the pairing cap {cap}; lower the batch size"
        )
    cost = pairwise_cost(A, B, "sq_euclidean").entries
    rows, cols = linear_sum_assignment(cost)
    tau = np.empty(A.shape[0], dtype=np.intp)
    tau[rows] = cols
    return Pairing(tau)


def pairing_cost(A: np.ndarray, B: np.ndarray, pairing: Pairing) -> float:
    d = B[pairing.tau] - A
    return float((d * d).sum())


# -- transportation simplex ---------------------------------------------------


class _Basis:
    """Spanning tree over rows 0..I-1 and columns I..I+J-1 of the bipartite graph."""

    def __init__(self, I, J):
        self.I, self.J = I, J
        self.cells = set()
        self.adj = [set() for _ in range(I + J)]

    def add(self, i, j):
        self.cells.add((i, j))
        self.adj[i].add(self.I + j)
        self.adj[self.I + j].add(i)

    def remove(self, i, j):
        self.cells.remove((i, j))
        self.adj[i].discard(self.I + j)
        self.adj[self.I + j].discard(i)

    def tree_path(self, start, goal):
        """Node path start -> goal through basis edges (unique in a tree)."""
        prev = {start: None}
        stack = [start]
        while stack:
            node = stack.pop()
            if node == goal:
                break
            for nxt in self.adj[node]:
                if nxt not in prev:
                    prev[nxt] = node
                    stack.append(nxt)
        path = [goal]
        while prev[path[-1]] is not None:
            path.append(prev[path[-1]])
        path.reverse()
        return path


def _northwest_corner(a, b, basis: _Basis):
    I, J = len(a), len(b)
    flow = np.zeros((I, J))
    ra, rb = a.copy(), b.copy()
    i = j = 0
    while i < I and j < J:
        f = min(ra[i], rb[j])
        flow[i, j] = f
        basis.add(i, j)
        ra[i] -= f
        rb[j] -= f
        if i == I - 1 and j == J - 1:
            break
        if ra[i] <= rb[j] and i < I - 1:
            i += 1
        else:
            j += 1
    return flow


def _tree_duals(cost, basis: _Basis):
    I, J = basis.I, basis.J
    u = np.full(I, np.nan)
    w = np.full(J, np.nan)
    u[0] = 0.0
    stack = [0]
    seen = {0}
    while stack:
        node = stack.pop()
        for nxt in basis.adj[node]:
            if nxt in seen:
                continue
            seen.add(nxt)
            if node < I:  # row -> col
                w[nxt - I] = cost[node, nxt - I] - u[node]
            else:         # col -> row
                u[nxt] = cost[nxt, node - I] - w[node - I]
            stack.append(nxt)
    return u, w


def _tree_flows(a, b, basis: _Basis):
    """Exact flows on the basis tree by leaf elimination."""
    I, J = basis.I, basis.J
    flow = np.zeros((I, J))
    residual = np.concatenate([a, b]).astype(np.float64)
    degree = np.array([len(s) for s in basis.adj])
    adj = [set(s) for s in basis.adj]
    leaves = [n for n in range(I + J) if degree[n] == 1]
    while leaves:
        node = leaves.pop()
        if not adj[node]:
            continue
        other = next(iter(adj[node]))
        i, j = (node, other - I) if node < I else (other, node - I)
        flow[i, j] = residual[node]
        residual[other] -= residual[node]
        residual[node] = 0.0
        adj[node].discard(other)
        adj[other].discard(node)
        degree[node] -= 1
        degree[other] -= 1
        if degree[other] == 1:
            leaves.append(other)
    np.maximum(flow, 0.0, out=flow)
    return flow


def solve_transport(cost, p, q, max_pivots: int = 100000):
    """Exact solve of the weighted mode-transport problem.

    cost may be a CostMatrix or a plain (I,J) array of squared distances.
    p and q must sit on their simplices (1e-9 tolerance) with strictly
    positive entries. Returns (TransportPlan, DualSolution); the plan is
    flagged degenerate when its support has fewer than I+J-1 entries.
    """
    C = cost.entries if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    I, J = C.shape
    if p.shape != (I,) or q.shape != (J,):
        raise ValueError("marginal lengths do not match the cost matrix")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("marginals must each sum to 1 within 1e-9")
    if abs(p.sum() - q.sum()) > 1e-9:
        raise ValueError("infeasible marginals: total masses differ")
    if np.any(p <= 0) or np.any(q <= 0):
        raise ValueError("marginal entries must be strictly positive")

    # pivoting runs on perturbed marginals so degenerate ties cannot stall it
    eps = 1e-9 * min(p.min(), q.min()) / (I + J)
    a = p + eps
    b = q.copy()
    b[-1] += I * eps

    basis = _Basis(I, J)
    flow = _northwest_corner(a, b, basis)

    tol = 1e-10 * max(1.0, float(np.abs(C).max()))
    bland_after = 10 * (I + J) ** 2
    for pivot in range(max_pivots):
        u, w = _tree_duals(C, basis)
        red = C - u[:, None] - w[None, :]
        for (ci, cj) in basis.cells:
            red[ci, cj] = 0.0
        if pivot < bland_after:
            enter = np.unravel_index(np.argmin(red), red.shape)
            if red[enter] >= -tol:
                break
        else:  # Bland: first negative in flat order, guarantees termination
            neg = np.argwhere(red < -tol)
            if neg.size == 0:
                break
            enter = tuple(neg[0])
        ei, ej = int(enter[0]), int(enter[1])

        path = basis.tree_path(I + ej, ei)  # col node of entering -> row node
        cycle = [(ei, ej)]
        for k in range(len(path) - 1):
            x, y = path[k], path[k + 1]
            cycle.append((y, x - I) if x >= I else (x, y - I))
        minus = cycle[1::2]
        theta_idx = min(range(len(minus)), key=lambda k: (flow[minus[k]], minus[k]))
        theta = flow[minus[theta_idx]]
        for k, cell in enumerate(cycle):
            flow[cell] += theta if k % 2 == 0 else -theta
        leave = minus[theta_idx]
        flow[leave] = 0.0
        basis.remove(*leave)
        basis.add(ei, ej)
    else:
        raise RuntimeError("transportation simplex failed to terminate")

    # final basis is optimal independently of the marginal perturbation:
    # re-solve the tree against the exact marginals for the reported plan
    pi = _tree_flows(p, q, basis)
    u, w = _tree_duals(C, basis)
    objective = float((C * pi).sum())

    V = pi / p[:, None]
    plan = TransportPlan(V=V, p=p, q=q, objective=objective)
    plan.degenerate = plan.support_size() < I + J - 1

    z = np.concatenate([p * u, w])
    dual = DualSolution(z=z, objective=float((p * u).sum() + (q * w).sum()))
    return plan, dual


def empirical_wasserstein(X: np.ndarray, Y: np.ndarray, order: int = 2) -> float:
    """W1 or W2 between uniformly weighted point clouds, exactly."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.size == 0 or Y.size == 0:
        raise ValueError("point sets must be nonempty")
    if X.ndim != 2 or Y.ndim != 2:
        raise ValueError("point sets must be 2-D arrays")
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    metric = "euclidean" if order == 1 else "sq_euclidean"
    cost = pairwise_cost(X, Y, metric).entries
    n, m = cost.shape
    if n == m:
        rows, cols = linear_sum_assignment(cost)
        value = float(cost[rows, cols].mean())
    else:
        plan, _ = solve_transport(cost, np.full(n, 1.0 / n), np.full(m, 1.0 / m))
        value = plan.objective
    return value if order == 1 else float(np.sqrt(max(value, 0.0)))
