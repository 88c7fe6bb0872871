"""Mixture-level transport theory toolkit.

Everything here works on weighted mode sets: the mixture Wasserstein
distance (discrete OT between mode locations), its scaled dual, the
subset-sum genericity test, support recovery from partial duals,
projection of a J-mode mixture onto I modes by weighted Lloyd iterations,
the barycenter / weight-optimality conditions, degrees-of-freedom and
plan-reconstruction analyses over a support pattern, the single-source
ill-posedness demonstration, and the end-to-end train/test pipeline that
predicts target mixture weights through the recovered transport plan.

A note on dual completion: the scaled dual constraints bound every tail
variable from above for each source index, so the feasible completion is
the minimum over sources of [cost - z_i / p_i]; tight cells mark the plan
support. The round-trip property (recovered pattern == solver support) is
the arbiter for this choice.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import MlpVars, OptState, Var, init_mlp, mlp_forward, opt_step, value_and_grads
from .ot import TransportPlan, pairwise_cost, solve_transport

__all__ = [
    "GmmMeasure",
    "SupportPattern",
    "ConstraintSystem",
    "mixture_wasserstein",
    "check_subset_sum",
    "support_from_dual",
    "interior_dual",
    "project_to_I_modes",
    "verify_barycenter",
    "verify_weight_optimality",
    "dof_analysis",
    "reconstruct_plan",
    "ReconstructionResult",
    "demonstrate_i1_illposed",
    "I1Report",
    "reduced_dual_spread",
    "theory_pipeline",
    "PipelineConfig",
    "random_measure",
    "fixed_weight_projection",
    "symmetric_instance",
]

SUBSET_SUM_CAP = 20


@dataclass
class GmmMeasure:
    """Mode locations plus simplex weights; shared variance is irrelevant here."""

    modes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.modes = np.asarray(self.modes, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.modes.ndim != 2:
            raise ValueError("modes must be a K x D matrix")
        if self.weights.shape != (self.modes.shape[0],):
            raise ValueError("weights length must match mode count")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be a simplex vector within 1e-9")

    @property
    def n_modes(self) -> int:
        return self.modes.shape[0]

    @property
    def dim(self) -> int:
        return self.modes.shape[1]


@dataclass
class SupportPattern:
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ValueError("support mask must be 2-D")
        if not self.mask.any(axis=1).all():
            raise ValueError("every row needs at least one support cell")
        if not self.mask.any(axis=0).all():
            raise ValueError("every column needs at least one support cell")

    def size(self) -> int:
        return int(self.mask.sum())


def random_measure(k: int, dim: int, rng: np.random.Generator, spread: float = 1.0) -> GmmMeasure:
    return GmmMeasure(rng.standard_normal((k, dim)) * spread, rng.dirichlet(np.ones(k)))


def mixture_wasserstein(a: GmmMeasure, b: GmmMeasure):
    """Squared mixture-Wasserstein distance with plan and scaled duals."""
    cost = pairwise_cost(a.modes, b.modes, "sq_euclidean")
    plan, dual = solve_transport(cost, a.weights, b.weights)
    return plan.objective, plan, dual


def _subset_sums(w: np.ndarray) -> np.ndarray:
    """Sums of all proper nonempty subsets, indexed by bitmask 1..2^n-2."""
    n = len(w)
    sums = np.zeros(2**n)
    for mask in range(1, 2**n):
        low = mask & (-mask)
        sums[mask] = sums[mask ^ low] + w[low.bit_length() - 1]
    return sums[1 : 2**n - 1]


def check_subset_sum(p: np.ndarray, q: np.ndarray, tolerance: float = 1e-9):
    """True when no proper nonempty subset sums of p and q coincide.

    Exhaustive over 2^I + 2^J subset sums (capped at 20 elements a side);
    returns (ok, witness) where witness names the first colliding pair of
    subsets by index tuple, or None.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if len(p) > SUBSET_SUM_CAP or len(q) > SUBSET_SUM_CAP:
        raise ValueError(f"subset-sum check capped at {SUBSET_SUM_CAP} elements per side")
    if len(p) < 2 and len(q) < 2:
        return True, None  # no proper nonempty subsets exist on either side
    ps = _subset_sums(p)
    qs = _subset_sums(q)
    if len(ps) == 0 or len(qs) == 0:
        return True, None
    order = np.argsort(qs)
    qs_sorted = qs[order]
    pos = np.searchsorted(qs_sorted, ps)
    for k, sum_p in enumerate(ps):
        for cand in (pos[k] - 1, pos[k]):
            if 0 <= cand < len(qs_sorted) and abs(sum_p - qs_sorted[cand]) <= tolerance:
                p_mask = k + 1
                q_mask = int(order[cand]) + 1
                witness = (
                    tuple(i for i in range(len(p)) if p_mask >> i & 1),
                    tuple(j for j in range(len(q)) if q_mask >> j & 1),
                )
                return False, witness
    return True, None


def support_from_dual(
    theta: np.ndarray,
    gamma: np.ndarray,
    p: np.ndarray,
    z_head: np.ndarray,
    tolerance: float = 1e-7,
):
    """Complete the dual tail from its head and read off the tight pattern.

    z_tail[j] = min_i [ |theta_i - gamma_j|^2 - z_head_i / p_i ]; a cell is
    tight (in support) when it attains that minimum within tolerance.
    Returns (SupportPattern, z_tail, consistent) where consistent is False
    when some row ends up with no tight cell (an impossible configuration
    for a genuine dual head).
    """
    theta = np.asarray(theta, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    z_head = np.asarray(z_head, dtype=np.float64)
    if np.any(p <= 0):
        raise ValueError("source weights must be strictly positive")
    cost = pairwise_cost(theta, gamma, "sq_euclidean").entries
    slack_basis = cost - (z_head / p)[:, None]
    z_tail = slack_basis.min(axis=0)
    mask = slack_basis - z_tail[None, :] <= tolerance
    consistent = bool(mask.any(axis=1).all())
    return SupportPattern(mask) if consistent else _loose_pattern(mask), z_tail, consistent


def _loose_pattern(mask: np.ndarray) -> SupportPattern:
    """Pattern for an inconsistent head: pad empty rows so the type validates."""
    fixed = mask.copy()
    for i in np.flatnonzero(~mask.any(axis=1)):
        fixed[i, 0] = True
    return SupportPattern(fixed)


def interior_dual(cost: np.ndarray, plan: TransportPlan) -> np.ndarray:
    """Scaled dual z whose tight cells are exactly the plan support.

    On nondegenerate instances the optimal dual is unique up to the anchor
    and this equals the solver's. On degenerate instances (e.g. exact
    projections) the optimal duals form a face: potentials are pinned only
    within connected components of the support, and a basis dual makes
    spurious zero-flow cells tight. Here the free per-component shifts are
    chosen to maximize the minimum slack over non-support cells, so
    tightness marks support alone (strict complementarity).
    """
    from scipy.optimize import linprog

    C = np.asarray(cost.entries if hasattr(cost, "entries") else cost, dtype=np.float64)
    I, J = C.shape
    mask = plan.support()
    # connected components over support edges + per-component base potentials
    comp = np.full(I + J, -1)
    u = np.zeros(I)
    w = np.zeros(J)
    n_comp = 0
    for start in range(I):
        if comp[start] >= 0:
            continue
        comp[start] = n_comp
        u[start] = 0.0
        stack = [start]
        while stack:
            node = stack.pop()
            if node < I:
                for j in np.flatnonzero(mask[node]):
                    if comp[I + j] < 0:
                        comp[I + j] = n_comp
                        w[j] = C[node, j] - u[node]
                        stack.append(I + j)
            else:
                j = node - I
                for i in np.flatnonzero(mask[:, j]):
                    if comp[i] < 0:
                        comp[i] = n_comp
                        u[i] = C[i, j] - w[j]
                        stack.append(i)
        n_comp += 1
    if n_comp > 1:
        # shift component potentials to maximize the smallest off-support slack
        slack0 = C - u[:, None] - w[None, :]
        rows_a = []
        for i in range(I):
            for j in range(J):
                if mask[i, j]:
                    continue
                a, b = comp[i], comp[I + j]
                row = np.zeros(n_comp + 1)
                row[a] += 1.0
                row[b] -= 1.0
                row[-1] = 1.0  # slack0 - delta_a + delta_b >= m
                rows_a.append((row, slack0[i, j]))
        A_ub = np.array([r for r, _ in rows_a])
        b_ub = np.array([s for _, s in rows_a])
        c_vec = np.zeros(n_comp + 1)
        c_vec[-1] = -1.0  # maximize m
        bounds = [(0, 0)] + [(None, None)] * (n_comp - 1) + [(None, None)]
        res = linprog(c_vec, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
        if res.success:
            delta = res.x[:n_comp]
            shift_row = delta[comp[:I]]
            shift_col = delta[comp[I:]]
            u = u + shift_row
            w = w - shift_col
    return np.concatenate([plan.p * u, w])


# -- projection ------------------------------------------------------------------


def _kmeanspp_init(gamma, q, I, rng, weighted=True):
    centers = [gamma[rng.choice(len(gamma), p=q)]]
    for _ in range(I - 1):
        d2 = np.min(
            ((gamma[:, None, :] - np.asarray(centers)[None, :, :]) ** 2).sum(-1), axis=1
        )
        probs = q * d2 if weighted else d2
        total = probs.sum()
        if total <= 0:
            centers.append(gamma[rng.choice(len(gamma), p=q)])
        else:
            centers.append(gamma[rng.choice(len(gamma), p=probs / total)])
    return np.asarray(centers)


def _lloyd(gamma, q, theta0, max_iter=200):
    """Weighted Lloyd iterations; objective is non-increasing by construction."""
    theta = theta0.copy()
    I = len(theta)
    prev_obj = np.inf
    assign = None
    for _ in range(max_iter):
        d2 = ((gamma[:, None, :] - theta[None, :, :]) ** 2).sum(-1)
        new_assign = d2.argmin(axis=1)
        obj = float((q * d2[np.arange(len(gamma)), new_assign]).sum())
        if obj > prev_obj + 1e-12:
            raise AssertionError("projection objective increased across an iteration")
        stable = assign is not None and np.array_equal(new_assign, assign)
        assign = new_assign
        prev_obj = obj
        if stable:
            break
        for i in range(I):
            members = assign == i
            mass = q[members].sum()
            if mass <= 0:
                # reseed an empty cluster at the point farthest from its center
                worst = int(np.argmax(q * d2[np.arange(len(gamma)), assign]))
                theta[i] = gamma[worst]
                assign[worst] = i
            else:
                theta[i] = (q[members, None] * gamma[members]).sum(0) / mass
    p = np.array([q[assign == i].sum() for i in range(I)])
    return theta, p, assign, prev_obj


def _objective(gamma, q, theta):
    d2 = ((gamma[:, None, :] - theta[None, :, :]) ** 2).sum(-1)
    return float((q * d2.min(axis=1)).sum())


def _move_polish(gamma, q, theta, assign, obj, max_passes=20):
    """Single-point move search: escapes Lloyd fixed points that data-point
    seeding cannot leave (a point can belong to a center no seed was near)."""
    I = len(theta)
    for _ in range(max_passes):
        improved = False
        for j in range(len(gamma)):
            src = assign[j]
            if (assign == src).sum() == 1 and q[j] > 0:
                continue  # keep clusters nonempty
            for dst in range(I):
                if dst == src:
                    continue
                trial = assign.copy()
                trial[j] = dst
                centers = theta.copy()
                for i in (src, dst):
                    members = trial == i
                    mass = q[members].sum()
                    if mass > 0:
                        centers[i] = (q[members, None] * gamma[members]).sum(0) / mass
                t2, p2, a2, o2 = _lloyd(gamma, q, centers)
                if o2 < obj - 1e-12:
                    theta, assign, obj = t2, a2, o2
                    improved = True
                    break
            if improved:
                break
        if not improved:
            break
    p = np.array([q[assign == i].sum() for i in range(I)])
    return theta, p, assign, obj


def project_to_I_modes(target: GmmMeasure, I: int, restarts: int = 8, rng=None):
    """Closest I-mode mixture to the target in mixture-Wasserstein distance.

    For fixed mode locations the optimal joint choice of weights and plan
    assigns each target mode wholly to its nearest location, so the
    alternating scheme is exactly weighted Lloyd iteration with barycenter
    updates and absorbed-mass weight updates. Best of `restarts` seeded
    initializations; returns (GmmMeasure, TransportPlan, mw2).
    """
    if not 1 <= I <= target.n_modes:
        raise ValueError(f"need 1 <= I <= {target.n_modes}, got {I}")
    rng = rng or np.random.default_rng(0)
    gamma, q = target.modes, target.weights
    best = None
    for r in range(max(1, restarts)):
        # portfolio of seedings: mass-weighted and unweighted farthest-point
        # sampling (tiny-mass outliers still get their own mode), plus
        # uniform subsets for coverage
        if r % 3 == 2 and len(gamma) >= I:
            theta0 = gamma[rng.choice(len(gamma), size=I, replace=False)]
        else:
            theta0 = _kmeanspp_init(gamma, q, I, rng, weighted=(r % 3 == 0))
        theta, p, assign, obj = _lloyd(gamma, q, theta0)
        if best is None or obj < best[3] - 1e-15:
            best = (theta, p, assign, obj)
    theta, p, assign, obj = _move_polish(gamma, q, best[0], best[2], best[3])
    keep = p > 0
    theta, p = theta[keep], p[keep]
    index = np.cumsum(keep) - 1
    V = np.zeros((len(theta), target.n_modes))
    V[index[assign], np.arange(target.n_modes)] = q / p[index[assign]]
    plan = TransportPlan(V=V, p=p, q=q, objective=obj)
    plan.degenerate = plan.support_size() < len(theta) + target.n_modes - 1
    return GmmMeasure(theta, p), plan, obj


def fixed_weight_projection(target: GmmMeasure, p: np.ndarray, rng=None, max_iter: int = 200):
    """Best mode locations for prescribed source weights.

    Alternates the exact plan (solve_transport at the current locations)
    with barycenter updates until the locations stop moving. The result
    satisfies the barycenter condition exactly while keeping the source
    weights generic, so the optimal plan keeps the full I+J-1 support
    whenever the subset-sum condition holds. Returns (theta, plan, dual).
    """
    rng = rng or np.random.default_rng(0)
    gamma, q = target.modes, target.weights
    p = np.asarray(p, dtype=np.float64)
    I = len(p)
    theta = gamma[rng.choice(len(gamma), size=I, replace=len(gamma) < I)]
    theta = theta + 1e-3 * rng.standard_normal(theta.shape)
    plan = dual = None
    prev = np.inf
    for _ in range(max_iter):
        cost = pairwise_cost(theta, gamma, "sq_euclidean")
        plan, dual = solve_transport(cost, p, q)
        if plan.objective > prev + 1e-12:
            raise AssertionError("fixed-weight projection objective increased")
        new_theta = plan.V @ gamma
        if np.abs(new_theta - theta).max() < 1e-13:
            break
        prev = plan.objective
        theta = new_theta
    return theta, plan, dual


def symmetric_instance(I: int, cluster_size: int, dim: int, rng, separation: float = 12.0):
    """Target measure made of I congruent, equally weighted clusters.

    Every cluster is the same isometric template with the same mass
    vector, so the exact I-mode projection satisfies the mode-probability
    optimality condition (equal per-mode normalized transport cost) on
    top of the barycenter condition. Cluster centers keep a minimum
    mutual distance of `separation` so the optimal clustering is the
    group partition itself.
    """
    template = rng.standard_normal((cluster_size, dim))
    masses = rng.dirichlet(np.ones(cluster_size))
    centers = []
    while len(centers) < I:
        cand = rng.standard_normal(dim) * 2.0 * separation
        if all(np.linalg.norm(cand - c) >= separation for c in centers):
            centers.append(cand)
    modes, weights = [], []
    for shift in centers:
        raw = rng.standard_normal((dim, dim))
        rot, _ = np.linalg.qr(raw)
        modes.append(template @ rot.T + shift)
        weights.append(masses / I)
    return GmmMeasure(np.vstack(modes), np.concatenate(weights))


def verify_barycenter(theta: np.ndarray, gamma: np.ndarray, plan: TransportPlan, tolerance: float = 1e-7):
    """Per-row residual |theta_i - sum_j V_ij gamma_j|; (residuals, all_pass)."""
    theta = np.asarray(theta, dtype=np.float64)
    residuals = np.linalg.norm(theta - plan.V @ np.asarray(gamma, dtype=np.float64), axis=1)
    return residuals, bool(np.all(residuals <= tolerance))


def verify_weight_optimality(theta: np.ndarray, gamma: np.ndarray, plan: TransportPlan, tolerance: float = 1e-6):
    """Row transport costs sum_j V_ij |theta_i - gamma_j|^2 and their spread."""
    cost = pairwise_cost(np.asarray(theta), np.asarray(gamma), "sq_euclidean").entries
    r = (plan.V * cost).sum(axis=1)
    spread = float(r.max() - r.min())
    return r, spread, spread <= tolerance


# -- linear identification over a support pattern ---------------------------------


@dataclass
class ConstraintSystem:
    matrix: np.ndarray
    rhs: np.ndarray
    provenance: list
    variables: list  # (i, j) cells, then optionally "const"
    rank: int
    dof: int
    paper_dof: int  # J - I*D
    rank_tolerance: float


_CONSTRAINT_KINDS = ("row_sum", "barycenter", "optimality")


def _assemble(support: SupportPattern, gamma, theta, constraint_set):
    mask = support.mask
    I, J = mask.shape
    gamma = np.asarray(gamma, dtype=np.float64)
    D = gamma.shape[1]
    cells = [(i, j) for i in range(I) for j in range(J) if mask[i, j]]
    col_of = {c: k for k, c in enumerate(cells)}
    use_const = "optimality" in constraint_set
    nvar = len(cells) + (1 if use_const else 0)
    rows, rhs, prov = [], [], []
    if "row_sum" in constraint_set:
        for i in range(I):
            row = np.zeros(nvar)
            for j in range(J):
                if mask[i, j]:
                    row[col_of[(i, j)]] = 1.0
            rows.append(row)
            rhs.append(1.0)
            prov.append(f"row_sum[{i}]")
    if "barycenter" in constraint_set:
        if theta is None:
            raise ValueError("barycenter constraints need theta for the right-hand side")
        theta = np.asarray(theta, dtype=np.float64)
        for i in range(I):
            for d in range(D):
                row = np.zeros(nvar)
                for j in range(J):
                    if mask[i, j]:
                        row[col_of[(i, j)]] = gamma[j, d]
                rows.append(row)
                rhs.append(theta[i, d])
                prov.append(f"barycenter[{i},{d}]")
    if use_const:
        if theta is None:
            raise ValueError("optimality constraints need theta for the transport costs")
        cost = pairwise_cost(np.asarray(theta), gamma, "sq_euclidean").entries
        for i in range(I):
            row = np.zeros(nvar)
            for j in range(J):
                if mask[i, j]:
                    row[col_of[(i, j)]] = cost[i, j]
            row[-1] = -1.0
            rows.append(row)
            rhs.append(0.0)
            prov.append(f"optimality[{i}]")
    variables = cells + (["const"] if use_const else [])
    return np.asarray(rows), np.asarray(rhs), prov, variables


def dof_analysis(
    support: SupportPattern,
    gamma: np.ndarray,
    p: np.ndarray,
    constraint_set,
    theta: np.ndarray = None,
    rank_tolerance: float = 1e-8,
) -> ConstraintSystem:
    """Numerical rank / degrees-of-freedom of the chosen constraints.

    Variables are the support cells plus the optimality constant when that
    constraint is selected. theta supplies the transport costs and
    barycenter targets (the published counting never needs p, which is
    accepted for interface symmetry). paper_dof records J - I*D for
    comparison against the measured value.
    """
    constraint_set = set(constraint_set)
    if not constraint_set:
        raise ValueError("constraint set must be nonempty")
    unknown = constraint_set - set(_CONSTRAINT_KINDS)
    if unknown:
        raise ValueError(f"unknown constraint kinds: {sorted(unknown)}")
    A, b, prov, variables = _assemble(support, gamma, theta, constraint_set)
    I, J = support.mask.shape
    D = np.asarray(gamma).shape[1]
    svals = np.linalg.svd(A, compute_uv=False) if A.size else np.zeros(0)
    rank = int((svals > rank_tolerance * (svals[0] if len(svals) else 1.0)).sum())
    return ConstraintSystem(
        matrix=A,
        rhs=b,
        provenance=prov,
        variables=variables,
        rank=rank,
        dof=len(variables) - rank,
        paper_dof=J - I * D,
        rank_tolerance=rank_tolerance,
    )


@dataclass
class ReconstructionResult:
    plan: TransportPlan
    residual: float
    nullspace_dim: int
    consistent: bool
    system: ConstraintSystem


def reconstruct_plan(
    support: SupportPattern,
    gamma: np.ndarray,
    p: np.ndarray,
    q: np.ndarray,
    theta: np.ndarray,
    constraint_set=("row_sum", "barycenter"),
    residual_tolerance: float = 1e-6,
) -> ReconstructionResult:
    """Least-squares identification of the plan restricted to the support.

    With a single source mode the boundary condition alone pins the only
    feasible row to the target weights, so that case returns q directly.
    Otherwise the chosen linear constraints are solved by least squares;
    consistency requires the residual to stay within tolerance, and any
    nullspace dimension is reported instead of being silently resolved.
    """
    mask = support.mask
    I, J = mask.shape
    p = np.asarray(p, dtype=np.float64)
    q = None if q is None else np.asarray(q, dtype=np.float64)
    system = dof_analysis(support, gamma, p, constraint_set, theta=theta)
    if I == 1:
        if q is None:
            raise ValueError("single-source reconstruction needs the target weights")
        V = q[None, :].copy()
        plan = TransportPlan(V=V, p=p, q=q, objective=float("nan"))
        return ReconstructionResult(plan, 0.0, max(J - system.rank, 0), True, system)
    A, b = system.matrix, system.rhs
    sol, _, rank, sv = np.linalg.lstsq(A, b, rcond=None)
    residual = float(np.linalg.norm(A @ sol - b))
    nullspace = len(system.variables) - system.rank
    V = np.zeros((I, J))
    for value, var in zip(sol, system.variables):
        if var != "const":
            V[var] = value
    qhat = (V * p[:, None]).sum(axis=0)
    plan = TransportPlan(V=V, p=p, q=qhat if q is None else q, objective=float("nan"))
    return ReconstructionResult(
        plan=plan,
        residual=residual,
        nullspace_dim=nullspace,
        consistent=residual <= residual_tolerance,
        system=system,
    )


# -- single-source degeneracy -------------------------------------------------------


@dataclass
class I1Report:
    z1_coefficient: float
    objective_spread: float
    grid: np.ndarray
    objectives: np.ndarray


def _reduced_dual_objective(theta, gamma, q, z_head, p):
    """Dual objective after substituting the feasible tail completion."""
    cost = pairwise_cost(theta, gamma, "sq_euclidean").entries
    z_tail = (cost - (z_head / p)[:, None]).min(axis=0)
    return float(z_head.sum() + (q * z_tail).sum())


def demonstrate_i1_illposed(theta1: np.ndarray, gamma: np.ndarray, q: np.ndarray) -> I1Report:
    """Show the reduced single-source dual objective ignores its head variable.

    After substituting the tail completion, the head coefficient collapses
    to 1 - sum(q), identically zero on the simplex; the grid evaluation
    confirms the numeric objective is constant in z_1.
    """
    theta1 = np.asarray(theta1, dtype=np.float64).reshape(1, -1)
    gamma = np.asarray(gamma, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    coefficient = float(1.0 - q.sum())
    grid = np.linspace(-10.0, 10.0, 21)
    objectives = np.array(
        [
            _reduced_dual_objective(theta1, gamma, q, np.array([z1]), np.array([1.0]))
            for z1 in grid
        ]
    )
    return I1Report(
        z1_coefficient=coefficient,
        objective_spread=float(objectives.max() - objectives.min()),
        grid=grid,
        objectives=objectives,
    )


def reduced_dual_spread(theta, gamma, q, p, head_index: int = 0, fixed_head=None) -> float:
    """Spread of the reduced dual objective as one head variable sweeps a grid.

    Contrast probe for multi-source instances: with more than one source
    the objective genuinely depends on each head variable.
    """
    theta = np.asarray(theta, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    base = np.zeros(len(p)) if fixed_head is None else np.asarray(fixed_head, dtype=np.float64)
    vals = []
    for z in np.linspace(-10.0, 10.0, 21):
        head = base.copy()
        head[head_index] = z
        vals.append(_reduced_dual_objective(theta, np.asarray(gamma), np.asarray(q), head, p))
    return float(max(vals) - min(vals))


# -- end-to-end pipeline ---------------------------------------------------------


@dataclass
class PipelineConfig:
    oracle: bool = False
    predictor: str = "mlp"  # or "linear"
    hidden: int = 64
    epochs: int = 400
    lr: float = 5e-3
    restarts: int = 8
    seed: int = 0
    constraint_set: tuple = ("row_sum", "barycenter")
    support_tolerance: float = 1e-7


def _fit_linear(Y: np.ndarray, T: np.ndarray):
    X = np.column_stack([Y, np.ones(len(Y))])
    coef, *_ = np.linalg.lstsq(X, T, rcond=None)
    return lambda y: np.concatenate([y, [1.0]]) @ coef


def _fit_mlp(Y: np.ndarray, T: np.ndarray, cfg: PipelineConfig, rng):
    params = init_mlp([Y.shape[1], cfg.hidden, T.shape[1]], "relu", 0.0, rng)
    state = OptState("adam", lr=cfg.lr)
    names = [f"{k}" for k in range(2 * len(params.weights))]
    for _ in range(cfg.epochs):
        nv = MlpVars(params)
        out = nv.forward(Y)
        r = out - Var(T, requires_grad=False)
        loss = (r * r).sum(axis=1).mean()
        _, grads = value_and_grads(loss, [v for _, v in nv.variables()])
        flat = [v.data for _, v in nv.variables()]
        new = opt_step(flat, grads, state, names)
        for k in range(len(params.weights)):
            params.weights[k] = new[2 * k]
            params.biases[k] = new[2 * k + 1]
    return lambda y: mlp_forward(params, y)


def _fit_predictor(Y, T, cfg: PipelineConfig, rng):
    if cfg.predictor == "linear":
        return _fit_linear(Y, T)
    return _fit_mlp(Y, T, cfg, rng)


def theory_pipeline(dataset, gamma: np.ndarray, I: int, config: PipelineConfig, test_indices=None):
    """Train/test run of the identification pipeline over shared target modes.

    dataset is a list of (q, y) pairs sharing the fixed mode grid gamma.
    Training conditions are projected to I modes and their dual heads
    stored; predictors for (modes, weights, dual head) are fitted on the
    descriptors — or bypassed entirely in oracle mode, which feeds each
    test condition its own ground-truth triple. Test conditions recover
    the support from the predicted dual head, identify the plan on it,
    and push the predicted source weights through to an estimate of q.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    J, D = gamma.shape
    rng = np.random.default_rng(config.seed)
    items = [(np.asarray(q, dtype=np.float64), np.asarray(y, dtype=np.float64)) for q, y in dataset]
    if test_indices is None:
        test_indices = list(range(max(1, len(items) // 5)))
    test_set = set(test_indices)

    def ground_truth(q):
        measure, plan, mw2 = project_to_I_modes(GmmMeasure(gamma, q), I, config.restarts, rng)
        # exact projections sit on a degenerate dual face: store the strict-
        # complementarity dual so tightness marks the plan support alone
        cost = pairwise_cost(measure.modes, gamma, "sq_euclidean")
        z = interior_dual(cost, plan)
        return measure, z[: measure.n_modes]

    per_condition = []
    if config.oracle:
        predict = None
    else:
        train = [(q, y) for k, (q, y) in enumerate(items) if k not in test_set]
        Ys = np.asarray([y for _, y in train])
        triples = [ground_truth(q) for q, _ in train]
        thetas = np.asarray([m.modes.ravel() for m, _ in triples])
        ps = np.asarray([m.weights for m, _ in triples])
        zs = np.asarray([z for _, z in triples])
        if I == 1:
            h_q = _fit_predictor(Ys, np.asarray([q for q, _ in train]), config, rng)
            predict = ("direct", h_q)
        else:
            if any(m.n_modes != I for m, _ in triples):
                raise ValueError("projection collapsed a mode; lower I or change restarts")
            h_theta = _fit_predictor(Ys, thetas, config, rng)
            h_p = _fit_predictor(Ys, ps, config, rng)
            h_z = _fit_predictor(Ys, zs, config, rng)
            predict = ("triple", h_theta, h_p, h_z)

    for n in sorted(test_set):
        q, y = items[n]
        entry = {"condition": n}
        try:
            if config.oracle:
                if I == 1:  # single-source transport carries no information beyond q
                    entry.update(_score(q, q, gamma))
                    per_condition.append(entry)
                    continue
                measure, z_head = ground_truth(q)
                theta_hat, p_hat = measure.modes, measure.weights
            elif predict[0] == "direct":
                q_hat = np.maximum(predict[1](y), 1e-12)
                q_hat = q_hat / q_hat.sum()
                entry.update(_score(q_hat, q, gamma))
                per_condition.append(entry)
                continue
            else:
                _, h_theta, h_p, h_z = predict
                theta_hat = h_theta(y).reshape(I, D)
                p_hat = np.maximum(h_p(y), 1e-9)
                p_hat = p_hat / p_hat.sum()
                z_head = h_z(y)
            pattern, _, consistent = support_from_dual(
                theta_hat, gamma, p_hat, z_head, tolerance=config.support_tolerance
            )
            if not consistent:
                entry["error"] = "inconsistent dual head: a row has no tight cell"
                per_condition.append(entry)
                continue
            rec = reconstruct_plan(
                pattern, gamma, p_hat, None, theta_hat, config.constraint_set
            )
            if not rec.consistent:
                entry["error"] = f"reconstruction residual {rec.residual:.3e} over tolerance"
                entry["nullspace_dim"] = rec.nullspace_dim
                per_condition.append(entry)
                continue
            q_hat = np.maximum((rec.plan.V * p_hat[:, None]).sum(axis=0), 0.0)
            total = q_hat.sum()
            q_hat = q_hat / total if total > 0 else np.full(J, 1.0 / J)
            entry["nullspace_dim"] = rec.nullspace_dim
            entry.update(_score(q_hat, q, gamma))
        except (ValueError, RuntimeError) as exc:
            entry["error"] = str(exc)
        per_condition.append(entry)

    ok = [e for e in per_condition if "tv_error" in e]
    summary = {
        "n_test": len(per_condition),
        "n_ok": len(ok),
        "max_tv_error": max((e["tv_error"] for e in ok), default=float("nan")),
        "mean_tv_error": float(np.mean([e["tv_error"] for e in ok])) if ok else float("nan"),
    }
    return {"per_condition": per_condition, "summary": summary}


def _score(q_hat: np.ndarray, q: np.ndarray, gamma: np.ndarray) -> dict:
    tv = 0.5 * float(np.abs(q_hat - q).sum())
    out = {"tv_error": tv, "q_hat": q_hat.tolist()}
    if tv > 0:
        # solver wants strictly positive marginals; nudge exact zeros
        q_a = np.maximum(q_hat, 1e-12)
        q_b = np.maximum(q, 1e-12)
        mw2, _, _ = mixture_wasserstein(
            GmmMeasure(gamma, q_a / q_a.sum()), GmmMeasure(gamma, q_b / q_b.sum())
        )
        out["mw2_error"] = mw2
    else:
        out["mw2_error"] = 0.0
    return out
