"""Balanced optimal transport between two discrete point clouds.

``sinkhorn`` solves the entropically regularized transportation problem in
the log domain. ``exact_transport`` is a small-instance exact solver used to
check it: a Hungarian assignment for uniform square problems and a linear
program for general marginals.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import InvalidArgument, InvalidState, UnsupportedSize

MAX_ASSIGNMENT_SIZE = 64
MAX_GENERAL_SIZE = 6


@dataclass
class SinkhornConfig:
    epsilon: float = 0.1
    max_iterations: int = 1000
    tolerance: float = 1e-6
    normalize_cost: bool = True
    # below SCALING_BELOW, anneal epsilon geometrically from 1.0 down to the
    # target, warm-starting the potentials; the fixed point is unchanged
    epsilon_scaling: bool = True
    check_every: int = 5
    # over-relaxation factor in [1, 2); 1 is plain Sinkhorn
    relaxation: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidArgument(f"epsilon must be > 0, got {self.epsilon}")
        if not self.tolerance > 0:
            raise InvalidArgument(f"tolerance must be > 0, got {self.tolerance}")
        if not 1.0 <= self.relaxation < 2.0:
            raise InvalidArgument(f"relaxation must be in [1, 2), got {self.relaxation}")
        if self.max_iterations < 1:
            raise InvalidArgument(f"max_iterations must be >= 1, got {self.max_iterations}")


@dataclass
class TransportPlan:
    plan: np.ndarray
    converged: bool
    iterations: int
    marginal_violation: float
    # dual potentials in the units of the raw cost matrix (None for exact plans)
    row_potential: np.ndarray | None = None
    col_potential: np.ndarray | None = None
    epsilon: float | None = None
    normalizer: float = 1.0
    extras: dict = field(default_factory=dict)


def uniform_weights(n):
    return np.full(n, 1.0 / n)


def _check_weights(w, name):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise InvalidArgument(f"{name} must be a non-empty vector")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise InvalidArgument(f"{name} entries must be finite and > 0")
    if abs(w.sum() - 1.0) > 1e-9:
        raise InvalidArgument(f"{name} must sum to 1, got {w.sum()!r}")
    return w


def _check_problem(cost, v, t):
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise InvalidArgument(f"cost must be a matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise InvalidArgument("cost matrix has non-finite entries")
    if np.any(cost < 0):
        raise InvalidArgument("cost matrix has negative entries")
    n, m = cost.shape
    v = uniform_weights(n) if v is None else _check_weights(v, "v")
    t = uniform_weights(m) if t is None else _check_weights(t, "t")
    if v.size != n or t.size != m:
        raise InvalidArgument(
            f"marginal lengths ({v.size}, {t.size}) do not match cost shape {cost.shape}")
    return cost, v, t


def marginal_violation(plan, v, t):
    return float(max(np.max(np.abs(plan.sum(axis=1) - v)),
                     np.max(np.abs(plan.sum(axis=0) - t))))


def _logsumexp(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


SCALING_BELOW = 0.05
ABSORB_LOW = 1e-50
ABSORB_HIGH = 1e50


def _log_sweep(g, eps, c, log_v, log_t):
    f = eps * log_v - eps * _logsumexp((g[None, :] - c) / eps, axis=1)
    g = eps * log_t - eps * _logsumexp((f[:, None] - c) / eps, axis=0)
    return f, g


def _absorb(f, g, a, b, eps, c, log_v, log_t):
    """Fold the scaling vectors into the potentials.

    If a scaling overflowed or hit zero, the potentials are rebuilt with an
    exact log-domain sweep from the last good column potential instead.
    """
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        la = np.log(a)
        lb = np.log(b)
    if np.all(np.isfinite(la)) and np.all(np.isfinite(lb)):
        return f + eps * la, g + eps * lb
    return _log_sweep(g, eps, c, log_v, log_t)


def sinkhorn(cost, v=None, t=None, cfg=None):
    """Entropic OT plan via log-domain Sinkhorn updates on the dual potentials.

    Marginals default to uniform. When ``cfg.normalize_cost`` is set the
    iteration runs on ``cost / cost.max()``; the returned potentials and
    epsilon are mapped back to raw cost units so that
    ``plan = exp((f_i + g_j - C_ij) / epsilon)`` holds for the raw matrix.
    """
    cfg = cfg or SinkhornConfig()
    cost, v, t = _check_problem(cost, v, t)
    normalizer = 1.0
    if cfg.normalize_cost:
        cmax = float(cost.max())
        if cmax > 0:
            normalizer = cmax
    c = cost / normalizer
    eps = cfg.epsilon
    log_v = np.log(v)
    log_t = np.log(t)
    f = np.zeros(c.shape[0])
    g = np.zeros(c.shape[1])
    schedule = [cfg.epsilon]
    if cfg.epsilon_scaling and cfg.epsilon < SCALING_BELOW:
        e = 1.0
        stages = []
        while e > cfg.epsilon * 2:
            stages.append(e)
            e *= 0.5
        schedule = stages + [cfg.epsilon]
    omega = cfg.relaxation
    it = 0
    for stage, eps in enumerate(schedule):
        if it >= cfg.max_iterations:
            break
        stage_tol = cfg.tolerance if stage == len(schedule) - 1 else max(cfg.tolerance, 1e-3)
        # re-center the potentials for this epsilon with one exact log-domain sweep
        f, g = _log_sweep(g, eps, c, log_v, log_t)
        it += 1
        kernel = np.exp((f[:, None] + g[None, :] - c) / eps)
        kernel_t = kernel.T.copy()
        a = np.ones_like(f)
        b = np.ones_like(g)
        while it < cfg.max_iterations:
            it += 1
            if omega == 1.0:
                a = v / (kernel @ b)
                b = t / (kernel_t @ a)
            else:
                a = a ** (1.0 - omega) * (v / (kernel @ b)) ** omega
                b = b ** (1.0 - omega) * (t / (kernel_t @ a)) ** omega
            if it % cfg.check_every and it < cfg.max_iterations:
                continue
            lo = min(a.min(), b.min())
            hi = max(a.max(), b.max())
            if not (lo > ABSORB_LOW and hi < ABSORB_HIGH):
                f, g = _absorb(f, g, a, b, eps, c, log_v, log_t)
                kernel = np.exp((f[:, None] + g[None, :] - c) / eps)
                kernel_t = kernel.T.copy()
                a = np.ones_like(f)
                b = np.ones_like(g)
                continue
            # with plain updates the columns are exact after the b update
            err = np.max(np.abs(a * (kernel @ b) - v))
            if omega != 1.0:
                err = max(err, np.max(np.abs(b * (kernel_t @ a) - t)))
            if err <= stage_tol:
                break
        f, g = _absorb(f, g, a, b, eps, c, log_v, log_t)
    eps = cfg.epsilon
    plan = np.exp((f[:, None] + g[None, :] - c) / eps)
    violation = marginal_violation(plan, v, t)
    converged = violation <= cfg.tolerance
    return TransportPlan(
        plan=plan,
        converged=converged,
        iterations=it,
        marginal_violation=violation,
        row_potential=f * normalizer,
        col_potential=g * normalizer,
        epsilon=eps * normalizer,
        normalizer=normalizer,
    )


def transport_cost(plan, cost):
    p = plan.plan if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    if p.shape != cost.shape:
        raise InvalidArgument(f"plan shape {p.shape} does not match cost shape {cost.shape}")
    return float(np.sum(p * cost))


def adjusted_cost_monotonicity_check(plan, cost, potentials=None, tol=1e-9):
    """True iff every row of the plan is non-increasing in ``cost[i, j] - g[j]``.

    ``potentials`` is ``(f, g)``; when omitted the potentials stored on the
    plan are used. Entries whose adjusted costs tie within ``tol`` may come
    in any order.
    """
    if potentials is None:
        if not isinstance(plan, TransportPlan) or plan.col_potential is None:
            raise InvalidState("plan carries no dual potentials")
        potentials = (plan.row_potential, plan.col_potential)
    if potentials[1] is None:
        raise InvalidState("missing column potential")
    p = plan.plan if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    adjusted = cost - np.asarray(potentials[1])[None, :]
    for i in range(p.shape[0]):
        a = adjusted[i]
        w = p[i]
        cheaper = a[:, None] < a[None, :] - tol
        if np.any(cheaper & (w[None, :] > w[:, None] + tol)):
            return False
    return True


def hungarian(cost):
    """Minimum-cost perfect assignment on a square matrix.

    Returns ``(assignment, row_dual, col_dual)`` where ``assignment[i]`` is the
    column matched to row ``i`` and ``cost[i, j] - row_dual[i] - col_dual[j] >= 0``
    with equality on the matched entries.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    # 1-based shortest augmenting path formulation with potentials
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=int)  # match[j] = row assigned to column j
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used
            free[0] = False
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            cols = np.nonzero(free)[0]
            red = cur[cols - 1]
            better = red < minv[cols]
            minv[cols[better]] = red[better]
            way[cols[better]] = j0
            j1 = cols[np.argmin(minv[cols])]
            delta = minv[j1]
            u[match[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while True:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
            if j0 == 0:
                break
    assignment = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        assignment[match[j] - 1] = j - 1
    return assignment, u[1:], v[1:]


def _assignment_value(cost):
    a, _, _ = hungarian(cost)
    return float(cost[np.arange(len(a)), a].sum())


def lexicographic_assignment(cost, tol=None):
    """Optimal assignment; among ties, the lexicographically smallest permutation."""
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if tol is None:
        tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    rows = list(range(n))
    cols = list(range(n))
    result = np.empty(n, dtype=int)
    sub = cost
    assign, u, v = hungarian(sub)
    best = float(sub[np.arange(len(assign)), assign].sum())
    while rows:
        i_local = 0
        chosen = assign[i_local]
        reduced = sub[i_local] - u[i_local] - v
        for j_local in range(chosen):
            if reduced[j_local] > tol:
                continue
            rest = np.delete(np.delete(sub, i_local, axis=0), j_local, axis=1)
            value = sub[i_local, j_local] + (_assignment_value(rest) if rest.size else 0.0)
            if value <= best + tol:
                chosen = j_local
                break
        result[rows[0]] = cols[chosen]
        switched = chosen != assign[i_local]
        rows.pop(0)
        cols.pop(chosen)
        sub = np.delete(np.delete(sub, i_local, axis=0), chosen, axis=1)
        if not rows:
            break
        if switched:
            assign, u, v = hungarian(sub)
        else:
            keep = np.arange(len(assign)) != i_local
            assign = assign[keep]
            assign = assign - (assign > chosen)
            u = u[keep]
            v = np.delete(v, chosen)
        best = float(sub[np.arange(len(assign)), assign].sum())
    return result


def _is_uniform(w, n):
    return np.allclose(w, 1.0 / n, rtol=0, atol=1e-12)


def exact_transport(cost, v=None, t=None):
    """Exact minimizer of the transportation problem on small instances."""
    cost, v, t = _check_problem(cost, v, t)
    n, m = cost.shape
    if n == m and _is_uniform(v, n) and _is_uniform(t, m):
        if n > MAX_ASSIGNMENT_SIZE:
            raise UnsupportedSize(f"assignment oracle limited to {MAX_ASSIGNMENT_SIZE}x{MAX_ASSIGNMENT_SIZE}")
        perm = lexicographic_assignment(cost)
        plan = np.zeros_like(cost)
        plan[np.arange(n), perm] = 1.0 / n
        return TransportPlan(plan=plan, converged=True, iterations=0,
                             marginal_violation=marginal_violation(plan, v, t),
                             extras={"method": "assignment", "permutation": perm})
    if n > MAX_GENERAL_SIZE or m > MAX_GENERAL_SIZE:
        raise UnsupportedSize(
            f"general-marginal oracle limited to {MAX_GENERAL_SIZE}x{MAX_GENERAL_SIZE}, got {n}x{m}")
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=np.concatenate([v, t]),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise InvalidState(f"LP solver failed: {res.message}")
    plan = np.maximum(res.x.reshape(n, m), 0.0)
    return TransportPlan(plan=plan, converged=True, iterations=int(res.nit),
                         marginal_violation=marginal_violation(plan, v, t),
                         extras={"method": "lp"})
