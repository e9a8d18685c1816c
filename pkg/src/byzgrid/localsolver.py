"""Native numerical layer: projection sets, the closed-form consensus
projection (y-update), the Douglas-Rachford subproblem solver (x-update), and
a centralized reference solver built from the same kernels.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import kernels
from .errors import BoundsError, NonConvergence, RankError
from .market import outcome as market_outcome

_EMPTY = np.zeros(0)
_NO_CONE = np.zeros(4, dtype=np.int64)


# ---------------------------------------------------------------------------
# projection sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.lo) > np.asarray(self.hi)):
            raise BoundsError("box has lo > hi")

    def project(self, x):
        return kernels.project_box(np.asarray(x, float),
                                   np.asarray(self.lo, float),
                                   np.asarray(self.hi, float))


@dataclass(frozen=True)
class Halfspace:
    a: np.ndarray
    b: float

    def __post_init__(self):
        if not np.any(np.asarray(self.a)):
            raise BoundsError("halfspace normal must be nonzero")

    def project(self, x):
        return kernels.project_halfspace(np.asarray(x, float),
                                         np.asarray(self.a, float),
                                         float(self.b))


@dataclass(frozen=True)
class SecondOrderCone:
    """The flow cone P^2 + Q^2 <= scale * v * l over four coordinates."""
    indices: tuple  # (P, Q, v, l)
    scale: float

    def project(self, x):
        p, q, v, l = self.indices
        return kernels.project_flow_cone(np.asarray(x, float), p, q, v, l,
                                         float(self.scale))


@dataclass(frozen=True)
class AffineNullspace:
    m: np.ndarray

    def project(self, x):
        m = np.asarray(self.m, float)
        x = np.asarray(x, float)
        if m.size == 0:
            return x.copy()
        coef = np.linalg.solve(m @ m.T, m @ x)
        return x - m.T @ coef


def project_box(x, lo, hi):
    """Componentwise clamp; the Euclidean projection onto a box."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    if np.any(lo > hi):
        raise BoundsError("box has lo > hi")
    return kernels.project_box(np.asarray(x, float), lo, hi)


def project_soc(z, t):
    """Exact projection onto the standard cone {(z, t): ||z|| <= t}."""
    return kernels.project_cone(np.asarray(z, float), float(t))


def dykstra(x0, sets, tol=1e-10, max_iter=2000):
    """Dykstra's alternating projections onto an intersection of sets.

    Raises NonConvergence (carrying the best iterate) if the cycle
    displacement does not fall below ``tol`` within ``max_iter`` cycles.
    """
    x = np.asarray(x0, dtype=float).copy()
    if not sets:
        return x
    corrections = [np.zeros_like(x) for _ in sets]
    for _ in range(max_iter):
        x_prev = x.copy()
        for k, s in enumerate(sets):
            y = x + corrections[k]
            x = s.project(y)
            corrections[k] = y - x
        if np.linalg.norm(x - x_prev) <= tol:
            return x
    raise NonConvergence("dykstra exceeded max_iter", iterate=x,
                         residual=float(np.linalg.norm(x - x_prev)))


# ---------------------------------------------------------------------------
# closed-form consensus projection (y-update)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class YUpdateKernel:
    q: np.ndarray          # dense coefficient matrix; y = q @ (-mu - eta*x)
    q_inv_norm: float      # spectral norm of pinv(q) on the nullspace of m
    eta: float
    m: np.ndarray


def precompute_y_kernel(m, eta):
    """Build the dense y-update matrix Q = G^-1 Mᵀ(M G^-1 Mᵀ)^-1 M G^-1 - G^-1
    with G = eta*I.  Applying it to (-mu - eta*x) projects (x + mu/eta) onto
    the nullspace of M."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.size == 0:
        n = m.shape[1] if m.ndim == 2 else 0
        q = -np.eye(n) / eta
        return YUpdateKernel(q=q, q_inv_norm=eta, m=m, eta=eta)
    n = m.shape[1]
    gram = m @ m.T / eta
    sv_g = np.linalg.svd(gram, compute_uv=False)
    if sv_g.min() <= 1e-12 * max(sv_g.max(), 1.0):
        raise RankError("coupling matrix is rank deficient")
    sol = np.linalg.solve(gram, m / eta)
    q = (m.T / eta) @ sol - np.eye(n) / eta
    sv = np.linalg.svd(q, compute_uv=False)
    nonzero = sv[sv > 1e-12 * max(sv[0], 1.0)]
    q_inv_norm = 1.0 / float(nonzero.min()) if nonzero.size else eta
    return YUpdateKernel(q=q, q_inv_norm=q_inv_norm, m=m, eta=eta)


def solve_y(kernel, x, mu):
    """Closed-form y-update: Q (-mu - eta x)."""
    x = np.asarray(x, float)
    mu = np.asarray(mu, float)
    return kernel.q @ (-mu - kernel.eta * x)


# ---------------------------------------------------------------------------
# x-subproblem solver
# ---------------------------------------------------------------------------

class AgentSolver:
    """Douglas-Rachford solver for one agent's subproblem.

    minimize f_i(x) + (eta/2) sum_h ||x|_h - t_h||^2  over  box ∩ hs ∩ cone

    The quadratic model (cost + consensus) is prefactored once; per call only
    the linear term changes.  ``counts`` gives, per component, the number of
    consensus copies (self plus external holders).
    """

    def __init__(self, problem, eta, counts, gamma=None):
        self.problem = problem
        self.eta = float(eta)
        self.counts = np.asarray(counts, dtype=float)
        d = problem.dim
        h_cost, g_cost = problem.cost_quadratic()
        self.h = h_cost + np.diag(self.eta * self.counts)
        self.g_cost = g_cost
        diag = np.diag(self.h)
        if gamma is None:
            gamma = 1.0 / np.sqrt(float(diag.min() * diag.max()))
        self.gamma = float(gamma)
        self.ainv = np.linalg.inv(np.eye(d) + self.gamma * self.h)
        self.lo = np.where(np.isneginf(problem.box_lo), -1e30, problem.box_lo)
        self.hi = np.where(np.isposinf(problem.box_hi), 1e30, problem.box_hi)
        if problem.halfspaces:
            self.hs_a, self.hs_b = problem.halfspaces[0]
            self.hs_a = np.asarray(self.hs_a, float)
            self.has_hs = True
        else:
            self.hs_a, self.hs_b = np.zeros(d), 0.0
            self.has_hs = False
        if problem.soc is not None:
            self.cone_idx = np.asarray(problem.soc, dtype=np.int64)
            self.has_cone = True
        else:
            self.cone_idx = _NO_CONE
            self.has_cone = False

    def consensus_linear(self, targets):
        """Linear term of the consensus quadratic for per-holder targets
        ``targets``: list of (component index array, target vector)."""
        g = np.zeros(self.problem.dim)
        for idx, t in targets:
            g[idx] -= self.eta * t
        return g

    def solve(self, targets, tol=1e-8, max_iter=5000, warm=None,
              dyk_tol=1e-10, dyk_max_iter=2000):
        g = self.g_cost + self.consensus_linear(targets)
        bvec = self.gamma * g
        s0 = warm if warm is not None else np.zeros(self.problem.dim)
        x, s, n_it, resid, ok = kernels.dr_solve(
            self.ainv, bvec, s0, self.lo, self.hi, self.hs_a, float(self.hs_b),
            self.has_hs, self.cone_idx, self.has_cone,
            float(self.problem.soc_scale), tol, max_iter, dyk_tol, dyk_max_iter)
        return x, s, int(n_it), float(resid), bool(ok)


def solve_x(problem, y, mu, eta, tol=1e-8, max_iter=5000, counts=None,
            warm=None):
    """Solve one agent's subproblem against received copies and duals.

    ``y`` and ``mu`` map holder id -> (component index array, vector); the
    holder's target is y - mu/eta.  Raises NonConvergence when the splitting
    exhausts ``max_iter`` (carrying the best iterate).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    d = problem.dim
    if counts is None:
        counts = np.zeros(d)
        for idx, _ in y.values():
            counts[idx] += 1.0
    solver = AgentSolver(problem, eta, counts)
    targets = []
    for h, (idx, yv) in y.items():
        _, mv = mu[h]
        targets.append((idx, np.asarray(yv, float) - np.asarray(mv, float) / eta))
    x, s, n_it, resid, ok = solver.solve(targets, tol=tol, max_iter=max_iter,
                                         warm=warm)
    if not ok:
        raise NonConvergence(
            f"agent {problem.id} x-update: residual {resid:.3e} after {n_it} "
            f"iterations", iterate=x, residual=resid)
    return x


# ---------------------------------------------------------------------------
# centralized reference solver
# ---------------------------------------------------------------------------

def _global_rows(case, problems):
    """Each coupling constraint exactly once, over the concatenated vector."""
    from .market import L_FLOW, P_FLOW, P_INJ, Q_FLOW, Q_INJ, V
    from .netmodel import S_BASE

    offs = {}
    off = 0
    for p in problems:
        offs[p.id] = off
        off += p.dim
    n = off
    rows = []
    by_id = {p.id: p for p in problems}
    for p in problems:
        i = p.id
        if p.parent is not None:
            line = case.line_into(i)
            row = np.zeros(n)
            row[offs[p.parent] + V] = 1.0
            row[offs[i] + V] = -1.0
            row[offs[i] + P_FLOW] = 2.0 * line.r / S_BASE
            row[offs[i] + Q_FLOW] = 2.0 * line.x / S_BASE
            row[offs[i] + L_FLOW] = -line.z2 / S_BASE
            rows.append(row)
        row_p = np.zeros(n)
        row_q = np.zeros(n)
        for j in p.children:
            lj = case.line_into(j)
            row_p[offs[j] + P_FLOW] = 1.0
            row_p[offs[j] + L_FLOW] = -lj.r
            row_q[offs[j] + Q_FLOW] = 1.0
            row_q[offs[j] + L_FLOW] = -lj.x
        row_p[offs[i] + P_FLOW] = -1.0
        row_p[offs[i] + P_INJ] = 1.0
        row_q[offs[i] + Q_FLOW] = -1.0
        row_q[offs[i] + Q_INJ] = 1.0
        rows.extend([row_p, row_q])
    for buyer, seller in case.trading_pairs:
        row = np.zeros(n)
        row[offs[buyer] + by_id[buyer].e_index(seller)] = 1.0
        row[offs[seller] + by_id[seller].e_index(buyer)] = 1.0
        rows.append(row)
    return np.array(rows), offs, n


def _centralized_solve_full(case, params, tol=1e-8, max_iter=200000,
                            utility="aggregate", gamma=None):
    from .market import assemble

    problems = assemble(case, params, utility=utility)
    a_glob, offs, n = _global_rows(case, problems)
    h = np.zeros((n, n))
    g = np.zeros(n)
    for p in problems:
        hc, gc = p.cost_quadratic()
        o = offs[p.id]
        h[o:o + p.dim, o:o + p.dim] = hc
        g[o:o + p.dim] = gc
    if gamma is None:
        dmax = max(float(np.diag(h).max()), 1.0)
        gamma = 1.0 / np.sqrt(dmax)
    m = a_glob.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = h + np.eye(n) / gamma
    kkt[:n, n:] = a_glob.T
    kkt[n:, :n] = a_glob
    lu = scipy.linalg.lu_factor(kkt)
    rhs = np.zeros(n + m)

    solvers = []
    for p in problems:
        lo = np.where(np.isneginf(p.box_lo), -1e30, p.box_lo)
        hi = np.where(np.isposinf(p.box_hi), 1e30, p.box_hi)
        if p.halfspaces:
            hs_a = np.asarray(p.halfspaces[0][0], float)
            hs_b = float(p.halfspaces[0][1])
            has_hs = True
        else:
            hs_a, hs_b, has_hs = np.zeros(p.dim), 0.0, False
        if p.soc is not None:
            cone = np.asarray(p.soc, dtype=np.int64)
            has_cone = True
        else:
            cone, has_cone = _NO_CONE, False
        solvers.append((offs[p.id], p.dim, lo, hi, hs_a, hs_b, has_hs, cone,
                        has_cone, p.soc_scale))

    def project_blocks(z):
        out = np.empty_like(z)
        for (o, d, lo, hi, hs_a, hs_b, has_hs, cone, has_cone, scale) in solvers:
            blk, _, _ = kernels.dykstra_local(
                z[o:o + d], lo, hi, hs_a, hs_b, has_hs, cone, has_cone,
                float(scale), 1e-12, 5000)
            out[o:o + d] = blk
        return out

    s = np.zeros(n)
    xc = np.zeros(n)
    resid = np.inf
    for it in range(max_iter):
        rhs[:n] = s / gamma - g
        xf = scipy.linalg.lu_solve(lu, rhs)[:n]
        xc = project_blocks(2.0 * xf - s)
        diff = xc - xf
        s += diff
        resid = float(np.max(np.abs(diff)))
        if resid <= tol:
            break
    else:
        raise NonConvergence(
            f"centralized solver: residual {resid:.3e} after {max_iter} "
            f"iterations", iterate=xc, residual=resid)
    xs = {p.id: xc[offs[p.id]:offs[p.id] + p.dim] for p in problems}
    return market_outcome(xs, case, problems), xs, problems


def centralized_solve(case, params, tol=1e-8, max_iter=200000,
                      utility="aggregate"):
    """Solve the undecomposed market problem with the same splitting kernels;
    the optimality reference for the distributed algorithm."""
    out, _, _ = _centralized_solve_full(case, params, tol=tol,
                                        max_iter=max_iter, utility=utility)
    return out
