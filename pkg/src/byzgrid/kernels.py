"""Hot numeric kernels: projections, Dykstra cycles, and the operator-splitting
solver for the per-agent subproblem.

Every kernel is written as a plain-Python/NumPy function and compiled with
``numba.njit`` when available.  Set ``BYZGRID_NUMBA=0`` in the environment to
force the pure-NumPy fallback (same functions, interpreted); ``BYZGRID_NUMBA=1``
makes a missing numba an error.  ``benchmarks/bench_kernels.py`` compares the
two paths.
"""

import os

import numpy as np

_flag = os.environ.get("BYZGRID_NUMBA", "auto").strip().lower()
if _flag in ("0", "false", "off", "no"):
    NUMBA_ENABLED = False
elif _flag in ("1", "true", "on", "yes"):
    import numba  # noqa: F401  (hard requirement requested)

    NUMBA_ENABLED = True
else:
    try:
        import numba  # noqa: F401

        NUMBA_ENABLED = True
    except ImportError:
        NUMBA_ENABLED = False


def _maybe_jit(fn):
    if NUMBA_ENABLED:
        from numba import njit

        return njit(cache=True)(fn)
    return fn


def backend_name():
    return "numba" if NUMBA_ENABLED else "numpy"


# ---------------------------------------------------------------------------
# elementary projections
# ---------------------------------------------------------------------------

def _project_box(x, lo, hi):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        v = x[i]
        if v < lo[i]:
            v = lo[i]
        elif v > hi[i]:
            v = hi[i]
        out[i] = v
    return out


def _project_halfspace(x, a, b):
    # Euclidean projection onto {x : a.x <= b}
    ax = 0.0
    aa = 0.0
    for i in range(x.shape[0]):
        ax += a[i] * x[i]
        aa += a[i] * a[i]
    out = x.copy()
    if ax > b and aa > 0.0:
        c = (ax - b) / aa
        for i in range(x.shape[0]):
            out[i] -= c * a[i]
    return out


def _project_cone(z, t):
    # Euclidean projection onto the standard cone {(z, t): ||z||_2 <= t}.
    nz = 0.0
    for i in range(z.shape[0]):
        nz += z[i] * z[i]
    nz = np.sqrt(nz)
    if nz <= t:
        return z.copy(), t
    if nz <= -t:
        return np.zeros_like(z), 0.0
    c = 0.5 * (nz + t) / nz
    out = np.empty_like(z)
    for i in range(z.shape[0]):
        out[i] = c * z[i]
    return out, 0.5 * (nz + t)


def _quad_cone_phi(w, lam, mu):
    # phi(mu) = sum_i lam_i w_i^2 / (1 + 2 mu lam_i)^2
    s = 0.0
    for i in range(w.shape[0]):
        d = 1.0 + 2.0 * mu * lam[i]
        s += lam[i] * (w[i] / d) * (w[i] / d)
    return s


def _project_quad_cone(w0, lam):
    """Exact Euclidean projection onto {w : sum_i lam_i w_i^2 <= 0, w_u >= 0}.

    ``lam`` is diagonal with exactly one negative entry, which must be the
    LAST component (the cone axis u).  Returns the projected vector.
    """
    n = w0.shape[0]
    u0 = w0[n - 1]
    lu = lam[n - 1]  # negative

    q0 = 0.0
    for i in range(n):
        q0 += lam[i] * w0[i] * w0[i]
    scale = 0.0
    for i in range(n):
        scale += abs(lam[i]) * w0[i] * w0[i]
    eps = 1e-15 * (scale + 1.0)

    if q0 <= eps and u0 >= 0.0:
        return w0.copy()

    # polar cone test: sum_{i<u} w_i^2/lam_i <= u0^2/|lam_u| and u0 <= 0
    if u0 <= 0.0:
        pol = 0.0
        for i in range(n - 1):
            pol += w0[i] * w0[i] / lam[i]
        if pol <= u0 * u0 / (-lu) + eps:
            return np.zeros_like(w0)

    mu_pole = -1.0 / (2.0 * lu)  # > 0

    if u0 > 0.0:
        mulo = 0.0
        muhi = mu_pole * (1.0 - 1e-12)
        # phi is strictly decreasing on (0, mu_pole): plain bisection
        for _ in range(90):
            mid = 0.5 * (mulo + muhi)
            if _quad_cone_phi(w0, lam, mid) > 0.0:
                mulo = mid
            else:
                muhi = mid
        mu = 0.5 * (mulo + muhi)
    elif u0 < 0.0:
        # root lies beyond the pole; bracket by doubling
        mulo = mu_pole * (1.0 + 1e-12)
        muhi = mu_pole * 2.0
        for _ in range(400):
            if _quad_cone_phi(w0, lam, muhi) > 0.0:
                break
            mulo = muhi
            muhi *= 2.0
        for _ in range(90):
            mid = 0.5 * (mulo + muhi)
            if _quad_cone_phi(w0, lam, mid) > 0.0:
                muhi = mid
            else:
                mulo = mid
        mu = 0.5 * (mulo + muhi)
    else:
        # u0 == 0: the multiplier sits exactly at the pole and u is free
        out = np.empty_like(w0)
        for i in range(n - 1):
            out[i] = w0[i] / (1.0 + 2.0 * mu_pole * lam[i])
        acc = 0.0
        for i in range(n - 1):
            acc += lam[i] * out[i] * out[i]
        out[n - 1] = np.sqrt(acc / (-lu))
        return out

    out = np.empty_like(w0)
    for i in range(n):
        out[i] = w0[i] / (1.0 + 2.0 * mu * lam[i])
    if out[n - 1] < 0.0:
        out[n - 1] = 0.0
    return out


def _project_flow_cone(x, pi, qi, vi, li, sbase):
    """Project x onto {P^2 + Q^2 <= sbase * v * l} in coordinates
    (x[pi], x[qi], x[vi], x[li]); all other coordinates pass through.

    Uses the orthonormal rotation s=(v-l)/sqrt2, u=(v+l)/sqrt2 under which the
    constraint is a diagonal quadratic cone, then the exact mu-root projection.
    """
    r2 = np.sqrt(2.0)
    w = np.empty(4, dtype=np.float64)
    lam = np.empty(4, dtype=np.float64)
    w[0] = x[pi]
    w[1] = x[qi]
    w[2] = (x[vi] - x[li]) / r2
    w[3] = (x[vi] + x[li]) / r2
    lam[0] = 1.0
    lam[1] = 1.0
    lam[2] = 0.5 * sbase
    lam[3] = -0.5 * sbase
    wp = _project_quad_cone(w, lam)
    out = x.copy()
    out[pi] = wp[0]
    out[qi] = wp[1]
    out[vi] = (wp[3] + wp[2]) / r2
    out[li] = (wp[3] - wp[2]) / r2
    return out


# ---------------------------------------------------------------------------
# Dykstra's alternating projections onto box ∩ halfspace ∩ flow-cone
# ---------------------------------------------------------------------------

def _dykstra_local(x0, lo, hi, hs_a, hs_b, has_hs, cone_idx, has_cone, sbase,
                   tol, max_iter):
    """Dykstra projection onto the agent's local feasible set.

    Returns (x, n_cycles, converged flag).  The set list is fixed:
    box, then (optionally) one halfspace, then (optionally) the flow cone.
    """
    n = x0.shape[0]
    x = x0.copy()
    p_box = np.zeros(n)
    p_hs = np.zeros(n)
    p_cone = np.zeros(n)
    converged = False
    it = 0
    for it in range(max_iter):
        x_prev = x.copy()

        y = x + p_box
        x = _project_box(y, lo, hi)
        p_box = y - x

        if has_hs:
            y = x + p_hs
            x = _project_halfspace(y, hs_a, hs_b)
            p_hs = y - x

        if has_cone:
            y = x + p_cone
            x = _project_flow_cone(y, cone_idx[0], cone_idx[1], cone_idx[2],
                                   cone_idx[3], sbase)
            p_cone = y - x

        delta = 0.0
        for i in range(n):
            d = x[i] - x_prev[i]
            delta += d * d
        if np.sqrt(delta) <= tol:
            # also require the current point to actually satisfy every set
            feas = 0.0
            for i in range(n):
                if x[i] < lo[i] - tol or x[i] > hi[i] + tol:
                    feas = 1.0
            if has_hs:
                ax = 0.0
                for i in range(n):
                    ax += hs_a[i] * x[i]
                if ax > hs_b + tol:
                    feas = 1.0
            if has_cone:
                pp = x[cone_idx[0]]
                qq = x[cone_idx[1]]
                vv = x[cone_idx[2]]
                ll = x[cone_idx[3]]
                if pp * pp + qq * qq - sbase * vv * ll > tol * (1.0 + sbase):
                    feas = 1.0
            if feas == 0.0:
                converged = True
                break
    return x, it + 1, converged


# ---------------------------------------------------------------------------
# Douglas-Rachford splitting for the x-subproblem
# ---------------------------------------------------------------------------

def _dr_solve(Ainv, bvec, s0, lo, hi, hs_a, hs_b, has_hs, cone_idx, has_cone,
              sbase, tol, max_iter, dyk_tol, dyk_max_iter):
    """Minimize 0.5 x'Hx + g'x over box ∩ halfspace ∩ flow-cone.

    ``Ainv`` is the prefactored (I + gamma*H)^-1 and ``bvec`` = gamma*g, so the
    quadratic prox is a single matvec.  Douglas-Rachford alternates that prox
    with a Dykstra projection onto the constraint sets; the fixed-point
    residual ||x_prox - x_proj|| certifies convergence.

    Returns (x_feasible, s_state, n_iter, residual, converged).
    """
    n = s0.shape[0]
    s = s0.copy()
    xc = s0.copy()
    resid = np.inf
    converged = False
    it = 0
    for it in range(max_iter):
        xf = Ainv @ (s - bvec)
        r = 2.0 * xf - s
        xc, _, _ = _dykstra_local(r, lo, hi, hs_a, hs_b, has_hs, cone_idx,
                                  has_cone, sbase, dyk_tol, dyk_max_iter)
        resid = 0.0
        for i in range(n):
            d = xc[i] - xf[i]
            resid += d * d
            s[i] += d
        resid = np.sqrt(resid)
        if resid <= tol:
            converged = True
            break
    return xc, s, it + 1, resid, converged


project_box = _maybe_jit(_project_box)
project_halfspace = _maybe_jit(_project_halfspace)
project_cone = _maybe_jit(_project_cone)
quad_cone_phi = _maybe_jit(_quad_cone_phi)
project_quad_cone = _maybe_jit(_project_quad_cone)
project_flow_cone = _maybe_jit(_project_flow_cone)
dykstra_local = _maybe_jit(_dykstra_local)
dr_solve = _maybe_jit(_dr_solve)

if NUMBA_ENABLED:
    # inner calls must resolve to the compiled dispatchers
    _project_box = project_box
    _project_halfspace = project_halfspace
    _project_cone = project_cone
    _quad_cone_phi = quad_cone_phi
    _project_quad_cone = project_quad_cone
    _project_flow_cone = project_flow_cone
    _dykstra_local = dykstra_local
    _dr_solve = dr_solve
