"""Per-agent physics-informed online tensor learner.

Each agent keeps a sliding window of the scalar channels it shares or
receives, Hankelizes the window along time, differences it, and fits a
low-rank factor model whose cores follow a scalar-coefficient ARMA recursion,
with a penalty tying reconstructions to the agent's linear power-flow rows.
All updates are closed-form: a small positive-definite solve for the cores,
a residual-mean solve for the moving-average errors, and an orthogonal
Procrustes step for the factors.  The fitted model forecasts the next
iteration's channel vector; large prediction gaps flag Byzantine data, which
is then replaced by the forecast or held at the previous value.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensorops as T
from .errors import InsufficientHistory, NumericalError, SingularMoments


@dataclass
class DetectorHyper:
    p: int = 2            # AR lags
    d: int = 2            # differencing order
    q: int = 1            # MA lags
    H: int = 10           # max fitting sweeps
    R: int = 4            # Tucker rank cap per mode
    tau: int = 4          # delay-embedding length
    xi: float = 1e-4      # relative break threshold on factor movement
    L: int = 30           # window length (iterations)
    phi: float = 0.1      # detection threshold
    lam: float = 1.0      # mitigation trust factor
    physics: bool = True  # include the spatial-relation penalty
    ma_update: str = "stationary"   # "stationary" | "paper"
    grace: int = 5        # extra warm-up iterations before flags count

    def validate(self):
        for name in ("p", "d", "q", "H", "R", "tau", "L"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a nonnegative integer")
        if self.p < 1 or self.H < 1 or self.R < 1 or self.tau < 1 or self.L < 2:
            raise ValueError("p, H, R, tau must be >= 1 and L >= 2")
        if self.xi <= 0 or self.phi <= 0 or self.lam < 0:
            raise ValueError("xi, phi must be positive and lam >= 0")
        if self.ma_update not in ("stationary", "paper"):
            raise ValueError(f"unknown ma_update {self.ma_update!r}")


@dataclass
class StreamWindow:
    signals: list          # channel labels, fixed order
    data: np.ndarray       # (n_channels, L)

    @property
    def length(self):
        return self.data.shape[1]


@dataclass(frozen=True)
class SpatialRelation:
    """W with one row per monitored channel; clean channel vectors u satisfy
    Wᵀ u = 0 (the agent's coupling rows mapped onto its channel order)."""
    w: np.ndarray          # (n_channels, n_rows)
    channels: tuple        # StackCoord per channel, received first then self


@dataclass
class DetectorModel:
    hyper: DetectorHyper
    spatial: SpatialRelation | None
    n_channels: int
    n_received: int                      # leading channels that are received
    factors: list | None = None          # [A1 (C x R1), A2 (tau x R2)]
    cores: np.ndarray | None = None      # (T_d, R1, R2) differenced cores
    errors: list = field(default_factory=list)   # q matrices (R1 x R2)
    ar_coeffs: np.ndarray | None = None
    ma_coeffs: np.ndarray | None = None
    tail: list = field(default_factory=list)     # last d undifferenced slices
    fitted: bool = False


def build_window(history, L):
    """Last L channel vectors as a (channels, L) window; oldest first."""
    if len(history) < L:
        raise InsufficientHistory(f"need {L} iterations, have {len(history)}")
    cols = history[-L:]
    return np.column_stack([np.asarray(c, float) for c in cols])


def build_spatial_relation(problem):
    """Map the agent's coupling rows onto its monitored channel order.

    Channels are the received neighbor components (parent voltage, child
    flows, partner trades -- the non-self columns of the agent's stack) in
    stack order, followed by the agent's own full vector.  Every coupling row
    is supported on these channels, so clean power-flow-consistent data are
    annihilated.
    """
    d = problem.dim
    stack = problem.stack
    channels = tuple(stack[d:]) + tuple(stack[:d])
    perm = list(range(d, len(stack))) + list(range(d))
    w = problem.coupling.T[perm, :].copy()
    return SpatialRelation(w=w, channels=channels)


def estimate_arma(series, p, q):
    """AR coefficients by (modified) Yule-Walker on sample autocovariances at
    lags q+1..q+p, averaged across entry series; MA coefficients by least
    squares on the AR residual innovations.

    ``series`` is (T,) or (T, E); entries act as replicates.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    tn = x.shape[0]
    if tn < p + q + 1:
        raise InsufficientHistory(f"series length {tn} < p+q+1 = {p + q + 1}")
    x = x - x.mean(axis=0, keepdims=True)
    maxlag = p + q
    gam = np.empty(maxlag + 1)
    for ell in range(maxlag + 1):
        gam[ell] = float(np.mean(np.sum(x[:tn - ell] * x[ell:], axis=0)) / tn)
    scale = gam[0]
    if scale <= 1e-300:
        return np.zeros(p), np.zeros(q)
    if p > 0:
        gmat = np.empty((p, p))
        for i in range(p):
            for j in range(p):
                gmat[i, j] = gam[abs(q + i - j)]
        rhs = np.array([gam[q + 1 + i] for i in range(p)])
        sv = np.linalg.svd(gmat, compute_uv=False)
        if sv.min() <= 1e-12 * max(sv.max(), scale):
            raise SingularMoments("autocovariance system is rank deficient")
        psi = np.linalg.solve(gmat, rhs)
    else:
        psi = np.zeros(0)
    theta = np.zeros(q)
    if q > 0:
        resid = x[p:].copy()
        for m in range(1, p + 1):
            resid -= psi[m - 1] * x[p - m:tn - m]
        rt = resid.shape[0]
        if rt > q:
            y = resid[q:].reshape(-1)
            cols = [(-resid[q - m:rt - m]).reshape(-1) for m in range(1, q + 1)]
            design = np.column_stack(cols)
            theta, *_ = np.linalg.lstsq(design, y, rcond=None)
    if not (np.all(np.isfinite(psi)) and np.all(np.isfinite(theta))):
        raise SingularMoments("non-finite ARMA coefficients")
    return psi, theta


def _init_factors(diffs, r1, r2):
    td, c, tau = diffs.shape
    if not np.any(diffs):
        return [np.eye(c)[:, :r1], np.eye(tau)[:, :r2]]
    m0 = np.moveaxis(diffs, 0, 2).reshape(c, -1)
    m1 = np.moveaxis(diffs, 0, 2).transpose(1, 0, 2).reshape(tau, -1)
    u0, _, _ = T.truncated_svd(m0, r1)
    u1, _, _ = T.truncated_svd(m1, r2)
    a1 = np.zeros((c, r1))
    a1[:, :u0.shape[1]] = u0
    for k in range(u0.shape[1], r1):
        a1[k % c, k] = 1.0
    a2 = np.zeros((tau, r2))
    a2[:, :u1.shape[1]] = u1
    for k in range(u1.shape[1], r2):
        a2[k % tau, k] = 1.0
    # re-orthonormalize in case of padded columns
    a1, _ = np.linalg.qr(a1)
    a2, _ = np.linalg.qr(a2)
    return [a1, a2]


def _arma_term(cores, eps, psi, theta, t):
    f = np.zeros_like(cores[t])
    for m in range(1, psi.shape[0] + 1):
        f += psi[m - 1] * cores[t - m]
    for m in range(1, theta.shape[0] + 1):
        f -= theta[m - 1] * eps[m - 1]
    return f


def fit_update(model, window):
    """One online fitting pass over a full window (the inner sweep loop).

    Runs at most ``H`` sweeps of: core projection, Yule-Walker coefficient
    estimation, then per mode the closed-form core solve, the residual-mean
    error update, and the Procrustes factor update; stops early when the
    factors move less than the ``xi`` fraction.  Returns the updated model.
    """
    hyper = model.hyper
    hyper.validate()
    data = np.asarray(window.data, dtype=float)
    c, length = data.shape
    if length < hyper.L:
        raise InsufficientHistory(f"window length {length} < L = {hyper.L}")
    h3 = T.mdt(data, hyper.tau)                       # (C, tau, khat)
    khat = h3.shape[-1]
    slices = np.moveaxis(h3, 2, 0)                    # (khat, C, tau)
    td = khat - hyper.d
    t0 = hyper.p + hyper.q
    if td - t0 < 1:
        raise InsufficientHistory(
            f"embedded length {khat} too short for (p,d,q)=({hyper.p},"
            f"{hyper.d},{hyper.q})")
    diffs = slices.copy()
    for _ in range(hyper.d):
        diffs = diffs[1:] - diffs[:-1]                # (td, C, tau)

    r1 = min(hyper.R, c)
    r2 = min(hyper.R, hyper.tau)
    if model.factors is None:
        model.factors = _init_factors(diffs, r1, r2)
    a1, a2 = model.factors
    psi = model.ar_coeffs if model.ar_coeffs is not None else np.zeros(hyper.p)
    theta = model.ma_coeffs if model.ma_coeffs is not None else np.zeros(hyper.q)
    eps = list(model.errors) if model.errors else [
        np.zeros((r1, r2)) for _ in range(hyper.q)]

    w = None
    if hyper.physics and model.spatial is not None and model.spatial.w.size:
        w = model.spatial.w

    cores = np.matmul(np.matmul(a1.T[None], diffs), a2)
    for _ in range(hyper.H):
        a1_old, a2_old = a1, a2
        cores = np.matmul(np.matmul(a1.T[None], diffs), a2)
        try:
            psi, theta = estimate_arma(cores.reshape(td, -1), hyper.p, hyper.q)
        except SingularMoments:
            pass  # keep previous coefficients on a degenerate sweep

        for mode in (0, 1):
            if w is not None:
                b = a1.T @ w
                smat = 2.0 * np.eye(r1) + b @ b.T
            else:
                smat = 2.0 * np.eye(r1)
            if not np.all(np.isfinite(smat)):
                raise NumericalError("non-finite core system")
            sinv = np.linalg.inv(smat)
            proj = np.matmul(np.matmul(a1.T[None], diffs), a2)
            for t in range(t0, td):
                rhs = proj[t] + _arma_term(cores, eps, psi, theta, t)
                cores[t] = sinv @ rhs

            if hyper.q > 0:
                resid_sum = np.zeros((r1, r2))
                for t in range(t0, td):
                    resid_sum += cores[t] - _arma_term(cores, eps, psi, theta, t) \
                        - sum(theta[m] * eps[m] for m in range(hyper.q))
                kcount = td - t0
                if hyper.ma_update == "stationary":
                    denom = float(theta @ theta)
                    if denom > 1e-30:
                        for m in range(hyper.q):
                            eps[m] = -theta[m] * resid_sum / (kcount * denom)
                else:
                    # verbatim closed form; prefactor (p+q+d+1-khat) is negative
                    full = resid_sum + kcount * sum(
                        theta[m] * eps[m] for m in range(hyper.q))
                    pref = hyper.p + hyper.q + hyper.d + 1 - (td)
                    for m in range(hyper.q):
                        if abs(theta[m]) > 1e-30 and pref != 0:
                            eps[m] = full / (pref * theta[m])

            if mode == 0:
                cmat = np.zeros((c, r1))
                for t in range(t0, td):
                    cmat += diffs[t] @ a2 @ cores[t].T
                if np.linalg.norm(cmat) > 1e-30:
                    a1 = T.procrustes_factor(cmat)
            else:
                cmat = np.zeros((hyper.tau, r2))
                for t in range(t0, td):
                    cmat += diffs[t].T @ a1 @ cores[t]
                if np.linalg.norm(cmat) > 1e-30:
                    a2 = T.procrustes_factor(cmat)

        move = np.linalg.norm(a1 - a1_old) ** 2 + np.linalg.norm(a2 - a2_old) ** 2
        base = np.linalg.norm(a1_old) ** 2 + np.linalg.norm(a2_old) ** 2
        if move <= hyper.xi * base:
            break

    model.factors = [a1, a2]
    model.cores = cores
    model.errors = eps
    model.ar_coeffs = psi
    model.ma_coeffs = theta
    model.tail = [slices[k] for k in range(khat - hyper.d, khat)]
    model.fitted = True
    return model


def fit_objective(model, window):
    """Value of the fitting objective at the model's current state (all three
    terms, summed over modes and the fitted time range)."""
    hyper = model.hyper
    data = np.asarray(window.data, dtype=float)
    h3 = T.mdt(data, hyper.tau)
    slices = np.moveaxis(h3, 2, 0)
    diffs = slices.copy()
    for _ in range(hyper.d):
        diffs = diffs[1:] - diffs[:-1]
    td = diffs.shape[0]
    t0 = hyper.p + hyper.q
    a1, a2 = model.factors
    cores = model.cores
    psi, theta, eps = model.ar_coeffs, model.ma_coeffs, model.errors
    b = None
    if hyper.physics and model.spatial is not None and model.spatial.w.size:
        b = a1.T @ model.spatial.w
    total = 0.0
    for t in range(t0, td):
        p_t = a1.T @ diffs[t] @ a2
        f_t = _arma_term(cores, eps, psi, theta, t)
        t1 = 0.5 * np.linalg.norm(cores[t] - p_t) ** 2
        t2 = 0.5 * np.linalg.norm(cores[t] - f_t) ** 2
        t3 = 0.5 * np.linalg.norm(b.T @ cores[t]) ** 2 if b is not None else 0.0
        total += 2.0 * (t1 + t2) + 2.0 * t3
    return float(total)


def forecast(model):
    """One-step-ahead prediction of the full channel vector.

    AR-minus-MA recursion on the cores, reconstruction through the factors,
    inverse differencing against the stored window tail; the new time point
    is the trailing column of the extended Hankel slice.
    """
    if not model.fitted:
        raise InsufficientHistory("model not fitted")
    hyper = model.hyper
    a1, a2 = model.factors
    cores = model.cores
    td = cores.shape[0]
    g_next = np.zeros_like(cores[0])
    for m in range(1, hyper.p + 1):
        if td - m >= 0:
            g_next += model.ar_coeffs[m - 1] * cores[td - m]
    for m in range(1, hyper.q + 1):
        g_next -= model.ma_coeffs[m - 1] * model.errors[m - 1]
    xdiff = a1 @ g_next @ a2.T
    xnext = T.extend_by_difference(model.tail, hyper.d, xdiff)
    return xnext[:, -1]


def detect(received, predicted, phi):
    """0 when the prediction gap is within phi, 1 otherwise."""
    gap = float(np.linalg.norm(np.asarray(received, float)
                               - np.asarray(predicted, float)))
    return 0 if gap <= phi else 1


@dataclass(frozen=True)
class DetectionOutcome:
    gamma: int
    chosen: np.ndarray
    source: str   # "received" | "predicted" | "held"


def mitigate(predicted, previous, before_previous, lam):
    """Substitution rule once an anomaly is flagged: trust the forecast when
    it moved no more than lam times the last step, else hold the previous
    value."""
    predicted = np.asarray(predicted, float)
    previous = np.asarray(previous, float)
    before_previous = np.asarray(before_previous, float)
    if np.linalg.norm(predicted - previous) <= lam * np.linalg.norm(
            previous - before_previous):
        return DetectionOutcome(gamma=1, chosen=predicted, source="predicted")
    return DetectionOutcome(gamma=1, chosen=previous.copy(), source="held")
