"""Dense tensor algebra for the online learner.

Tensors are plain C-ordered ``numpy.ndarray`` objects (the shape tuple is the
dims list, the flat buffer is row-major).  Mode indices are 0-based.  The
unfolding convention is the cyclic one: ``unfold(T, n)`` puts mode ``n`` on the
rows and flattens the remaining modes in their original order, which pairs
with Kronecker chains taken in descending mode order (see ``kron_chain``).
"""

import numpy as np

from .errors import ConvergenceError, DimError, LengthError, ModeError, ShapeError


def unfold(t, n):
    """Mode-n unfolding: rows = dimension n, columns = the remaining dims.

    ``fold(unfold(t, n), n, t.shape)`` is the exact inverse.
    """
    t = np.asarray(t)
    if not 0 <= n < t.ndim:
        raise ModeError(f"mode {n} out of range for order-{t.ndim} tensor")
    return np.moveaxis(t, n, 0).reshape(t.shape[n], -1)


def fold(m, n, dims):
    """Inverse of ``unfold``: rebuild the tensor with shape ``dims``."""
    dims = tuple(dims)
    if not 0 <= n < len(dims):
        raise ModeError(f"mode {n} out of range for order-{len(dims)} tensor")
    lead = (dims[n],) + dims[:n] + dims[n + 1:]
    m = np.asarray(m)
    if m.size != int(np.prod(dims)):
        raise ShapeError(f"cannot fold size-{m.size} matrix into dims {dims}")
    return np.moveaxis(m.reshape(lead), 0, n)


def mode_product(t, a, n):
    """Mode-n product t ×_n a; dimension n is replaced by ``a.shape[0]``."""
    t = np.asarray(t)
    a = np.asarray(a)
    if not 0 <= n < t.ndim:
        raise ModeError(f"mode {n} out of range for order-{t.ndim} tensor")
    if a.ndim != 2 or a.shape[1] != t.shape[n]:
        raise DimError(
            f"matrix of shape {a.shape} cannot multiply mode {n} of size {t.shape[n]}")
    new_dims = list(t.shape)
    new_dims[n] = a.shape[0]
    return fold(a @ unfold(t, n), n, new_dims)


def kron_chain(factors, skip=None):
    """Kronecker product of ``factors`` in descending mode order, optionally
    skipping one mode.

    With the unfolding convention above, a full multi-mode product satisfies
    ``unfold(t ×_0 A_0 … ×_{N-1} A_{N-1}, n) = A_n · unfold(t, n) · kron_chain(A, skip=n).T``.
    An empty chain is the 1×1 identity.
    """
    chosen = [f for i, f in enumerate(factors) if i != skip]
    out = np.ones((1, 1))
    for f in reversed(chosen):
        f = np.asarray(f)
        if f.ndim != 2:
            raise DimError("kron_chain factors must be matrices")
        out = np.kron(out, f)
    return out


def mdt(series, tau):
    """Multi-way delay embedding along the temporal (last) mode.

    A series of temporal length L becomes a Hankel block with temporal dims
    (tau, L - tau + 1): entry (..., a, b) = series(..., a + b).  Equivalent to
    applying the 0/1 duplication matrix to the last mode and folding.
    """
    series = np.asarray(series)
    L = series.shape[-1]
    if not 1 <= tau <= L:
        raise LengthError(f"embedding length {tau} invalid for series of length {L}")
    khat = L - tau + 1
    idx = np.arange(tau)[:, None] + np.arange(khat)[None, :]
    return series[..., idx]


def inverse_mdt(h, tau=None):
    """Undo ``mdt`` by averaging every Hankel cell that maps to the same
    time point (the Moore-Penrose inverse of the duplication map).

    For Hankel-consistent input this is an exact inverse.
    """
    h = np.asarray(h)
    if h.ndim < 2:
        raise ShapeError("Hankel block needs at least (tau, k_hat) dims")
    t = h.shape[-2] if tau is None else tau
    if t != h.shape[-2]:
        raise ShapeError(f"tau={tau} does not match Hankel dims {h.shape[-2:]}")
    khat = h.shape[-1]
    L = t + khat - 1
    out = np.zeros(h.shape[:-2] + (L,))
    cnt = np.zeros(L)
    for a in range(t):
        out[..., a:a + khat] += h[..., a, :]
        cnt[a:a + khat] += 1.0
    return out / cnt


def difference(seq, d):
    """d-fold finite differencing of a sequence of equally shaped tensors.

    ``integrate(difference(s, d), d, s[:d])`` recovers ``s`` exactly.
    """
    seq = [np.asarray(s) for s in seq]
    if len(seq) <= d:
        raise LengthError(f"need more than d={d} slices, got {len(seq)}")
    out = list(seq)
    for _ in range(d):
        out = [out[i + 1] - out[i] for i in range(len(out) - 1)]
    return out


def integrate(diffs, d, initial):
    """Invert ``difference``: ``initial`` holds the first d original slices."""
    if len(initial) != d:
        raise LengthError(f"need exactly d={d} initial slices, got {len(initial)}")
    out = [np.asarray(s, dtype=float) for s in diffs]
    for k in range(d - 1, -1, -1):
        # first element of the k-fold difference, from the stored heads
        cur = [np.asarray(s, dtype=float) for s in initial[:k + 1]]
        for _ in range(k):
            cur = [cur[i + 1] - cur[i] for i in range(len(cur) - 1)]
        level = [cur[0]]
        for v in out:
            level.append(level[-1] + v)
        out = level
    return out


def extend_by_difference(history, d, new_diff):
    """Given the last d undifferenced slices and a predicted d-th difference,
    return the next undifferenced slice (binomial inverse differencing)."""
    if len(history) < d:
        raise LengthError(f"need {d} trailing slices, got {len(history)}")
    out = np.array(new_diff, dtype=float, copy=True)
    from math import comb

    for j in range(1, d + 1):
        sign = -1.0 if j % 2 == 0 else 1.0
        out = out + sign * comb(d, j) * np.asarray(history[-j])
    return out


def truncated_svd(m, r):
    """Leading-r SVD triple (U, s, Vt) of a matrix."""
    try:
        u, s, vt = np.linalg.svd(np.asarray(m, dtype=float), full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"SVD failed: {exc}") from exc
    return u[:, :r], s[:r], vt[:r, :]


def procrustes_factor(c):
    """Orthogonal-factor update: U·Vᵀ from the SVD of ``c``.

    This maximizes trace(AᵀC) over matrices with orthonormal columns.
    """
    c = np.asarray(c, dtype=float)
    if not np.any(c):
        raise ConvergenceError("Procrustes update undefined for a zero matrix")
    try:
        u, _, vt = np.linalg.svd(c, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"SVD failed: {exc}") from exc
    return u @ vt


def hosvd(t, ranks):
    """Truncated higher-order SVD: returns (core, factors) with orthonormal
    factor columns, core = t ×_0 U_0ᵀ … ×_{N-1} U_{N-1}ᵀ."""
    t = np.asarray(t, dtype=float)
    if len(ranks) != t.ndim:
        raise DimError("one rank per mode required")
    factors = []
    for n in range(t.ndim):
        u, _, _ = truncated_svd(unfold(t, n), ranks[n])
        factors.append(u)
    core = t
    for n, u in enumerate(factors):
        core = mode_product(core, u.T, n)
    return core, factors
