"""Pure numpy Sinkhorn iterations, used when the compiled kernel is unavailable."""

import numpy as np
from scipy.special import logsumexp


def sinkhorn_log_batch(logP, logQ, C, eps, max_iter, tol):
    """Vectorised twin of ``_kernels.sinkhorn_log_batch``.

    Problems are advanced in lockstep; each one is frozen as soon as its
    marginal error drops below ``tol`` so iteration counts match the
    compiled kernel problem by problem.
    """
    m, n = logP.shape
    f = np.zeros((m, n))
    g = np.zeros((m, n))
    n_iter = np.zeros(m, dtype=np.int64)
    err = np.full(m, np.inf)
    active = np.ones(m, dtype=bool)
    P = np.exp(logP)
    inv_eps = 1.0 / eps

    def f_update(idx):
        z = logQ[idx, None, :] + (g[idx, None, :] - C[idx]) * inv_eps
        return -eps * logsumexp(z, axis=2)

    for it in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        fnew = f_update(idx)
        if it > 0:
            e = np.abs(np.exp(logP[idx] + (f[idx] - fnew) * inv_eps) - P[idx]).sum(axis=1)
            err[idx] = e
            done = e <= tol
            active[idx[done]] = False
            keep = ~done
            idx, fnew = idx[keep], fnew[keep]
            if idx.size == 0:
                break
        f[idx] = fnew
        z = logP[idx, :, None] + (f[idx, :, None] - C[idx]) * inv_eps
        g[idx] = -eps * logsumexp(z, axis=1)
        n_iter[idx] = it + 1
    idx = np.flatnonzero(active)
    if idx.size:
        fnew = f_update(idx)
        err[idx] = np.abs(np.exp(logP[idx] + (f[idx] - fnew) * inv_eps) - P[idx]).sum(axis=1)
    return f, g, n_iter, err


def sinkhorn_scaling(P, Q, C, eps, max_iter, tol):
    """Classic multiplicative Sinkhorn on a single problem.

    Kept as a cross-check of the log-domain path at large ``eps``; it
    underflows for small ``eps``. Returns ``(f, g, n_iter, err)`` in the
    same potential convention as the log-domain solvers.
    """
    K = np.exp(-C / eps)
    u = np.ones_like(P)
    v = np.ones_like(Q)
    err = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        u = 1.0 / (K @ (Q * v))
        v = 1.0 / (K.T @ (P * u))
        err = np.abs(P * u * (K @ (Q * v)) - P).sum()
        if err <= tol:
            break
    with np.errstate(divide="ignore"):
        return eps * np.log(u), eps * np.log(v), it, err
