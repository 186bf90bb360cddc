"""Compiled kernels for negative-log Gaussian-mixture potentials.

All components share the variance ``s2`` and the means sit on the uniform grid
``mu0 + i * delta``.  Writing the mixture log-terms as

    a_i(t) = -t**2 / (2 s2) + t * mu_i / s2 + b_i,   b_i = log w_i - mu_i**2 / (2 s2)

makes ``a_i - a_j`` affine in ``i - j``, so after locating the largest term the
shifted exponentials ``exp(a_i - a_max)`` follow from one ``exp`` per response
and a running product with precomputed ratios ``exp(b_{i+1} - b_i)``.  Every
shifted exponential is <= 1, so nothing overflows.

The largest term maximizes ``i * g + b_i`` over ``i``, which is attained at a
vertex of the upper concave hull of the points ``(i, b_i)``; the hull is built
once per call and searched by bisection on its edge slopes.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _upper_hull(b):
    """Vertices of the upper concave hull of ``(i, b_i)`` and the slopes of its edges."""
    K = b.shape[0]
    idx = np.empty(K, dtype=np.int64)
    m = 0
    for i in range(K):
        # pop while the last vertex lies on or below the chord to the new point
        while m >= 2:
            i0 = idx[m - 2]
            i1 = idx[m - 1]
            if (b[i1] - b[i0]) * (i - i0) <= (b[i] - b[i0]) * (i1 - i0):
                m -= 1
            else:
                break
        idx[m] = i
        m += 1
    verts = idx[:m].copy()
    slopes = np.empty(m - 1)
    for k in range(m - 1):
        slopes[k] = (b[verts[k + 1]] - b[verts[k]]) / (verts[k + 1] - verts[k])
    return verts, slopes


@njit(cache=True)
def _argmax_term(g, b, verts, slopes):
    # first hull edge along which i * g + b_i stops increasing
    lo = 0
    hi = slopes.shape[0]
    while lo < hi:
        mid = (lo + hi) // 2
        if slopes[mid] + g > 0.0:
            lo = mid + 1
        else:
            hi = mid
    best = verts[lo]
    return best, best * g + b[best]


@njit(cache=True)
def gmm_eval(t, b, ratio, mu0, delta, s2):
    """Return ``(phi, dphi, ddphi, mbar)`` for every response in the flat array ``t``.

    ``mbar`` is the responsibility-weighted mean of the component means.
    """
    n = t.shape[0]
    K = b.shape[0]
    phi = np.empty(n)
    d1 = np.empty(n)
    d2 = np.empty(n)
    mbar = np.empty(n)
    verts, slopes = _upper_hull(b)
    for p in range(n):
        tp = t[p]
        g = tp * delta / s2
        best, bv = _argmax_term(g, b, verts, slopes)
        G = np.exp(g)
        Ginv = np.exp(-g)
        m = mu0 + best * delta
        S = 1.0
        S1 = m
        S2 = m * m
        e = 1.0
        for i in range(best, K - 1):
            e *= G * ratio[i]
            m = mu0 + (i + 1) * delta
            S += e
            S1 += e * m
            S2 += e * m * m
        e = 1.0
        for i in range(best - 1, -1, -1):
            e *= Ginv / ratio[i]
            m = mu0 + i * delta
            S += e
            S1 += e * m
            S2 += e * m * m
        amax = -tp * tp / (2.0 * s2) + tp * mu0 / s2 + bv
        phi[p] = -(amax + np.log(S))
        mb = S1 / S
        var = S2 / S - mb * mb
        if var < 0.0:
            var = 0.0
        mbar[p] = mb
        d1[p] = (tp - mb) / s2
        d2[p] = (1.0 - var / s2) / s2
    return phi, d1, d2, mbar


@njit(cache=True)
def gmm_weight_adjoint(t, c_phi, c_d1, b, ratio, mu0, delta, s2):
    """Accumulate ``sum_p c_phi[p] * dphi_p/dw_i + c_d1[p] * d(dphi_p)/dw_i``, times ``w_i``.

    The caller divides by the weights.  Uses ``dphi/dw_i = -r_i / w_i`` and
    ``d(dphi)/dw_i = -r_i (mu_i - mbar) / (s2 w_i)`` with responsibilities ``r``.
    Accumulation runs in index order, so results are reproducible.
    """
    n = t.shape[0]
    K = b.shape[0]
    acc = np.zeros(K)
    r = np.empty(K)
    verts, slopes = _upper_hull(b)
    for p in range(n):
        cp = c_phi[p]
        cd = c_d1[p]
        if cp == 0.0 and cd == 0.0:
            continue
        tp = t[p]
        g = tp * delta / s2
        best, bv = _argmax_term(g, b, verts, slopes)
        G = np.exp(g)
        Ginv = np.exp(-g)
        for i in range(K):
            r[i] = 0.0
        r[best] = 1.0
        S = 1.0
        e = 1.0
        for i in range(best, K - 1):
            e *= G * ratio[i]
            r[i + 1] = e
            S += e
        e = 1.0
        for i in range(best - 1, -1, -1):
            e *= Ginv / ratio[i]
            r[i] = e
            S += e
        mb = 0.0
        for i in range(K):
            r[i] /= S
            mb += r[i] * (mu0 + i * delta)
        for i in range(K):
            m = mu0 + i * delta
            acc[i] -= r[i] * (cp + cd * (m - mb) / s2)
    return acc


# Dense fallbacks, used when neighbouring log-weights differ so much that the
# ratio recurrence could overflow.  Memory is O(n * K).

def gmm_eval_dense(t, log_w, mu, s2):
    a = log_w[None, :] - (t[:, None] - mu[None, :]) ** 2 / (2.0 * s2)
    amax = a.max(axis=1, keepdims=True)
    e = np.exp(a - amax)
    S = e.sum(axis=1)
    r = e / S[:, None]
    mb = r @ mu
    var = np.maximum(r @ (mu * mu) - mb * mb, 0.0)
    phi = -(amax[:, 0] + np.log(S))
    return phi, (t - mb) / s2, (1.0 - var / s2) / s2, mb


def gmm_weight_adjoint_dense(t, c_phi, c_d1, log_w, mu, s2):
    a = log_w[None, :] - (t[:, None] - mu[None, :]) ** 2 / (2.0 * s2)
    e = np.exp(a - a.max(axis=1, keepdims=True))
    r = e / e.sum(axis=1, keepdims=True)
    mb = r @ mu
    coef = c_phi[:, None] + c_d1[:, None] * (mu[None, :] - mb[:, None]) / s2
    return -(r * coef).sum(axis=0)
