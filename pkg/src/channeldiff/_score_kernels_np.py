"""Pure-numpy implementations of the mixture score kernels.

All three functions take the *diffused* mixture parameters for a fixed
timestep: component means `mu` (K, m), per-dimension variances `var` (K, m)
and log-weights `logw` (K,).  States `x` are batched (B, m).

This module is the fallback used when the compiled extension is missing;
`channeldiff.kernels` picks one of the two at import time.
"""

import numpy as np


def _log_resp(x, mu, var, logw):
    """Per-component log joint log w_i + log N(x; mu_i, var_i), shape (B, K)."""
    # (B, K, m) residuals; K and m are small so the temporary is cheap.
    d = x[:, None, :] - mu[None, :, :]
    ll = -0.5 * np.sum(d * d / var[None, :, :] + np.log(2.0 * np.pi * var)[None, :, :], axis=2)
    return ll + logw[None, :]


def gmm_logpdf(x, mu, var, logw):
    """Log density of the mixture at each row of x, shape (B,)."""
    lj = _log_resp(x, mu, var, logw)
    m = lj.max(axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(lj - m), axis=1, keepdims=True)))[:, 0]


def gmm_score(x, mu, var, logw):
    """Gradient of the mixture log density, shape (B, m)."""
    lj = _log_resp(x, mu, var, logw)
    m = lj.max(axis=1, keepdims=True)
    r = np.exp(lj - m)
    r /= r.sum(axis=1, keepdims=True)                      # responsibilities (B, K)
    g = -(x[:, None, :] - mu[None, :, :]) / var[None, :, :]  # component scores (B, K, m)
    return np.einsum("bk,bkm->bm", r, g)


def gmm_score_hvp(x, mu, var, logw, v):
    """Apply the Hessian of the mixture log density to v, shape (B, m).

    With component scores g_i and responsibilities r_i,

        H = sum_i r_i (diag(-1/var_i) + g_i g_i^T) - s s^T,  s = sum_i r_i g_i,

    applied without materialising the m x m matrix.
    """
    lj = _log_resp(x, mu, var, logw)
    m_ = lj.max(axis=1, keepdims=True)
    r = np.exp(lj - m_)
    r /= r.sum(axis=1, keepdims=True)
    g = -(x[:, None, :] - mu[None, :, :]) / var[None, :, :]
    s = np.einsum("bk,bkm->bm", r, g)
    gv = np.einsum("bkm,bm->bk", g, v)                     # <g_i, v>
    out = np.einsum("bk,bkm->bm", r * gv, g)
    out -= np.einsum("bk,km->bm", r, 1.0 / var) * v
    out -= s * np.einsum("bm,bm->b", s, v)[:, None]
    return out
