"""Pure numpy implementations of the hot kernels (import-time fallback)."""

import numpy as np


def _sqdist(A, B):
    # summed per coordinate to keep the same operation order as the compiled path
    out = np.zeros((A.shape[0], B.shape[0]))
    for d in range(A.shape[1]):
        diff = A[:, d, None] - B[None, :, d]
        out += diff * diff
    return out


def gaussian_kernel(y, beta):
    y = np.ascontiguousarray(y, dtype=np.float64)
    return np.exp(_sqdist(y, y) * (-0.5 / (beta * beta)))


def estep(X, T, log_coef, inv2var, log_c):
    """Mixture responsibilities of centroids ``T`` for data ``X``.

    Component exponent ``a[j, i] = log_coef[j] - |X_i - T_j|^2 * inv2var[j]``.
    ``log_c`` is the log of the extra (outlier) mass added to every column's
    normalizer; pass ``-inf`` for none.

    Returns ``P`` (m, N) and the per-column log normalizer (N,).
    """
    a = log_coef[:, None] - _sqdist(T, X) * inv2var[:, None]
    amax = a.max(axis=0)
    lse = amax + np.log(np.exp(a - amax).sum(axis=0))
    if np.isfinite(log_c):
        lse = np.logaddexp(lse, log_c)
    P = np.exp(a - lse)
    return P, lse


def mixture_density(Q, C, log_coef, inv2var):
    """sum_j exp(log_coef[j] - |q - C_j|^2 * inv2var[j]) for every query row."""
    a = log_coef[:, None] - _sqdist(C, Q) * inv2var[:, None]
    return np.exp(a).sum(axis=0)
