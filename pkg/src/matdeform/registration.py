"""
Area-weighted Gaussian mixture registration solved by EM.

Scan points ``y`` (m, D) are mixture centroids that drift toward the design
points ``X`` (N, D). Centroid ``j`` has mixing weight ``w~_j / m`` and
isotropic variance ``w~_j * sigma2``; a uniform component of mass ``w``
absorbs outliers. The displacement is a Gaussian-kernel expansion
``T = y + G V`` regularized by ``(lambda/2) tr(V^T G V)``.

With all weights equal to one this is non-rigid coherent point drift.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from . import kernels

log = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    """Numerical failure inside the EM loop."""


@dataclass(frozen=True)
class GmmConfig:
    w: float = 0.0
    beta: float = 3.0
    lam: float = 2.0
    max_iters: int = 150
    tol: float = 1e-6
    sigma2_floor: Optional[float] = None  # None: 1e-10 * squared diameter
    weight_mode: str = "area"

    def __post_init__(self):
        if not 0.0 <= self.w < 1.0:
            raise ValueError("w must lie in [0, 1)")
        if self.beta <= 0 or self.lam <= 0 or self.tol <= 0:
            raise ValueError("beta, lam and tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.sigma2_floor is not None and self.sigma2_floor <= 0:
            raise ValueError("sigma2_floor must be positive")
        if self.weight_mode not in ("equal", "area"):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")


@dataclass
class RegistrationState:
    V: np.ndarray
    G: np.ndarray
    sigma2: float
    P_tilde: np.ndarray
    Np: float
    T: np.ndarray
    objective: float
    iter: int


@dataclass
class RegistrationResult:
    T: np.ndarray
    displacements: np.ndarray  # T - y
    V: np.ndarray
    sigma2: float
    iterations: int
    converged: bool
    objective_trace: list = field(default_factory=list)
    sigma2_trace: list = field(default_factory=list)

    def write_trace(self, path) -> None:
        """CSV with columns ``iter,sigma2,objective``."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iter", "sigma2", "objective"])
            for k, (s2, obj) in enumerate(zip(self.sigma2_trace, self.objective_trace)):
                wr.writerow([k, repr(float(s2)), repr(float(obj))])


def _as_points(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or len(a) == 0:
        raise ValueError(f"{name} must be a non-empty (n, D) array")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return a


def gaussian_kernel(y, beta: float) -> np.ndarray:
    """``G[i, j] = exp(-|y_i - y_j|^2 / (2 beta^2))``."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return kernels.gaussian_kernel(_as_points(y, "y"), float(beta))


def init_sigma2(X, y) -> float:
    """Mean squared cross distance divided by D."""
    X = _as_points(X, "X")
    y = _as_points(y, "y")
    N, D = X.shape
    m = len(y)
    # sum_ij |y_j - X_i|^2 = N sum_j |y_j - Xbar|^2 + m sum_i |X_i - Xbar|^2
    xbar = X.mean(axis=0)
    total = N * np.sum((y - xbar) ** 2) + m * np.sum((X - xbar) ** 2)
    return float(total) / (D * N * m)


def _component_terms(w_tilde, sigma2, D):
    w_tilde = np.asarray(w_tilde, dtype=np.float64)
    log_coef = (1.0 - D / 2.0) * np.log(w_tilde)
    inv2var = 1.0 / (2.0 * w_tilde * sigma2)
    return log_coef, inv2var


def _log_outlier_mass(w, sigma2, D, m, N):
    if w <= 0:
        return -math.inf
    return (D / 2.0) * math.log(2.0 * math.pi * sigma2) + math.log(w / (1.0 - w)) + math.log(m / N)


def _posterior(X, T, sigma2, w_tilde, w):
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    N, D = X.shape
    m = len(T)
    log_coef, inv2var = _component_terms(w_tilde, sigma2, D)
    return kernels.estep(X, T, log_coef, inv2var, _log_outlier_mass(w, sigma2, D, m, N))


def e_step(X, y, V, G, sigma2, w_tilde, w):
    """Responsibilities ``P`` (m, N) and ``P_tilde = P / w~`` (row-scaled)."""
    X = _as_points(X, "X")
    y = _as_points(y, "y")
    T = y + G @ V
    P, _ = _posterior(X, T, sigma2, w_tilde, w)
    return P, P / np.asarray(w_tilde, dtype=np.float64)[:, None]


def m_step_solve_V(P_tilde, G, X, y, sigma2, lam):
    """Solve ``[d(P~1) G + lam sigma2 I] V = P~ X - d(P~1) y``."""
    if sigma2 <= 0 or lam <= 0:
        raise ValueError("sigma2 and lam must be positive")
    X = _as_points(X, "X")
    y = _as_points(y, "y")
    row = P_tilde.sum(axis=1)
    A = row[:, None] * G
    A[np.diag_indices_from(A)] += lam * sigma2
    rhs = P_tilde @ X - row[:, None] * y
    try:
        with np.errstate(all="raise"):
            V = scipy.linalg.solve(A, rhs, check_finite=True)
    except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        cond = np.linalg.cond(A) if np.all(np.isfinite(A)) else math.inf
        raise RegistrationError(f"M-step solve failed (condition estimate {cond:.3e}): {exc}") from exc
    if not np.all(np.isfinite(V)):
        raise RegistrationError(f"M-step produced non-finite V (condition estimate {np.linalg.cond(A):.3e})")
    return V


def update_sigma2(P_tilde, X, T, Np=None, sigma2_floor=0.0):
    """Variance update from weighted residuals.

    ``sigma2 = [tr(X^T d(P~^T 1) X) - 2 tr((P~X)^T T) + tr(T^T d(P~1) T)] / (Np D)``.
    ``Np`` defaults to the total mass of ``P_tilde``; the EM driver passes
    the mass of the unweighted responsibilities instead.
    """
    X = _as_points(X, "X")
    T = _as_points(T, "T")
    if Np is None:
        Np = float(P_tilde.sum())
    if not Np > 0:
        raise RegistrationError("responsibility mass is zero (all data assigned to the outlier component)")
    D = X.shape[1]
    col = P_tilde.sum(axis=0)
    row = P_tilde.sum(axis=1)
    s = np.sum(col * np.sum(X * X, axis=1)) - 2.0 * np.sum((P_tilde @ X) * T) + np.sum(row * np.sum(T * T, axis=1))
    return max(float(s) / (Np * D), sigma2_floor)


def objective(X, y, V, G, sigma2, w_tilde, w, lam):
    """Penalized negative log marginal likelihood.

    ``-sum_i log p(X_i) + (lam/2) tr(V^T G V)`` with ``p`` the weighted
    mixture density plus the uniform term ``w / N``.
    """
    X = _as_points(X, "X")
    y = _as_points(y, "y")
    T = y + G @ V
    _, lse = _posterior(X, T, sigma2, w_tilde, w)
    return _objective_from_lse(lse, X.shape[1], len(y), sigma2, w, lam, V, G)


def _objective_from_lse(lse, D, m, sigma2, w, lam, V, G):
    log_pref = math.log1p(-w) - math.log(m) - (D / 2.0) * math.log(2.0 * math.pi * sigma2)
    nll = -(len(lse) * log_pref + float(np.sum(lse)))
    return nll + 0.5 * lam * float(np.sum(V * (G @ V)))


def eval_gmm_density(y, w_tilde, sigma2, w, query, n_data=None):
    """Mixture density ``p(q)`` at each query point.

    The uniform term is ``w / n_data`` (``n_data`` defaults to the number
    of queries); with ``w = 0`` the density integrates to one.
    """
    y = _as_points(y, "y")
    q = _as_points(query, "query")
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    m, D = y.shape
    wt = np.ones(m) if w_tilde is None else np.asarray(w_tilde, dtype=np.float64)
    log_coef, inv2var = _component_terms(wt, sigma2, D)
    gauss = kernels.mixture_density(q, y, log_coef, inv2var)
    gauss *= (1.0 - w) / m * (2.0 * math.pi * sigma2) ** (-D / 2.0)
    if w > 0:
        gauss += w / (n_data if n_data else len(q))
    return gauss


def point_set_diameter(*sets) -> float:
    pts = np.vstack([_as_points(s, "points") for s in sets])
    return float(np.linalg.norm(np.ptp(pts, axis=0)))


def register(X, y, w_tilde=None, config: GmmConfig = GmmConfig(), callback=None) -> RegistrationResult:
    """Drift centroids ``y`` onto data ``X`` by EM.

    Starts from ``V = 0`` and the mean-square cross distance; each iteration
    runs the E-step, solves for ``V`` and then updates ``sigma2``. Stops when
    the relative change of the objective falls below ``config.tol`` or after
    ``config.max_iters`` iterations.
    """
    X = _as_points(X, "X")
    y = _as_points(y, "y")
    if X.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: X has D={X.shape[1]}, y has D={y.shape[1]}")
    m, D = y.shape
    if config.weight_mode == "equal" or w_tilde is None:
        if config.weight_mode == "area":
            raise ValueError("weight_mode='area' requires w_tilde")
        w_tilde = np.ones(m)
    else:
        w_tilde = np.asarray(w_tilde, dtype=np.float64)
        if w_tilde.shape != (m,):
            raise ValueError(f"w_tilde must have length {m}")
        if np.any(w_tilde <= 0) or not np.all(np.isfinite(w_tilde)):
            raise ValueError("w_tilde must be finite and positive")

    floor = config.sigma2_floor
    if floor is None:
        floor = 1e-10 * max(point_set_diameter(X, y) ** 2, np.finfo(float).tiny)

    G = gaussian_kernel(y, config.beta)
    V = np.zeros_like(y)
    T = y.copy()
    sigma2 = max(init_sigma2(X, y), floor)

    P, lse = _posterior(X, T, sigma2, w_tilde, config.w)
    obj = _objective_from_lse(lse, D, m, sigma2, config.w, config.lam, V, G)
    trace, s2trace = [obj], [sigma2]
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        P_tilde = P / w_tilde[:, None]
        V = m_step_solve_V(P_tilde, G, X, y, sigma2, config.lam)
        T = y + G @ V
        Np = float(P.sum())
        sigma2 = update_sigma2(P_tilde, X, T, Np=Np, sigma2_floor=floor)

        P, lse = _posterior(X, T, sigma2, w_tilde, config.w)
        new_obj = _objective_from_lse(lse, D, m, sigma2, config.w, config.lam, V, G)
        if not math.isfinite(new_obj):
            raise RegistrationError(f"non-finite objective at iteration {it}")
        trace.append(new_obj)
        s2trace.append(sigma2)
        if callback is not None:
            callback(RegistrationState(V, G, sigma2, P_tilde, Np, T, new_obj, it))
        change = abs(obj - new_obj) / max(abs(obj), 1e-300)
        obj = new_obj
        if change < config.tol:
            converged = True
            break
    log.debug("registration: %d iterations, sigma2=%.3e, converged=%s", it, sigma2, converged)
    return RegistrationResult(
        T=T,
        displacements=T - y,
        V=V,
        sigma2=sigma2,
        iterations=it,
        converged=converged,
        objective_trace=trace,
        sigma2_trace=s2trace,
    )
