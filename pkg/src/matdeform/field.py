"""
Displacement fields sampled at scattered points: outlier rejection with a
normalized median test and interpolation at arbitrary query points.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class DisplacementField:
    samples: np.ndarray  # (m, D) positions
    vectors: np.ndarray  # (m, D) displacements
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        v = np.asarray(self.vectors, dtype=np.float64)
        if s.ndim != 2 or s.shape != v.shape:
            raise ValueError(f"samples {s.shape} and vectors {v.shape} must be equal (m, D) arrays")
        valid = np.ones(len(s), dtype=bool) if self.valid is None else np.asarray(self.valid, dtype=bool)
        if valid.shape != (len(s),):
            raise ValueError("valid mask length must match sample count")
        if not valid.any():
            raise ValueError("displacement field has no valid samples")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "valid", valid)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def with_valid(self, valid) -> "DisplacementField":
        return DisplacementField(self.samples, self.vectors, valid)

    def negated(self) -> "DisplacementField":
        return DisplacementField(self.samples, -self.vectors, self.valid)

    def to_csv(self, path) -> None:
        """Columns ``x,y[,z],ux,uy[,uz],valid``."""
        axes = "xyz"[: self.dim]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(list(axes) + ["u" + a for a in axes] + ["valid"])
            for p, u, ok in zip(self.samples, self.vectors, self.valid):
                wr.writerow([repr(float(c)) for c in p] + [repr(float(c)) for c in u] + [int(ok)])

    @classmethod
    def from_csv(cls, path) -> "DisplacementField":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], np.array(rows[1:], dtype=np.float64)
        D = (len(head) - 1) // 2
        return cls(body[:, :D], body[:, D : 2 * D], body[:, 2 * D].astype(bool))


class NeighborIndex:
    """Exact k-nearest-neighbour queries with a deterministic tie rule.

    Results come in nondecreasing distance order; equal distances are
    ordered by lower sample index.
    """

    def __init__(self, points):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or len(pts) == 0:
            raise ValueError("NeighborIndex needs at least one point")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self):
        return len(self.points)

    def _dist(self, q, idx):
        diff = self.points[idx] - q[:, None, :]
        return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))

    def query(self, queries, k: int):
        """Return ``(distances, indices)``, each (n_queries, min(k, len(self)))."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        n = len(self.points)
        kk = min(int(k), n)
        if kk < 1:
            raise ValueError("k must be >= 1")
        extra = min(kk + 1, n)
        _, idx = self._tree.query(q, k=extra)
        idx = np.asarray(idx).reshape(len(q), extra)
        d = self._dist(q, idx)
        order = np.lexsort((idx, d), axis=1)
        idx = np.take_along_axis(idx, order, axis=1)
        d = np.take_along_axis(d, order, axis=1)
        if extra > kk:
            # a tie reaching the last candidate may hide equal-distance points
            # outside the candidate set: resolve those rows by brute force
            suspect = np.flatnonzero(d[:, kk - 1] >= d[:, extra - 1])
            for r in suspect:
                allidx = np.arange(n)
                dr = self._dist(q[r : r + 1], allidx[None, :])[0]
                o = np.lexsort((allidx, dr))[:extra]
                idx[r], d[r] = o, dr[o]
        return d[:, :kk], idx[:, :kk]


def median_nn_spacing(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return 0.0
    d, _ = cKDTree(pts).query(pts, k=2)
    return float(np.median(d[:, 1]))


def _lower_median(a, axis=-1):
    n = a.shape[axis]
    return np.take(np.sort(a, axis=axis), (n - 1) // 2, axis=axis)


def _neighbors_excluding_self(index: NeighborIndex, k: int):
    d, idx = index.query(index.points, k + 1)
    own = np.arange(len(index))[:, None]
    is_self = idx == own
    # rows where self is not among the k+1 (coincident duplicates): drop the last
    drop = np.where(is_self.any(axis=1), is_self.argmax(axis=1), k)
    keep = np.ones_like(idx, dtype=bool)
    keep[np.arange(len(idx)), drop] = False
    return d[keep].reshape(len(idx), k), idx[keep].reshape(len(idx), k)


def normalized_residuals(field: DisplacementField, k: int = 9, eps_a: Optional[float] = None):
    """Normalized median residual of every valid sample, per component.

    For a sample with value ``U0`` and neighbours ``U_i`` at distances ``d_i``::

        r = |U0 / (med d + e) - med(U_i / (d_i + e))|
            / (med |U_i / (d_i + e) - med(U_i / (d_i + e))| + e)

    Returns an (m, D) array; rows of invalid samples are NaN.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    sel = np.flatnonzero(field.valid)
    if len(sel) < k + 1:
        raise ValueError(f"outlier test needs at least k+1={k + 1} valid samples, got {len(sel)}")
    pts = field.samples[sel]
    vec = field.vectors[sel]
    if eps_a is None:
        eps_a = default_eps_a(pts)
    if eps_a <= 0:
        raise ValueError("eps_a must be positive")
    index = NeighborIndex(pts)
    d, nb = _neighbors_excluding_self(index, k)
    med_d = _lower_median(d, axis=1)  # (n,)
    U = vec[nb]  # (n, k, D)
    ratio = U / (d[:, :, None] + eps_a)
    med_ratio = _lower_median(ratio, axis=1)  # (n, D)
    num = np.abs(vec / (med_d[:, None] + eps_a) - med_ratio)
    den = _lower_median(np.abs(ratio - med_ratio[:, None, :]), axis=1) + eps_a
    out = np.full(field.vectors.shape, np.nan)
    out[sel] = num / den
    return out


def default_eps_a(points) -> float:
    """0.1 x median nearest-neighbour spacing (falls back to 1e-12 for degenerate sets)."""
    return max(0.1 * median_nn_spacing(points), 1e-12)


def detect_outliers(field: DisplacementField, k: int = 9, eps_a: Optional[float] = None, threshold: float = 2.0):
    """Validity mask after the normalized median test.

    A sample is rejected when any component's residual exceeds ``threshold``.
    Samples already invalid stay invalid.
    """
    r = normalized_residuals(field, k, eps_a)
    flagged = np.zeros(len(r), dtype=bool)
    sel = field.valid
    flagged[sel] = np.any(r[sel] > threshold, axis=1)
    return field.valid & ~flagged


def _valid_neighbors(field: DisplacementField, queries, k: int):
    if field.n_valid == 0:
        raise ValueError("no valid samples to interpolate from")
    if k < 1:
        raise ValueError("k must be >= 1")
    if field.n_valid < k:
        raise ValueError(f"interpolation needs {k} valid samples, field has {field.n_valid}")
    sel = np.flatnonzero(field.valid)
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != field.dim:
        raise ValueError(f"queries must be (n, {field.dim})")
    d, idx = NeighborIndex(field.samples[sel]).query(q, k)
    return d, field.vectors[sel][idx]


def knn_interpolate(field: DisplacementField, queries, k: int = 8) -> np.ndarray:
    """Mean of the ``k`` nearest valid sample vectors."""
    _, U = _valid_neighbors(field, queries, k)
    return U.mean(axis=1)


def linear_interpolate(field: DisplacementField, queries, k: int = 8, power: float = 1.0, eps: float = 0.0) -> np.ndarray:
    """Inverse-distance weighting over the ``k`` nearest valid samples.

    Weights are ``1 / (d_i + eps) ** power``; a query coinciding with a
    sample returns that sample's vector exactly.
    """
    d, U = _valid_neighbors(field, queries, k)
    d = d + eps
    dmin = d[:, :1]
    hit = dmin[:, 0] == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        # scaled by the nearest distance so weights stay in (0, 1]
        w = (dmin / d) ** power
    w[hit] = 0.0
    w[hit, 0] = 1.0
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("qk,qkd->qd", w, U)
