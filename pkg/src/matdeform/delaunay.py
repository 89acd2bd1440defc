"""Incremental Bowyer-Watson Delaunay triangulation of 2-D point sets."""

import numpy as np


def _incircle(a, b, c, p):
    """> 0 when ``p`` lies inside the circumcircle of CCW triangles (a, b, c)."""
    ad, bd, cd = a - p, b - p, c - p
    ad2 = np.einsum("ij,ij->i", ad, ad)
    bd2 = np.einsum("ij,ij->i", bd, bd)
    cd2 = np.einsum("ij,ij->i", cd, cd)
    return (
        ad[:, 0] * (bd[:, 1] * cd2 - bd2 * cd[:, 1])
        - ad[:, 1] * (bd[:, 0] * cd2 - bd2 * cd[:, 0])
        + ad2 * (bd[:, 0] * cd[:, 1] - bd[:, 1] * cd[:, 0])
    )


def _orient(a, b, c):
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def bowyer_watson(points, super_scale: float = 1e6) -> np.ndarray:
    """Delaunay triangles (t, 3) of ``points`` (n, 2), counter-clockwise.

    Points are inserted in the given order into a large enclosing triangle;
    every insertion removes the triangles whose circumcircle contains the new
    point and re-fans the cavity. Triangles touching the enclosing triangle
    are discarded at the end.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be (n, 2)")
    n = len(pts)
    if n < 3:
        raise ValueError(f"need at least 3 points, got {n}")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = 0.5 * (lo + hi)
    span = max(float(np.max(hi - lo)), 1e-12) * super_scale
    sup = center + span * np.array([[-3.0, -3.0], [3.0, -3.0], [0.0, 3.0]])
    allpts = np.vstack([pts, sup])

    tris = [(n, n + 1, n + 2)]
    for i in range(n):
        p = allpts[i]
        T = np.array(tris)
        inside = _incircle(allpts[T[:, 0]], allpts[T[:, 1]], allpts[T[:, 2]], p) > 0
        bad = np.flatnonzero(inside)
        if bad.size == 0:
            raise RuntimeError(f"point {i} fell outside every circumcircle (duplicate point?)")
        edge_count = {}
        for t in bad:
            a, b, c = T[t]
            for e in ((a, b), (b, c), (c, a)):
                key = (min(e), max(e))
                edge_count[key] = edge_count.get(key, 0) + 1
        boundary = []
        for t in bad:
            a, b, c = T[t]
            for e in ((a, b), (b, c), (c, a)):
                if edge_count[(min(e), max(e))] == 1:
                    boundary.append(e)  # keeps CCW orientation of the cavity
        keep = np.ones(len(T), dtype=bool)
        keep[bad] = False
        tris = [tuple(t) for t in T[keep]]
        for a, b in boundary:
            if _orient(allpts[a], allpts[b], p) > 0:
                tris.append((int(a), int(b), i))
    out = np.array([t for t in tris if max(t) < n], dtype=np.int64).reshape(-1, 3)
    return out


def circumcircle_violations(points, triangles, slack: float = 1e-12) -> int:
    """Brute-force count of (point, triangle) pairs breaking the empty-circle rule.

    A vertex strictly inside a triangle's circumcircle by more than
    ``slack`` (relative to the squared circumradius) counts as a violation.
    """
    pts = np.asarray(points, dtype=np.float64)
    count = 0
    for tri in np.asarray(triangles):
        a, b, c = pts[tri]
        d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
        if d == 0:
            count += 1
            continue
        a2, b2, c2 = a @ a, b @ b, c @ c
        ux = (a2 * (b[1] - c[1]) + b2 * (c[1] - a[1]) + c2 * (a[1] - b[1])) / d
        uy = (a2 * (c[0] - b[0]) + b2 * (a[0] - c[0]) + c2 * (b[0] - a[0])) / d
        center = np.array([ux, uy])
        r2 = np.sum((a - center) ** 2)
        d2 = np.sum((pts - center) ** 2, axis=1)
        mask = np.ones(len(pts), dtype=bool)
        mask[tri] = False
        count += int(np.sum(d2[mask] < r2 * (1.0 - slack)))
    return count
