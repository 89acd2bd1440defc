"""
Synthetic unit-square experiment: a uniform design mesh is registered
against a warped, locally refined scan mesh, with and without area weights.

Both square-mesh generators place the four corners first, in the order
(0,0), (1,0), (1,1), (0,1), so ``CORNER_INDEX`` tags them in every mesh.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .delaunay import bowyer_watson
from .mesh import TriangleMesh, vertex_area_weights
from .registration import GmmConfig, eval_gmm_density, register

log = logging.getLogger(__name__)

CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
CORNER_INDEX = np.arange(4)

BENCH_COLUMNS = [
    "amplitude",
    "seed",
    "mode",
    "corner_error",
    "boundary_rmse",
    "rmse",
    "iterations",
    "converged",
    "runtime_s",
    "error",
]


# ---------------------------------------------------------------------------
# meshes


def make_uniform_square_mesh(n: int) -> TriangleMesh:
    """(n+1)^2 grid nodes on the unit square, every cell split into two triangles."""
    if n < 1:
        raise ValueError("n must be >= 1")
    t = np.linspace(0.0, 1.0, n + 1)
    gx, gy = np.meshgrid(t, t)
    grid = np.column_stack([gx.ravel(), gy.ravel()])  # index = row * (n+1) + col
    gid = lambda r, c: r * (n + 1) + c  # noqa: E731
    tris = []
    for r in range(n):
        for c in range(n):
            a, b, cc, d = gid(r, c), gid(r, c + 1), gid(r + 1, c + 1), gid(r + 1, c)
            tris.append((a, b, cc))
            tris.append((a, cc, d))
    corner_ids = [gid(0, 0), gid(0, n), gid(n, n), gid(n, 0)]
    order = corner_ids + [i for i in range(len(grid)) if i not in set(corner_ids)]
    new = np.empty(len(grid), dtype=np.int64)
    new[order] = np.arange(len(grid))
    return TriangleMesh(grid[order], new[np.array(tris)])


def two_spot_density(p):
    """Default grading: two dense spots on a uniform background."""
    p = np.atleast_2d(p)
    spots = np.array([[0.3, 0.3], [0.7, 0.7]])
    bump = sum(np.exp(-np.sum((p - s) ** 2, axis=1) / (2 * 0.08**2)) for s in spots)
    return 1.0 + 8.0 * bump


def _sample_refined_nodes(density_fn, n_nodes, rng, max_attempts=200_000):
    """Corners, then boundary and interior nodes by density-graded dart throwing."""
    probe = rng.random((4096, 2))
    rho_probe = density_fn(probe)
    rho_max = float(rho_probe.max()) * 1.2
    rho_mean = float(rho_probe.mean())
    r0 = 0.5 / math.sqrt(n_nodes)
    p_boundary = min(0.5, 4.0 / math.sqrt(n_nodes))

    nodes = [tuple(c) for c in CORNERS]
    arr = np.array(nodes)
    for _ in range(max_attempts):
        if len(nodes) >= n_nodes:
            break
        if rng.random() < p_boundary:
            s, side = rng.random(), rng.integers(4)
            cand = np.array([[s, 0.0], [1.0, s], [s, 1.0], [0.0, s]][side])
        else:
            cand = rng.random(2)
        rho = float(density_fn(cand[None, :])[0])
        if rng.random() * rho_max > rho:
            continue
        rmin = r0 * math.sqrt(rho_mean / rho)
        if np.min(np.sum((arr - cand) ** 2, axis=1)) < rmin * rmin:
            continue
        nodes.append(tuple(cand))
        arr = np.array(nodes)
    return np.array(nodes)


def make_refined_square_mesh(
    density_fn: Optional[Callable] = None, seed=0, n_nodes: int = 200
) -> TriangleMesh:
    """Locally refined unit-square mesh: graded random nodes + Delaunay triangles.

    ``density_fn`` maps (k, 2) points to positive relative node density.
    """
    if density_fn is None:
        density_fn = two_spot_density
    if n_nodes < 4:
        raise ValueError("need at least the four corners")
    rng = np.random.default_rng(seed)
    nodes = _sample_refined_nodes(density_fn, n_nodes, rng)
    if len(nodes) < 3:
        raise ValueError("fewer than 3 nodes generated")
    return TriangleMesh(nodes, bowyer_watson(nodes))


def boundary_index(points, tol=1e-12) -> np.ndarray:
    p = np.asarray(points)
    on = (np.abs(p) <= tol) | (np.abs(p - 1.0) <= tol)
    return np.flatnonzero(on.any(axis=1))


# ---------------------------------------------------------------------------
# warps


def _monomials(p):
    x, y = p[:, 0], p[:, 1]
    return np.column_stack([np.ones_like(x), x, y, x * x, x * y, y * y])


@dataclass(frozen=True)
class PolynomialWarp:
    """``p -> p + (u_x(p), u_y(p))`` with quadratic ``u``; ``coeffs`` is (2, 6)
    over the monomials 1, x, y, x^2, xy, y^2."""

    coeffs: np.ndarray
    amplitude: float = 0.0
    seed: Optional[int] = None

    def displacement(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return _monomials(p) @ np.asarray(self.coeffs).T

    def __call__(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return p + self.displacement(p)

    def jacobian(self, points):
        """(k, 2, 2) analytic Jacobian of the warp."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        x, y = p[:, 0], p[:, 1]
        c = np.asarray(self.coeffs)
        J = np.empty((len(p), 2, 2))
        for r in range(2):
            J[:, r, 0] = c[r, 1] + 2 * c[r, 3] * x + c[r, 4] * y
            J[:, r, 1] = c[r, 2] + c[r, 4] * x + 2 * c[r, 5] * y
        J[:, 0, 0] += 1.0
        J[:, 1, 1] += 1.0
        return J

    def is_bijective_on_probe(self, n: int = 50) -> bool:
        t = np.linspace(0.0, 1.0, n)
        gx, gy = np.meshgrid(t, t)
        return bool(np.all(np.linalg.det(self.jacobian(np.column_stack([gx.ravel(), gy.ravel()]))) > 0))


def sample_polynomial_warp(amplitude: float, seed=0, max_tries: int = 100) -> PolynomialWarp:
    """Random quadratic warp, coefficients uniform in [-amplitude, amplitude].

    Redrawn until the Jacobian determinant is positive on a 50x50 probe grid.
    """
    if amplitude < 0:
        raise ValueError("amplitude must be >= 0")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        warp = PolynomialWarp(rng.uniform(-amplitude, amplitude, size=(2, 6)), amplitude, seed)
        if warp.is_bijective_on_probe():
            return warp
    raise ValueError(f"no bijective warp found in {max_tries} draws (amplitude {amplitude} too large)")


def apply_warp(points, warp: PolynomialWarp):
    return warp(points)


# ---------------------------------------------------------------------------
# metrics and driver


def corner_error(recovered, truth) -> float:
    """Mean Euclidean distance between recovered and true corner positions."""
    recovered = np.asarray(recovered, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    return float(np.mean(np.linalg.norm(recovered - truth, axis=1)))


@dataclass(frozen=True)
class BenchSetup:
    design_n: int = 10
    scan_nodes: int = 200
    beta: float = 3.0
    lam: float = 2.0
    w: float = 0.0
    max_iters: int = 150
    tol: float = 1e-6

    def gmm(self, mode: str) -> GmmConfig:
        return GmmConfig(w=self.w, beta=self.beta, lam=self.lam, max_iters=self.max_iters, tol=self.tol, weight_mode=mode)


@dataclass
class Trial:
    design: TriangleMesh
    scan_ref: TriangleMesh  # scan mesh in the reference (undeformed) configuration
    weights: np.ndarray
    warp: PolynomialWarp

    @property
    def scan_points(self):
        return self.warp(self.scan_ref.vertices)


def make_trial(amplitude: float, seed: int, setup: BenchSetup = BenchSetup()) -> Trial:
    ss = np.random.SeedSequence([int(seed), int(round(amplitude * 1e6))])
    mesh_seed, warp_seed = ss.spawn(2)
    design = make_uniform_square_mesh(setup.design_n)
    scan_ref = make_refined_square_mesh(seed=np.random.default_rng(mesh_seed), n_nodes=setup.scan_nodes)
    weights = vertex_area_weights(scan_ref)
    warp = sample_polynomial_warp(amplitude, seed=np.random.default_rng(warp_seed))
    return Trial(design, scan_ref, weights, warp)


def run_trial(trial: Trial, mode: str, setup: BenchSetup = BenchSetup()):
    """Register one trial; returns (metrics dict, RegistrationResult)."""
    t0 = time.perf_counter()
    res = register(trial.design.vertices, trial.scan_points, trial.weights if mode == "area" else None, setup.gmm(mode))
    runtime = time.perf_counter() - t0
    ref = trial.scan_ref.vertices
    err = np.linalg.norm(res.T - ref, axis=1)
    bidx = boundary_index(ref)
    return {
        "corner_error": corner_error(res.T[CORNER_INDEX], ref[CORNER_INDEX]),
        "boundary_rmse": float(np.sqrt(np.mean(err[bidx] ** 2))),
        "rmse": float(np.sqrt(np.mean(err**2))),
        "iterations": res.iterations,
        "converged": res.converged,
        "runtime_s": runtime,
    }, res


def run_benchmark(
    amplitudes: Sequence[float] = (0.05, 0.10, 0.15),
    seeds: Sequence[int] = range(10),
    setup: BenchSetup = BenchSetup(),
    modes: Sequence[str] = ("equal", "area"),
    grid_dir=None,
    grid_n: int = 21,
):
    """Run every (amplitude, seed, mode) trial; returns a list of row dicts.

    A failing trial is recorded with its error message and the run goes on.
    With ``grid_dir`` set, per-trial displacement grids are written there.
    """
    rows = []
    for amp in amplitudes:
        for seed in seeds:
            try:
                trial = make_trial(amp, seed, setup)
            except Exception as exc:  # noqa: BLE001
                for mode in modes:
                    rows.append(_error_row(amp, seed, mode, f"setup: {exc}"))
                continue
            results = {}
            for mode in modes:
                try:
                    metrics, res = run_trial(trial, mode, setup)
                    results[mode] = res
                    rows.append({"amplitude": amp, "seed": seed, "mode": mode, **metrics, "error": ""})
                except Exception as exc:  # noqa: BLE001
                    rows.append(_error_row(amp, seed, mode, f"register: {exc}"))
            if grid_dir is not None and results:
                _write_displacement_grid(grid_dir, amp, seed, trial, results, grid_n)
    return rows


def _error_row(amp, seed, mode, msg):
    row = {c: "" for c in BENCH_COLUMNS}
    row.update(amplitude=amp, seed=seed, mode=mode, error=msg)
    return row


def _write_displacement_grid(grid_dir, amp, seed, trial, results, n):
    """Applied vs recovered displacement on an n x n grid of the reference square."""
    import os

    from .field import DisplacementField, knn_interpolate

    t = np.linspace(0.0, 1.0, n)
    gx, gy = np.meshgrid(t, t)
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    cols = {"x": grid[:, 0], "y": grid[:, 1]}
    truth = trial.warp.displacement(grid)
    cols["ux_true"], cols["uy_true"] = truth[:, 0], truth[:, 1]
    y = trial.scan_points
    for mode, res in results.items():
        # recovered material positions T carry displacement y - T
        fld = DisplacementField(res.T, y - res.T)
        u = knn_interpolate(fld, grid, k=4)
        cols[f"ux_{mode}"], cols[f"uy_{mode}"] = u[:, 0], u[:, 1]
    os.makedirs(grid_dir, exist_ok=True)
    path = os.path.join(grid_dir, f"field_a{amp:g}_s{seed}.csv")
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(list(cols))
        for i in range(len(grid)):
            wr.writerow([repr(float(cols[c][i])) for c in cols])


def write_bench_csv(rows, path, setup: BenchSetup = BenchSetup()) -> None:
    """CSV report; ``#`` header lines record the experiment scale and parameters."""
    with open(path, "w", newline="") as fh:
        fh.write(
            f"# design_grid={setup.design_n + 1}x{setup.design_n + 1} scan_nodes~{setup.scan_nodes} "
            f"beta={setup.beta} lambda={setup.lam} w={setup.w} max_iters={setup.max_iters} tol={setup.tol}\n"
        )
        wr = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: r.get(k, "") for k in BENCH_COLUMNS})


def summarize(rows):
    """Per amplitude: area-mode wins and mean corner errors."""
    out = {}
    by = {}
    for r in rows:
        if r["error"]:
            continue
        by.setdefault((r["amplitude"], r["seed"]), {})[r["mode"]] = r["corner_error"]
    for (amp, _), modes in by.items():
        s = out.setdefault(amp, {"trials": 0, "area_wins": 0, "equal": [], "area": []})
        if "equal" in modes and "area" in modes:
            s["trials"] += 1
            s["area_wins"] += modes["area"] < modes["equal"]
            s["equal"].append(modes["equal"])
            s["area"].append(modes["area"])
    return out


# ---------------------------------------------------------------------------
# density diagnostic


def density_grids(n_grid: int = 64, sigma2: float = 0.002, design_n: int = 20, scan_nodes: int = 200, seed=0):
    """Mixture densities on an n_grid^2 cell-centred grid over the unit square.

    Returns ``(grid, densities)`` where ``densities`` maps
    ``uniform`` (uniform mesh, equal weights), ``equal`` (refined mesh, equal
    weights) and ``weighted`` (refined mesh, area weights) to (n_grid^2,) arrays.
    """
    t = (np.arange(n_grid) + 0.5) / n_grid
    gx, gy = np.meshgrid(t, t)
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    uniform = make_uniform_square_mesh(design_n)
    refined = make_refined_square_mesh(seed=seed, n_nodes=scan_nodes)
    w = vertex_area_weights(refined)
    dens = {
        "uniform": eval_gmm_density(uniform.vertices, None, sigma2, 0.0, grid),
        "equal": eval_gmm_density(refined.vertices, None, sigma2, 0.0, grid),
        "weighted": eval_gmm_density(refined.vertices, w, sigma2, 0.0, grid),
    }
    return grid, dens


def density_contrast(dens) -> dict:
    """Max absolute deviations of the refined-mesh densities from the uniform one."""
    dev_w = float(np.max(np.abs(dens["weighted"] - dens["uniform"])))
    dev_e = float(np.max(np.abs(dens["equal"] - dens["uniform"])))
    return {"weighted_vs_uniform": dev_w, "equal_vs_uniform": dev_e, "ratio": dev_w / dev_e}


# ---------------------------------------------------------------------------
# 3-D fixtures for end-to-end compensation runs


def make_box_mesh(size=(40.0, 20.0, 10.0), spacing: float = 1.0, stagger: bool = False) -> TriangleMesh:
    """Welded, outward-oriented surface mesh of an axis-aligned box at the origin.

    Each face is a grid with roughly ``spacing`` edge length; ``stagger``
    alternates the cell diagonals so two meshes of one box differ in topology.
    """
    from .mesh import weld_vertices

    L = np.asarray(size, dtype=np.float64)
    soup = []
    # (origin, u axis, v axis) with u x v pointing outward
    faces = []
    for ax in range(3):
        a1, a2 = (ax + 1) % 3, (ax + 2) % 3
        e1, e2 = np.eye(3)[a1] * L[a1], np.eye(3)[a2] * L[a2]
        hi = np.eye(3)[ax] * L[ax]
        faces.append((hi, e1, e2))
        faces.append((np.zeros(3), e2, e1))
    for origin, u, v in faces:
        nu = max(1, int(round(np.linalg.norm(u) / spacing)))
        nv = max(1, int(round(np.linalg.norm(v) / spacing)))
        s = np.linspace(0.0, 1.0, nu + 1)
        t = np.linspace(0.0, 1.0, nv + 1)
        for i in range(nu):
            for j in range(nv):
                p00 = origin + s[i] * u + t[j] * v
                p10 = origin + s[i + 1] * u + t[j] * v
                p11 = origin + s[i + 1] * u + t[j + 1] * v
                p01 = origin + s[i] * u + t[j + 1] * v
                if stagger and (i + j) % 2:
                    soup += [(p00, p10, p01), (p10, p11, p01)]
                else:
                    soup += [(p00, p10, p11), (p00, p11, p01)]
    tris = np.array(soup)
    n = len(tris)
    mesh = TriangleMesh(tris.reshape(-1, 3), np.arange(3 * n).reshape(n, 3))
    return weld_vertices(mesh, 1e-9 * float(np.linalg.norm(L)))


@dataclass(frozen=True)
class SmoothWarp:
    """Smooth 3-D distortion: shrinkage toward the centre plus upward curl of the ends."""

    center: np.ndarray
    half: np.ndarray
    scale: float

    def displacement(self, points):
        p = (np.atleast_2d(points) - self.center) / self.half
        ux = -0.4 * p[:, 0] + 0.1 * p[:, 0] * p[:, 2]
        uy = -0.3 * p[:, 1] + 0.15 * np.sin(1.5 * p[:, 0])
        uz = 1.0 * p[:, 0] ** 2 - 0.2 * p[:, 1] ** 2
        return self.scale * np.column_stack([ux, uy, uz])

    def __call__(self, points):
        return np.atleast_2d(points) + self.displacement(points)


def make_smooth_warp(reference_points, max_fraction: float = 0.02) -> SmoothWarp:
    """Warp whose largest displacement over ``reference_points`` is
    ``max_fraction`` of their bounding-box diagonal."""
    pts = np.asarray(reference_points, dtype=np.float64)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    base = SmoothWarp(0.5 * (lo + hi), 0.5 * (hi - lo), 1.0)
    peak = float(np.max(np.linalg.norm(base.displacement(pts), axis=1)))
    diam = float(np.linalg.norm(hi - lo))
    return SmoothWarp(base.center, base.half, max_fraction * diam / peak)


def warped_box_case(spacing: float = 1.0, max_fraction: float = 0.02):
    """Design box mesh, its warped copy as scan, and the warp itself."""
    design = make_box_mesh(spacing=spacing)
    warp = make_smooth_warp(design.vertices, max_fraction)
    return design, design.with_vertices(warp(design.vertices)), warp


def residual_distortion_ratio(design: TriangleMesh, compensated: TriangleMesh, warp) -> float:
    """RMS of ``W(compensated) - design`` over RMS of ``W(design) - design``."""
    v = design.vertices

    def rms(a):
        return float(np.sqrt(np.mean(np.sum(a**2, axis=1))))

    return rms(warp(compensated.vertices) - v) / rms(warp(v) - v)
