"""
Scan-to-design distortion compensation.

Pipeline: read both STLs, weld, area weights on the scan, box-grid
downsampling, registration (scan points as centroids, design points as
data), outlier cleaning of the recovered distortion vectors, interpolation
at the design vertices and an inverse shift of every design vertex.
"""

from __future__ import annotations

import csv
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, fields

import numpy as np

from .field import DisplacementField, detect_outliers, knn_interpolate, linear_interpolate
from .mesh import (
    TriangleMesh,
    box_grid_downsample,
    read_stl,
    remove_unreferenced,
    vertex_area_weights,
    weld_vertices,
    write_stl,
)
from .registration import GmmConfig, register

log = logging.getLogger(__name__)

INTERPOLATORS = {"knn": knn_interpolate, "linear": linear_interpolate}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class PipelineConfig:
    gmm: GmmConfig = GmmConfig(w=0.1, beta=3.0, lam=2.0, weight_mode="area")
    cell: float = 2.0
    outlier_k: int = 9  # odd: constant fields give r = 0 exactly
    eps_a: float | None = None
    threshold: float = 2.0
    interp: str = "knn"
    interp_k: int = 8
    scale: float = 1.0
    seed: int = 0
    weld_tol: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.scale):
            raise ValueError("scale must be finite")
        if self.cell <= 0:
            raise ValueError("cell must be positive")
        if self.interp not in INTERPOLATORS:
            raise ValueError(f"interp must be one of {sorted(INTERPOLATORS)}")


@dataclass
class PipelineReport:
    design_nodes: int = 0
    scan_nodes: int = 0
    design_points: int = 0  # after downsampling
    scan_points: int = 0
    iterations: int = 0
    converged: bool = False
    sigma2: float = 0.0
    outliers: int = 0
    disp_min: float = 0.0
    disp_max: float = 0.0
    disp_mean: float = 0.0
    timings: dict = field(default_factory=dict)

    def rows(self):
        """``(metric, value)`` pairs, timings excluded."""
        out = []
        for f in fields(self):
            if f.name == "timings":
                continue
            v = getattr(self, f.name)
            out.append((f.name, repr(float(v)) if isinstance(v, float) else str(v)))
        return out

    def to_csv(self, path) -> None:
        """Deterministic report: columns ``metric,value``."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["metric", "value"])
            wr.writerows(self.rows())

    def timings_to_csv(self, path) -> None:
        """Per-stage wall time: columns ``stage,seconds``."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["stage", "seconds"])
            for k, v in self.timings.items():
                wr.writerow([k, f"{v:.6f}"])


def interpolate_field(fld: DisplacementField, points, interpolator: str = "knn", k: int = 8):
    try:
        fn = INTERPOLATORS[interpolator]
    except KeyError:
        raise ValueError(f"unknown interpolator {interpolator!r}") from None
    return fn(fld, points, k=k)


def apply_displacements(mesh: TriangleMesh, displacements, scale: float = 1.0) -> TriangleMesh:
    """Move every vertex ``v -> v - scale * d``; triangles are untouched."""
    return mesh.with_vertices(mesh.vertices - scale * np.asarray(displacements))


def compensate_mesh(design: TriangleMesh, fld: DisplacementField, interpolator: str = "knn", scale: float = 1.0, k: int = 8) -> TriangleMesh:
    """Pre-deform ``design`` against the distortion field ``fld``.

    ``fld`` holds the print distortion (scan position minus material
    position); each vertex moves by ``-scale`` times its interpolated value.
    """
    if scale == 0:
        return design.with_vertices(design.vertices)
    d = interpolate_field(fld, design.vertices, interpolator, k)
    return apply_displacements(design, d, scale)


@contextmanager
def _stage(name, timings):
    t0 = time.perf_counter()
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise PipelineError(name, exc) from exc
    finally:
        timings[name] = time.perf_counter() - t0


@dataclass
class PipelineOutput:
    mesh: TriangleMesh
    stl: bytes
    report: PipelineReport
    field: DisplacementField
    registration: object


@dataclass
class PointSets:
    design: TriangleMesh  # welded
    scan: TriangleMesh
    X: np.ndarray  # downsampled design points (data)
    y: np.ndarray  # downsampled scan points (centroids)
    y_weights: np.ndarray


def prepare_point_sets(design_soup: TriangleMesh, scan_soup: TriangleMesh, config: PipelineConfig, rep: PipelineReport) -> PointSets:
    """Weld both meshes, weight the scan and box-grid filter both sets."""
    tm = rep.timings
    with _stage("weld", tm):
        design = remove_unreferenced(weld_vertices(design_soup, config.weld_tol))
        scan = remove_unreferenced(weld_vertices(scan_soup, config.weld_tol))
        rep.design_nodes, rep.scan_nodes = design.n_vertices, scan.n_vertices
    with _stage("weights", tm):
        scan_w = vertex_area_weights(scan)
    with _stage("downsample", tm):
        # one seed for both sets: identical inputs downsample identically
        X, _, _ = box_grid_downsample(design.vertices, None, config.cell, seed=config.seed)
        y, y_w, _ = box_grid_downsample(scan.vertices, scan_w, config.cell, seed=config.seed)
        rep.design_points, rep.scan_points = len(X), len(y)
    return PointSets(design, scan, X, y, y_w)


def run_pipeline_meshes(design_soup: TriangleMesh, scan_soup: TriangleMesh, config: PipelineConfig = PipelineConfig()) -> PipelineOutput:
    rep = PipelineReport()
    tm = rep.timings
    ps = prepare_point_sets(design_soup, scan_soup, config, rep)
    design, X, y, y_w = ps.design, ps.X, ps.y, ps.y_weights
    with _stage("register", tm):
        res = register(X, y, y_w, config.gmm)
        rep.iterations, rep.converged, rep.sigma2 = res.iterations, res.converged, res.sigma2
    with _stage("outliers", tm):
        # distortion anchored at the scan points: y - T = -(T - y)
        fld = DisplacementField(y, -res.displacements)
        valid = detect_outliers(fld, k=config.outlier_k, eps_a=config.eps_a, threshold=config.threshold)
        fld = fld.with_valid(valid)
        rep.outliers = int((~valid).sum())
        mag = np.linalg.norm(fld.vectors[valid], axis=1)
        rep.disp_min, rep.disp_max, rep.disp_mean = float(mag.min()), float(mag.max()), float(mag.mean())
    with _stage("compensate", tm):
        out = compensate_mesh(design, fld, config.interp, config.scale, k=config.interp_k)
    with _stage("write", tm):
        stl = write_stl(out, "binary")
    return PipelineOutput(out, stl, rep, fld, res)


def run_pipeline(design_stl: bytes, scan_stl: bytes, config: PipelineConfig = PipelineConfig()):
    """Compensated binary STL bytes and the run report."""
    timings = {}
    with _stage("read design", timings):
        design = read_stl(design_stl)
    with _stage("read scan", timings):
        scan = read_stl(scan_stl)
    out = run_pipeline_meshes(design, scan, config)
    out.report.timings = {**timings, **out.report.timings}
    return out.stl, out.report
