"""Command-line entry point: ``matdeform {register,compensate,bench,density}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys

import numpy as np

from . import __version__

log = logging.getLogger("matdeform")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def _add_gmm_flags(p, w=0.1):
    g = p.add_argument_group("registration")
    g.add_argument("--beta", type=float, default=3.0, help="kernel width")
    g.add_argument("--lambda", dest="lam", type=float, default=2.0, help="regularization weight")
    g.add_argument("--w", type=float, default=w, help="uniform outlier weight in [0, 1)")
    g.add_argument("--max-iters", type=int, default=150, help="EM iteration cap")
    g.add_argument("--tol", type=float, default=1e-6, help="relative objective change to stop at")
    return g


def _add_mesh_flags(p):
    p.add_argument("--design", required=True, help="design STL (binary or ASCII)")
    p.add_argument("--scan", required=True, help="scan STL (binary or ASCII)")
    p.add_argument("--cell-size", type=float, default=2.0, help="box-grid filter cell edge")
    p.add_argument("--weight-mode", choices=("area", "equal"), default="area", help="scan membership weights")
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matdeform",
        description="Area-weighted point-set registration and print-distortion compensation.",
        formatter_class=_Formatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("register", help="register a scan STL against a design STL", formatter_class=_Formatter)
    _add_mesh_flags(p)
    _add_gmm_flags(p)
    p.add_argument("--out", required=True, help="field CSV: scan sample, displacement T - y, valid")
    p.add_argument("--trace", help="optional CSV of sigma2 and objective per iteration")

    p = sub.add_parser("compensate", help="write a pre-deformed design STL", formatter_class=_Formatter)
    _add_mesh_flags(p)
    _add_gmm_flags(p)
    p.add_argument("--out", required=True, help="compensated binary STL")
    p.add_argument("--knn-k", type=int, default=8, help="neighbours for interpolation")
    p.add_argument("--outlier-k", type=int, default=9, help="neighbours for the outlier test")
    p.add_argument("--outlier-threshold", type=float, default=2.0, help="normalized residual cutoff")
    p.add_argument("--eps-a", type=float, default=None, help="outlier-test noise level; None means 0.1 x median spacing")
    p.add_argument("--interp", choices=("knn", "linear"), default="knn", help="interpolator at design vertices")
    p.add_argument("--scale", type=float, default=1.0, help="compensation scale s in v - s*d(v)")
    p.add_argument("--report", help="report CSV (metric,value)")
    p.add_argument("--timing", help="per-stage wall time CSV (stage,seconds)")
    p.add_argument("--field", help="optional CSV of the cleaned distortion field")

    p = sub.add_parser("bench", help="unit-square equal vs area weight benchmark", formatter_class=_Formatter)
    p.add_argument("--seeds", type=int, default=10, help="number of seeds (0..N-1)")
    p.add_argument("--amplitude", "--amplitudes", dest="amplitudes", type=float, nargs="+", default=[0.05, 0.10, 0.15], help="warp amplitudes")
    p.add_argument("--design-n", type=int, default=10, help="design grid cells per side")
    p.add_argument("--scan-nodes", type=int, default=200, help="refined scan node count")
    _add_gmm_flags(p, w=0.0)
    p.add_argument("--out", default="bench.csv", help="report CSV")
    p.add_argument("--grid-dir", help="directory for per-trial displacement grid CSVs")

    p = sub.add_parser("density", help="mixture density of the unit-square meshes on a grid", formatter_class=_Formatter)
    p.add_argument("--grid", type=int, default=64, help="grid points per side")
    p.add_argument("--variant", choices=("uniform", "equal", "weighted", "all"), default="all", help="density column(s) to write")
    p.add_argument("--sigma2", type=float, default=0.002, help="component variance")
    p.add_argument("--design-n", type=int, default=20, help="uniform reference grid cells per side")
    p.add_argument("--scan-nodes", type=int, default=200, help="refined mesh node count")
    p.add_argument("--seed", type=int, default=0, help="refined mesh seed")
    p.add_argument("--out", default="density.csv", help="CSV with x, y and density columns")
    return parser


def _gmm(args, mode="area"):
    from .registration import GmmConfig

    return GmmConfig(w=args.w, beta=args.beta, lam=args.lam, max_iters=args.max_iters, tol=args.tol, weight_mode=mode)


def _read(path, stage):
    from .compensate import PipelineError
    from .mesh import read_stl

    try:
        with open(path, "rb") as fh:
            return read_stl(fh.read())
    except Exception as exc:  # noqa: BLE001
        raise PipelineError(stage, exc) from exc


def _pipeline_config(args, **extra):
    from .compensate import PipelineConfig

    return PipelineConfig(gmm=_gmm(args, args.weight_mode), cell=args.cell_size, seed=args.seed, **extra)


def cmd_register(args) -> int:
    from .compensate import PipelineError, PipelineReport, _stage, prepare_point_sets
    from .field import DisplacementField
    from .registration import register

    design, scan = _read(args.design, "read design"), _read(args.scan, "read scan")
    rep = PipelineReport()
    ps = prepare_point_sets(design, scan, _pipeline_config(args), rep)
    with _stage("register", rep.timings):
        res = register(ps.X, ps.y, ps.y_weights, _gmm(args, args.weight_mode))
    try:
        DisplacementField(ps.y, res.displacements).to_csv(args.out)
        if args.trace:
            res.write_trace(args.trace)
    except OSError as exc:
        raise PipelineError("write", exc) from exc
    print(f"{len(ps.y)} centroids, {len(ps.X)} data points, {res.iterations} iterations, sigma2={res.sigma2:.6g}, converged={res.converged}")
    return 0


def cmd_compensate(args) -> int:
    from .compensate import PipelineError, run_pipeline_meshes

    design, scan = _read(args.design, "read design"), _read(args.scan, "read scan")
    cfg = _pipeline_config(
        args,
        outlier_k=args.outlier_k,
        eps_a=args.eps_a,
        threshold=args.outlier_threshold,
        interp=args.interp,
        interp_k=args.knn_k,
        scale=args.scale,
    )
    out = run_pipeline_meshes(design, scan, cfg)
    try:
        with open(args.out, "wb") as fh:
            fh.write(out.stl)
        if args.report:
            out.report.to_csv(args.report)
        if args.timing:
            out.report.timings_to_csv(args.timing)
        if args.field:
            out.field.to_csv(args.field)
    except OSError as exc:
        raise PipelineError("write", exc) from exc
    for name, value in out.report.rows():
        print(f"{name}: {value}")
    return 0


def cmd_bench(args) -> int:
    from .bench import BenchSetup, run_benchmark, summarize, write_bench_csv

    if args.seeds < 1:
        raise ValueError("--seeds must be >= 1")
    setup = BenchSetup(
        design_n=args.design_n, scan_nodes=args.scan_nodes, beta=args.beta, lam=args.lam, w=args.w, max_iters=args.max_iters, tol=args.tol
    )
    rows = run_benchmark(args.amplitudes, range(args.seeds), setup, grid_dir=args.grid_dir)
    write_bench_csv(rows, args.out, setup)
    for amp, s in sorted(summarize(rows).items()):
        eq = np.mean(s["equal"]) if s["equal"] else float("nan")
        ar = np.mean(s["area"]) if s["area"] else float("nan")
        print(f"amplitude {amp:g}: area wins {s['area_wins']}/{s['trials']}, mean corner error equal={eq:.4g} area={ar:.4g}")
    failed = sum(1 for r in rows if r["error"])
    if failed:
        print(f"{failed} trial(s) failed; see the error column", file=sys.stderr)
    return 0


def cmd_density(args) -> int:
    from .bench import density_contrast, density_grids

    grid, dens = density_grids(args.grid, args.sigma2, args.design_n, args.scan_nodes, args.seed)
    names = ["uniform", "equal", "weighted"] if args.variant == "all" else [args.variant]
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "y"] + (["density"] if len(names) == 1 else names))
        for i in range(len(grid)):
            wr.writerow([repr(float(grid[i, 0])), repr(float(grid[i, 1]))] + [repr(float(dens[n][i])) for n in names])
    c = density_contrast(dens)
    print(f"max |weighted - uniform| = {c['weighted_vs_uniform']:.6g}")
    print(f"max |equal - uniform|    = {c['equal_vs_uniform']:.6g}")
    print(f"ratio                    = {c['ratio']:.4f}")
    return 0


COMMANDS = {"register": cmd_register, "compensate": cmd_compensate, "bench": cmd_bench, "density": cmd_density}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    from .compensate import PipelineError

    try:
        return COMMANDS[args.command](args)
    except PipelineError as exc:
        print(f"matdeform {args.command}: stage '{exc.stage}' failed: {exc.cause}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"matdeform {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
