"""Command-line surface tying the toolkit into runnable experiments.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every numeric result
is also written as CSV next to the primary output.
"""

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, dictionary, metrics, solvers, unfolded
from .asc_model import SpatialGrid

PAPER_SCALE = 80


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _set_threads(n):
    """Best-effort BLAS thread cap (flag overrides ASCKIT_THREADS)."""
    if n is None:
        n = os.environ.get("ASCKIT_THREADS")
    if n is None:
        return
    n = int(n)
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _load_experiment(args) -> dataio.ExperimentConfig:
    cfg = dataio.load_config(args.config) if args.config else dataio.ExperimentConfig()
    if getattr(args, "paper_scale", False):
        cfg.radar.n_freq = cfg.radar.n_aspect = PAPER_SCALE
        cfg.n_x = cfg.n_y = PAPER_SCALE
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    return cfg


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _load_image_vec(path):
    img = dataio.read_complex_image(path)
    return img.reshape(-1, order="F"), img.shape


def _code_to_grid(z, d):
    # column k covers cell (k // n_y, k % n_y): reshape row-major.
    return np.asarray(z).reshape(d.spatial.n_x, d.spatial.n_y)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_dict_build(args) -> int:
    cfg = _load_experiment(args)
    spatial = cfg.spatial_grid()
    budget = args.max_bytes if args.max_bytes else dictionary.DEFAULT_MEMORY_BUDGET
    d = dictionary.build_dictionary(cfg.radar, spatial, max_bytes=budget)
    dictionary.save_dictionary(args.out, d)
    bound, residual = dictionary.spectral_step_bound(d, return_residual=True)
    _write_csv(Path(args.out).with_suffix(".meta.csv"),
               ["n_freq", "n_aspect", "n_x", "n_y", "bytes", "step_bound", "bound_residual"],
               [[d.grid.n_freq, d.grid.n_aspect, d.spatial.n_x, d.spatial.n_y,
                 d.phi.nbytes, repr(bound), repr(residual)]])
    print(f"dictionary {d.n_rows}x{d.n_cols} -> {args.out} "
          f"(step bound {bound:.3f}, stable step < {2.0 / bound:.5f})")
    return 0


def cmd_synth(args) -> int:
    cfg = _load_experiment(args)
    out_dir = args.out_dir or cfg.dataset.out_dir
    manifest = dataio.synthesize_dataset(
        cfg.dataset.distribution, cfg.dataset.n_train, cfg.dataset.n_val,
        cfg.dataset.n_test, cfg.radar, cfg.spatial_grid(), cfg.seed, out_dir)
    counts = {k: len(v["images"]) for k, v in manifest["splits"].items()}
    _write_csv(Path(out_dir) / "splits.csv", ["split", "n_images"],
               sorted(counts.items()))
    print(f"dataset -> {out_dir} {counts}")
    return 0


def _solve_one(method, d, s, cfg, args):
    if method == "ista":
        return solvers.ista_solve(d, s, cfg.ista, check_step=False)
    if method == "omp":
        return solvers.omp_solve(d, s, cfg.omp_sparsity), None
    if method == "amp":
        return solvers.amp_solve(d, s, cfg.amp)
    if method == "unfolded":
        if not args.checkpoint:
            raise UsageError("solve --method unfolded requires --checkpoint")
        params = unfolded.load_checkpoint(args.checkpoint, d)
        z, _, _ = unfolded.forward_network(params, d, s)
        return z, None
    raise UsageError(f"unknown method {method!r}")


def cmd_solve(args) -> int:
    cfg = _load_experiment(args)
    d = dictionary.load_dictionary(args.dict)
    s, shape = _load_image_vec(args.input)
    if args.normalize:
        s = s / np.linalg.norm(s)
    z, trace = _solve_one(args.method, d, s, cfg, args)
    recon = dictionary.apply(d, z)
    res = metrics.residual_loss(s, recon)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.write_complex_image(str(out) + ".code.cimg", _code_to_grid(z, d))
    dataio.write_complex_image(str(out) + ".recon.cimg",
                               recon.reshape(shape, order="F"))
    _write_csv(str(out) + ".summary.csv",
               ["method", "residual_loss", "nnz"],
               [[args.method, repr(res), int(np.count_nonzero(np.abs(z) > 1e-12))]])
    if trace is not None:
        trace.to_csv(str(out) + ".trace.csv")
    print(f"{args.method}: residual {res:.6f} -> {out}.*")
    return 0


def cmd_train(args) -> int:
    cfg = _load_experiment(args)
    d = dictionary.load_dictionary(args.dict)
    train_imgs = [dataio.preprocess(img, min(img.shape)) for img in
                  dataio.load_split(args.data, "train")]
    val_imgs = [dataio.preprocess(img, min(img.shape)) for img in
                dataio.load_split(args.data, "val")]
    params, log = unfolded.train(train_imgs, cfg.train, d,
                                 n_stages=args.stages or cfg.n_stages,
                                 val_dataset=val_imgs)
    unfolded.save_checkpoint(args.out, params, d)
    log.to_csv(args.log or str(Path(args.out).with_suffix(".log.csv")))
    print(f"trained {params.n_stages} stages -> {args.out} "
          f"(final train loss {log.train_loss[-1]:.6f}, val {log.val_loss[-1]:.6f})")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_experiment(args)
    d = dictionary.load_dictionary(args.dict)
    test_imgs = [dataio.preprocess(img, min(img.shape)) for img in
                 dataio.load_split(args.data, args.split)]

    if args.mode == "methods":
        methods = args.methods.split(",")
        configs = {"ista": cfg.ista, "omp": cfg.omp_sparsity, "amp": cfg.amp}
        if "unfolded" in methods:
            if not args.checkpoint:
                raise UsageError("bench with unfolded requires --checkpoint")
            configs["unfolded"] = unfolded.load_checkpoint(args.checkpoint, d)
        rows = metrics.run_benchmark(test_imgs, methods, d, configs, repeats=args.repeats)
    else:
        stage_counts = [int(x) for x in args.stages.split(",")]
        train_imgs = [dataio.preprocess(img, min(img.shape)) for img in
                      dataio.load_split(args.data, "train")]
        val_imgs = [dataio.preprocess(img, min(img.shape)) for img in
                    dataio.load_split(args.data, "val")]
        params_by_stage = unfolded.train_stage_sweep(train_imgs, val_imgs, cfg.train,
                                                     d, stage_counts)
        rows = metrics.run_stage_sweep(test_imgs, d, params_by_stage, repeats=args.repeats)

    metrics.write_benchmark_csv(rows, args.out)
    table = metrics.format_benchmark_table(rows)
    with open(Path(args.out).with_suffix(".txt"), "w") as fh:
        fh.write(table)
    print(table, end="")
    return 0


def cmd_extract(args) -> int:
    cfg = _load_experiment(args)
    d = dictionary.load_dictionary(args.dict)
    s, _ = _load_image_vec(args.input)
    if args.normalize:
        s = s / np.linalg.norm(s)
    z, _ = _solve_one(args.method, d, s, cfg, args)
    ascs = metrics.extract_ascs(z, d, args.floor)
    _write_csv(args.out, ["grid_index", "x", "y", "amp_re", "amp_im", "magnitude"],
               [[a.grid_index, repr(a.x), repr(a.y), repr(a.amplitude.real),
                 repr(a.amplitude.imag), repr(abs(a.amplitude))] for a in ascs])
    print(f"{len(ascs)} scatterers -> {args.out}")
    return 0


def cmd_export(args) -> int:
    img = dataio.read_complex_image(args.input)
    dataio.export_magnitude_image(img, args.out, db=args.db, db_floor=args.db_floor)
    print(f"raster -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="BLAS thread cap")


def build_parser() -> _Parser:
    parser = _Parser(prog="asckit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_dict = sub.add_parser("dict", help="dictionary utilities")
    dict_sub = p_dict.add_subparsers(dest="dict_command", required=True, parser_class=_Parser)
    p = dict_sub.add_parser("build", help="build and cache a dictionary")
    _add_common(p)
    p.add_argument("--out", default="dictionary.ascdict")
    p.add_argument("--paper-scale", action="store_true",
                   help=f"use {PAPER_SCALE}-sample grids on every axis")
    p.add_argument("--max-bytes", type=int, default=None)
    p.set_defaults(func=cmd_dict_build)

    p = sub.add_parser("synth", help="synthesize a dataset with ground truth")
    _add_common(p)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--paper-scale", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("solve", help="run one solver on one image")
    _add_common(p)
    p.add_argument("--method", required=True, choices=["ista", "omp", "amp", "unfolded"])
    p.add_argument("--dict", required=True, help="dictionary cache file")
    p.add_argument("--input", required=True, help="complex image file")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", default="solve_out")
    p.add_argument("--normalize", action="store_true", help="unit-L2 the input first")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", help="train the unrolled network")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--dict", required=True)
    p.add_argument("--out", default="model.ckpt")
    p.add_argument("--log", default=None)
    p.add_argument("--stages", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="method comparison or stage sweep")
    _add_common(p)
    p.add_argument("--mode", choices=["methods", "stages"], default="methods")
    p.add_argument("--data", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--methods", default="ista,omp,amp")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--stages", default="2,4,6,8")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("extract", help="solve then list scatterers as CSV")
    _add_common(p)
    p.add_argument("--method", default="ista", choices=["ista", "omp", "amp", "unfolded"])
    p.add_argument("--dict", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--floor", type=float, default=None)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--out", default="ascs.csv")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("export", help="export magnitude raster (PGM)")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--db", action="store_true")
    p.add_argument("--db-floor", type=float, default=-40.0)
    p.set_defaults(func=cmd_export)
    return parser


def cli_dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return 1
    except SystemExit as err:  # --help
        return int(err.code or 0)
    try:
        _set_threads(args.threads)
        return int(args.func(args) or 0)
    except UsageError as err:
        print(err, file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError, solvers.DivergenceError,
            unfolded.TrainingDivergedError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
