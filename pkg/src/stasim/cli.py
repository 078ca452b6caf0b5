"""``sta`` command line: compress, simulate, idp-demo, figures.

Exit codes: 0 ok, 1 diagnostics (bad config, invalid program, bad geometry),
2 pattern violation.  ``STA_LOG`` sets the log level (e.g. ``STA_LOG=debug``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import compiler
from .dmme.engine import EngineGeometry
from .errors import PatternViolation, StaError
from .nmformat import NmConfig, compress, compression_ratio, decompress, random_nm_matrix, read_nmsp, write_nmsp
from .pruner import IdpSchedule, group_topn_mask, masked_quadratic, quantize, run_idp

log = logging.getLogger("stasim")

EXIT_OK, EXIT_DIAG, EXIT_PATTERN = 0, 1, 2


def _setup_logging():
    level = os.environ.get("STA_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _emit(obj):
    print(json.dumps(obj, indent=2))


def _load_dense(path: str, q: int, frac_bits: int) -> np.ndarray:
    arr = np.load(path) if path.endswith(".npy") else np.loadtxt(path, delimiter="," if path.endswith(".csv") else None)
    arr = np.atleast_2d(arr)
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype(np.int64)
    if np.all(arr == np.rint(arr)):
        return arr.astype(np.int64)
    return quantize(arr, frac_bits, q)


def _parse_dims(text: str) -> tuple[int, int]:
    rows, cols = (int(x) for x in text.lower().split("x"))
    return rows, cols


def cmd_compress(args) -> int:
    nm = NmConfig.parse(args.nm, args.q)
    rng = np.random.default_rng(args.seed)
    if args.input:
        dense = _load_dense(args.input, nm.q, args.frac_bits)
    else:
        rows, cols = _parse_dims(args.synthetic)
        if args.prune:
            hi = (1 << (nm.q - 1)) - 1
            dense = rng.integers(-hi, hi + 1, size=(rows, cols))
        else:
            dense = random_nm_matrix(rng, rows, cols, nm)
    if args.prune:
        dense = dense * group_topn_mask(dense, nm.n, nm.m).bits
    comp = compress(dense, nm)
    out = args.out or "."
    path = out if out.endswith(".nmsp") else os.path.join(out, "weights.nmsp")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    size = write_nmsp(comp, path)
    roundtrip = bool(np.array_equal(decompress(read_nmsp(path)), dense))
    if not roundtrip:
        log.error("round trip through %s changed the matrix", path)
        return EXIT_DIAG
    cr = compression_ratio(nm, comp.reduction_extent)
    _emit({"pattern": str(nm), "q": nm.q, "rows": comp.rows, "cols": comp.cols,
           "compression_ratio": round(float(cr), 3),
           "counted_ratio": round(nm.q * comp.rows * comp.cols / comp.storage_bits(), 3),
           "dense_bytes": nm.q * comp.rows * comp.cols // 8, "nmsp_bytes": size,
           "path": path, "roundtrip": roundtrip})
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .report import simulate

    cfg = compiler.load_model_config(args.config)
    nm = NmConfig.parse(args.nm, args.q)
    geometry = EngineGeometry.parse(args.geometry, nm) if args.geometry else EngineGeometry.default(nm)
    report = simulate(cfg, nm, geometry, args.mode, args.seed, functional=not args.cycles_only)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w") as fh:
            fh.write(report.to_json())
        report.write_csv(os.path.join(args.out, "blocks.csv"))
        program = compiler.lower(compiler.build_ir(cfg), nm, args.mode)
        compiler.write_jsonl(program, os.path.join(args.out, "program.jsonl"))
        with open(os.path.join(args.out, "program.bin"), "wb") as fh:
            fh.write(compiler.to_binary(program))
    print(report.to_json())
    print("block,kind,cycles")
    for b in report.blocks:
        print(f"{b['name']},{b['kind']},{b['cycles']}")
    return EXIT_OK


def cmd_idp_demo(args) -> int:
    rng = np.random.default_rng(args.seed)
    target = rng.normal(0.0, 1.0, size=(args.rows, args.cols))
    schedule = IdpSchedule(args.m, args.n_end, args.epochs, args.lr, args.reg)
    winners = run_idp(target + rng.normal(0.0, 0.1, size=target.shape), schedule, masked_quadratic(target))
    manifest = winners.save(args.out or "idp_out")
    with open(manifest) as fh:
        entries = [json.loads(line) for line in fh]
    _emit({"manifest": manifest, "winners": entries})
    return EXIT_OK


def cmd_figures(args) -> int:
    from .figures import write_figures

    paths = write_figures(args.out or "figures", args.seed)
    _emit({"files": paths})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory (compress also accepts a .nmsp path)")

    parser = argparse.ArgumentParser(prog="sta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", parents=[common], help="bitmap-compress an N:M weight matrix")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--in", dest="input", help="dense weights (.npy, .csv or whitespace text)")
    src.add_argument("--synthetic", metavar="RxC", help="generate a random matrix instead")
    p.add_argument("--nm", default="2:4")
    p.add_argument("--q", type=int, default=16)
    p.add_argument("--frac-bits", type=int, default=12, help="quantisation of float inputs")
    p.add_argument("--prune", action="store_true", help="apply group-wise magnitude masking first")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("simulate", parents=[common], help="compile and simulate a model")
    p.add_argument("--config", required=True,
                   help=f"model JSON file or preset ({', '.join(compiler.PRESETS)})")
    p.add_argument("--nm", default="2:8")
    p.add_argument("--q", type=int, default=16)
    p.add_argument("--geometry", help="HxRxC; default H=M/N, R=16, C=8")
    p.add_argument("--mode", choices=("auto", "dense"), default="auto")
    p.add_argument("--cycles-only", action="store_true", help="skip the functional datapath")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("idp-demo", parents=[common], help="inherited dynamic pruning on a toy objective")
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--n-end", type=int, default=2)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--reg", type=float, default=0.0)
    p.add_argument("--rows", type=int, default=64)
    p.add_argument("--cols", type=int, default=32)
    p.set_defaults(func=cmd_idp_demo)

    p = sub.add_parser("figures", parents=[common], help="write the CSV tables")
    p.set_defaults(func=cmd_figures)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PatternViolation as exc:
        print(f"error: pattern violation: {exc}", file=sys.stderr)
        return EXIT_PATTERN
    except (StaError, ValueError, OSError) as exc:
        diags = getattr(exc, "diagnostics", None)
        for d in diags or [exc]:
            print(f"error: {d}", file=sys.stderr)
        return EXIT_DIAG


if __name__ == "__main__":
    sys.exit(main())
