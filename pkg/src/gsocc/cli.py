"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, KeyValueConfig

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _threads(n: int | None):
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n or os.cpu_count())


def _synth(args):
    pipeline.cmd_synth(args.config, args.out, args.seed)


def _fit(args):
    cfg, scene = pipeline.fit_config_from_file(args.config, args.seed)
    scene = args.scene or scene
    if scene is None:
        raise ConfigError("no scene directory (set 'scene' or pass --scene)", key="scene")
    res = pipeline.cmd_fit(scene, cfg, args.out, dump_trace=args.dump_trace)
    print(f"IoU {res.metrics.iou:.4f} mIoU {res.metrics.miou:.4f}")


def _forward(args):
    pipeline.cmd_forward(args.config, args.out, args.seed, args.blocks)


def _eval(args):
    cfg = KeyValueConfig.load(args.config)
    cfg.check_known({"pred", "gt", "classes", "empty_index"})
    base = Path(args.config).parent
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = pipeline.cmd_eval(base / cfg.str("pred", required=True), base / cfg.str("gt", required=True),
                            out / "metrics.csv", cfg.words("classes"), cfg.int("empty_index", 0))
    print(f"IoU {res.iou:.4f} mIoU {res.miou:.4f}")


def _multires(args):
    pipeline.cmd_splat_multires(args.config, args.out)


def _export(args):
    cfg = KeyValueConfig.load(args.config)
    cfg.check_known({"input", "empty_index"})
    src = Path(args.config).parent / cfg.str("input", required=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = pipeline.cmd_export_ply(src, out / (src.stem + ".ply"), cfg.int("empty_index", 0))
    print(f"{n} vertices")


COMMANDS = {
    "synth": _synth, "fit": _fit, "forward": _forward, "eval": _eval,
    "splat-multires": _multires, "export-ply": _export,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsocc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key = value configuration file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override configured seeds")
        p.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread cap")
        p.add_argument("--dump-trace", action="store_true", help="write per-iteration trace CSV")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "fit":
            p.add_argument("--scene", default=None, help="scene directory written by synth")
        if name == "forward":
            p.add_argument("--blocks", type=int, default=None, help="number of refinement blocks")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads(args.threads):
            COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
