"""Command line entry point."""
from __future__ import annotations

import argparse
import logging
import sys

from .bench import TESTS, RunSpec, SpecError, run
from .bpx import KINDS

log = logging.getLogger("thbbpx")


def build_parser():
    ap = argparse.ArgumentParser(prog="thbbpx", description="BPX preconditioning for hierarchical splines")
    ap.add_argument("test", choices=TESTS)
    ap.add_argument("--dim", type=int, default=2)
    ap.add_argument("--degree", type=int, default=2)
    ap.add_argument("--levels", type=int, default=4, help="number of levels")
    ap.add_argument("--decomp", default="tsupp", choices=KINDS)
    ap.add_argument("--smoother", default="sgs", choices=("sgs", "jacobi"))
    ap.add_argument("--adm", default=None, help="admissibility class: none, H:m or T:m")
    ap.add_argument("--basis", default="thb", choices=("hb", "thb"))
    ap.add_argument("--geometry", default=None, help="geometry file or shipped name")
    ap.add_argument("--mesh", default=None, help="mesh file for the custom test")
    ap.add_argument("--nel", type=int, default=None, help="base elements per direction (custom)")
    ap.add_argument("--out", default="results")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--allow-large", action="store_true", help="lift the level caps")
    ap.add_argument("-q", "--quiet", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    spec = RunSpec(test=args.test, dim=args.dim, degree=args.degree, levels=args.levels,
                   decomp=args.decomp, smoother=args.smoother, adm=args.adm, basis=args.basis,
                   geometry=args.geometry, out=args.out, seed=args.seed, mesh=args.mesh,
                   nel=args.nel, allow_large=args.allow_large)
    try:
        files = run(spec, log=log.info)
    except SpecError as exc:
        print(f"thbbpx: error: {exc}", file=sys.stderr)
        return 2
    for f in files:
        log.info("wrote %s", f)
    return 0


if __name__ == "__main__":
    sys.exit(main())
