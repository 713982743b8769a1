"""Command line interface: ``mixedbih converge|mg-bench CONFIG --out FILE``.

Exit codes: 0 success, 2 inadmissible configuration, 3 solver nonconvergence.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .assembly import InadmissibleSpec
from .elements import ElementError
from .harness import (
    BENCH_COLUMNS,
    CONVERGE_COLUMNS,
    ConfigError,
    convergence_study,
    load_config,
    mg_benchmark,
    write_csv,
)
from .mesh import MeshError
from .solver import SolverError

EXIT_OK = 0
EXIT_INADMISSIBLE = 2
EXIT_NONCONVERGED = 3


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="mixedbih", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("converge", "convergence study against a manufactured solution"),
        ("mg-bench", "iteration counts of the multigrid-preconditioned solver"),
    ):
        p = sub.add_parser(name, help=helptext, parents=[common])
        p.add_argument("config", help="key=value configuration file")
        p.add_argument("--out", required=True, help="CSV output path")
        p.add_argument("--dump-matrix", metavar="PATH", help="write assembled matrices as 1-based COO text")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "converge":
            rows = convergence_study(cfg, dump_matrix=args.dump_matrix)
            columns = CONVERGE_COLUMNS
        else:
            rows = mg_benchmark(cfg, dump_matrix=args.dump_matrix)
            columns = BENCH_COLUMNS
    except (ConfigError, InadmissibleSpec, MeshError, ElementError) as exc:
        print(f"inadmissible configuration: {exc}", file=sys.stderr)
        return EXIT_INADMISSIBLE
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    write_csv(rows, columns, args.out)
    failed = [r for r in rows if not r["converged"]]
    if failed:
        for r in failed:
            print(f"no convergence: k={r['k']} 1/h={r['inv_h']} after {r['iterations']} iterations", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
