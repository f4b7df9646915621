"""Command line entry point: ``meshsens <command> [--config cfg.json] ...``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import experiments as ex
from .mesh import write_mesh

RUNNERS = {
    "convergence": ex.run_convergence,
    "table-smooth": ex.run_table_smooth,
    "table-random": ex.run_table_random,
    "validate": ex.run_validate,
    "mesh-info": ex.mesh_info,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meshsens", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--out", help="output directory (default: config 'outputs' or ./out)")
        sp.add_argument("--seed", type=int, help="master seed for random velocities")
        sp.add_argument("--repeats", type=int, help="random repeats per (N, t)")
        sp.add_argument("--threads", type=int, help="worker threads (env MESHSENS_THREADS)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "mesh-info":
            sp.add_argument("--write-mesh", metavar="PATH", help="also write the (first) mesh")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ex.load_config(args.config, args.command, repeats=args.repeats)
        if args.seed is not None:
            cfg.velocity = dict(cfg.velocity, seed=args.seed)
        cfg.threads = args.threads if args.threads is not None else max(cfg.threads, ex.default_threads())
        result = RUNNERS[args.command](cfg)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    outdir = args.out or cfg.outputs
    csv_path, json_path = result.write(outdir)
    if args.command == "mesh-info" and args.write_mesh:
        write_mesh(cfg.meshes()[0][1], args.write_mesh)

    print(result.csv_text(), end="")
    print(f"# wrote {csv_path} and {json_path}")
    if result.failures:
        print(f"# {len(result.failures)} check(s) failed:", file=sys.stderr)
        for f in result.failures:
            print(f"#   {f}", file=sys.stderr)
        return 1
    print("# all checks passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
