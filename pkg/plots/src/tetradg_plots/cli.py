"""Command line entry point: tetradg-plot <kind> --in ... --out ..."""

from __future__ import annotations

import argparse
import sys

from .figures import plot_cluster_density, plot_partition_loads, plot_seismogram_compare
from .io import InputError


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tetradg-plot", description="figures from tetradg CSV outputs"
    )
    sub = parser.add_subparsers(dest="kind", required=True)

    p = sub.add_parser("seismogram-compare", help="overlay + difference panels")
    p.add_argument("--in", dest="input", required=True, help="run seismogram CSV")
    p.add_argument("--ref", required=True, help="reference seismogram CSV")
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--cutoff-hz", type=float, default=None)

    p = sub.add_parser("cluster-density", help="timestep density with cluster boxes")
    p.add_argument("--in", dest="input", required=True, help="clustering report CSV")
    p.add_argument("--out", required=True)

    p = sub.add_parser("partition-loads", help="stacked per-cluster partition loads")
    p.add_argument("--in", dest="input", required=True, help="partition report CSV")
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        if args.kind == "seismogram-compare":
            out = plot_seismogram_compare(args.input, args.ref, args.out, args.cutoff_hz)
            print(" ".join(f"E_{c}={v:.6e}" for c, v in zip("uvw", out["misfit"])))
        elif args.kind == "cluster-density":
            out = plot_cluster_density(args.input, args.out)
            print(f"boxes={len(out['counts'])} total_area={out['areas'].sum():.6f}")
        else:
            out = plot_partition_loads(args.input, args.out)
            print(f"partitions={len(out['totals'])} ratio={out['ratio']:.3f}")
    except (InputError, FileNotFoundError, ValueError) as exc:
        print(f"tetradg-plot: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
