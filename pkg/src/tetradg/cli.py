"""Command line entry point: preprocess / run / report."""

from __future__ import annotations

import argparse
import json
import sys

from .driver import ConfigError, RunConfig, VersionError, preprocess, report, run


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--mesh", help="override: MSH mesh path")
    p.add_argument("--materials", help="override: material sidecar CSV")
    p.add_argument("--output", help="override: output directory")
    p.add_argument("--order", type=int)
    p.add_argument("--precision", type=int, choices=(32, 64))
    p.add_argument("--mechanisms", type=int)
    p.add_argument("--center-freq", type=float, dest="center_freq")
    p.add_argument("--nc", type=int)
    p.add_argument("--lambda-mode", dest="lambda_mode", choices=("fixed", "optimize"))
    p.add_argument("--lam", type=float)
    p.add_argument("--partitions", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--t-end", type=float, dest="t_end")
    p.add_argument("--cfl", type=float)
    p.add_argument("--receiver-dt", type=float, dest="receiver_dt")


def _config_from_args(args, mode: str) -> RunConfig:
    overrides = {
        k: getattr(args, k)
        for k in (
            "mesh",
            "materials",
            "output",
            "order",
            "precision",
            "mechanisms",
            "center_freq",
            "nc",
            "lambda_mode",
            "lam",
            "partitions",
            "width",
            "t_end",
            "cfl",
            "receiver_dt",
        )
    }
    overrides["mode"] = mode
    return RunConfig.from_yaml(args.config, overrides)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tetradg",
        description="ADER-DG viscoelastic wave solver with clustered local time stepping",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_pre = sub.add_parser("preprocess", help="cluster, partition, and write per-partition files")
    _add_config_flags(p_pre)

    p_run = sub.add_parser("run", help="run from preprocessed partition files")
    _add_config_flags(p_run)
    p_run.add_argument(
        "--both", action="store_true", help="preprocess first if needed (mode=both)"
    )

    p_rep = sub.add_parser("report", help="misfit report between two run directories")
    p_rep.add_argument("--run-dir", required=True)
    p_rep.add_argument("--reference-dir", required=True)
    p_rep.add_argument("--out", required=True, help="misfit CSV path")

    args = parser.parse_args(argv)
    try:
        if args.command == "preprocess":
            manifest = preprocess(_config_from_args(args, "preprocess"))
            print(json.dumps({
                "lambda": manifest["lambda"],
                "theoretical_speedup": manifest["theoretical_speedup"],
                "cluster_counts": manifest["cluster_counts"],
            }))
        elif args.command == "run":
            cfg = _config_from_args(args, "both" if args.both else "run")
            if cfg.mode == "both":
                preprocess(cfg)
            summary = run(cfg)
            print(json.dumps({
                "realized_speedup": summary["realized_speedup"],
                "wall_time_s": summary["wall_time_s"],
                "element_updates_lts": summary["element_updates_lts"],
            }))
        elif args.command == "report":
            entries = report(args.run_dir, args.reference_dir, args.out)
            print(json.dumps({"misfits": len(entries), "out": args.out}))
    except (ConfigError, VersionError, FileNotFoundError) as exc:
        print(f"tetradg: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
