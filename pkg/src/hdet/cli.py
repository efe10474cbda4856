"""Command line front end.

Three subcommands: ``run`` executes one experiment (from a preset, a JSON
config file, or both) and writes the metrics CSV plus its summary,
``compare`` builds the cross-run report and plot data files, ``presets``
lists the named configurations.  The default output directory comes from
``HDET_OUT_DIR`` when set.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import EXECUTION_MODES, PRESETS, load_config, preset_config_fields
from .metrics import compare, run_experiment
from .schedule import ConfigError

ENV_OUT_DIR = "HDET_OUT_DIR"


def default_out_dir() -> str:
    return os.environ.get(ENV_OUT_DIR) or "runs"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hdet",
        description="deterministic multi-replica training runs with "
                    "learning-rate fan-out, periodic parameter averaging "
                    "and a gradient-free LR controller")
    sub = parser.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="run one experiment and write metrics")
    runp.add_argument("--config", metavar="FILE",
                      help="JSON config file (fields of ExperimentConfig, "
                           "plus an optional 'preset' base)")
    runp.add_argument("--preset", metavar="NAME",
                      help="named preset; see 'hdet presets'")
    runp.add_argument("--seed", type=int, metavar="N",
                      help="override the global seed")
    runp.add_argument("--out", metavar="DIR",
                      help=f"output directory (default ${ENV_OUT_DIR} or ./runs)")
    runp.add_argument("--mode", choices=EXECUTION_MODES,
                      help="override the execution mode")
    runp.add_argument("--record-every", type=int, metavar="N",
                      help="override the metrics recording stride")
    runp.add_argument("--name", metavar="STEM",
                      help="output file stem (default <preset>-seed<seed>)")

    cmpp = sub.add_parser("compare",
                          help="cross-run report and plot data from metrics files")
    cmpp.add_argument("files", nargs="+", metavar="CSV",
                      help="metrics CSVs written by 'hdet run' (each needs "
                           "its .summary.txt sibling)")
    cmpp.add_argument("--out", metavar="DIR",
                      help="directory for plot data files "
                           "(default: next to each input)")

    sub.add_parser("presets", help="list the named presets")
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.preset,
                      global_seed=args.seed,
                      execution_mode=args.mode,
                      record_every=args.record_every)
    out = run_experiment(cfg, args.out or default_out_dir(), stem=args.name)
    marker = out.summary["divergence_step"] or "-"
    print(f"wrote {out.csv_path}")
    print(f"wrote {out.summary_path}")
    print(f"final_loss={out.summary['final_loss']} "
          f"divergence_step={marker} sync_count={out.summary['sync_count']}")
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    report = compare(args.files, out_dir=args.out)
    sys.stdout.write(report.text)
    for path in report.plot_paths:
        print(f"wrote {path}")
    return 0


def _cmd_presets() -> int:
    header = ("preset", "spread", "warm_start", "auto_lr", "eta_max")
    rows = [header]
    for name in PRESETS:
        fields = preset_config_fields(name)
        rows.append((name, str(fields["spread"]), str(fields["warm_start"]),
                     str(fields["auto_lr"]), str(fields["eta_max"])))
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    for row in rows:
        print("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "compare":
            return _cmd_compare(args)
        return _cmd_presets()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
