"""Command line entry points for the experiment harness.

Exit codes: 0 ok, 2 config error, 3 incomplete grid, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import datapipe, evalstats, harness, unet
from .tensorcore import NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INCOMPLETE = 3
EXIT_NUMERIC = 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config merged over the defaults")
    p.add_argument("--out", default="out", help="output directory holding ledger/ and reports/")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes for independent runs")
    p.add_argument("--resume", action="store_true",
                   help="skip runs already in the ledger (otherwise they are recomputed and checked)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="inpaintssl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-phantom", help="write a synthetic phantom dataset")
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--modality", choices=("ct", "mr"), default="ct")
    g.add_argument("--out", required=True)

    for name, text in (("pretrain-grid", "16 pretrains, 80 fine-tunes, 5 supervised baselines"),
                       ("transfer-grid", "transfer strategies x learning rates, first and second runs"),
                       ("extent-sweep", "pretraining on supersets of the unlabeled data"),
                       ("directional", "optimal SSL vs supervised at 5%% labels over 5 seeds")):
        _common(sub.add_parser(name, help=text))
    for name, text in (("compare-clinical", "median clinical percent errors, SSL vs supervised"),
                       ("stats", "Wilcoxon ranking of pretraining strategies"),
                       ("show-ledger", "list ledger entries")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config")
        p.add_argument("--out", default="out")
    return ap


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def run(args) -> int:
    if args.command == "gen-phantom":
        ds = harness.cmd_gen_phantom(args.size, args.count, args.seed, args.out, args.modality)
        print(f"wrote {len(ds.phantoms.images)} phantoms to {args.out}")
        return EXIT_OK
    if args.command == "show-ledger":
        for r in harness.show_ledger(args.out):
            metric = "" if r["metric"] is None else f"{r['metric']:.4g}"
            print(f"{r['hash'][:12]}  {r['kind']:<10} {metric:>10}  {r['run']}")
        return EXIT_OK
    cfg = harness.load_config(args.config)
    if args.command in ("compare-clinical", "stats"):
        fn = harness.cmd_compare_clinical if args.command == "compare-clinical" else harness.cmd_stats
        _print_json(fn(cfg, args.out))
        return EXIT_OK
    if args.resume:
        harness.Ledger(args.out).clean_partial()
    fn = {"pretrain-grid": harness.cmd_pretrain_grid, "transfer-grid": harness.cmd_transfer_grid,
          "extent-sweep": harness.cmd_extent_sweep, "directional": harness.directional_check}[args.command]
    result = fn(cfg, args.out, resume=args.resume, jobs=args.jobs)
    if args.command == "transfer-grid":
        result = {k: {kk: v[kk] for kk in ("n_first", "n_second", "best")} for k, v in result.items()}
    _print_json(result)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (harness.ConfigError, datapipe.ConfigError, unet.ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except evalstats.IncompleteGridError as exc:
        print(f"incomplete grid: {len(exc.missing)} missing cells", file=sys.stderr)
        for m in exc.missing:
            print("  missing: " + " ".join(map(str, m)), file=sys.stderr)
        return EXIT_INCOMPLETE
    except (NumericError, harness.DeterminismError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
