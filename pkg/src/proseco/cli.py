"""Command-line entry point.

Exit codes: 0 success, 1 contract/config/usage error, 2 I/O or format error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .config import RunConfig
from .errors import ContractError
from .proposals import SSParams, manifest_path, precompute_cache, read_cache, read_cache_entry, read_manifest

logger = logging.getLogger("proseco")

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; usage errors here are contract errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONTRACT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="proseco", description="Unsupervised detector pretraining with localized contrastive targets.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every step at INFO level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ss = sub.add_parser("ss-precompute", help="run Selective Search over a directory of .ppm images")
    ss.add_argument("directory", help="directory holding <image_id>.ppm files")
    ss.add_argument("--out", required=True, help="cache file to write (manifest goes to <out>.manifest)")
    ss.add_argument("--scales", type=float, nargs="+", default=[100.0, 300.0],
                    help="segmentation scale parameters k (default: 100 300)")
    ss.add_argument("--min-size", type=int, default=20, help="minimum segment size in pixels (default: 20)")

    pt = sub.add_parser("pretrain", help="run or resume pretraining from a JSON config")
    pt.add_argument("--config", required=True, help="RunConfig JSON file; unknown keys are rejected")
    pt.add_argument("--out", help="output directory (default: out_dir from the config)")
    pt.add_argument("--resume", help="checkpoint to resume from; must match the config hash")

    vf = sub.add_parser("verify", help="run the built-in oracle suites")
    vf.add_argument("--suite", choices=["all", "matching", "objectives", "geometry", "grad"], default="all",
                    help="which suite to run (default: all)")
    vf.add_argument("--seed", type=int, default=0, help="seed for the random cases (default: 0)")

    ic = sub.add_parser("inspect-cache", help="show the stored proposals for one image")
    ic.add_argument("cache", help="proposal cache file")
    ic.add_argument("image_id", help="image id (file stem of the source image)")

    ep = sub.add_parser("export-plots", help="split a metrics CSV into one plot-ready series per metric")
    ep.add_argument("metrics", help="metrics.csv written by pretrain")
    ep.add_argument("--out", required=True, help="directory for <metric>.csv series")
    return p


def cmd_ss_precompute(args) -> int:
    params = SSParams(tuple(args.scales), args.min_size)
    if not Path(args.directory).is_dir():
        raise FileNotFoundError(f"image directory not found: {args.directory}")
    manifest = precompute_cache(args.directory, params, args.out)
    skipped = sum(1 for v in manifest.values() if v is None)
    print(f"wrote {args.out}: {len(manifest) - skipped} images, {skipped} skipped")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .train import pretrain

    cfg = RunConfig.load(args.config)
    out = pretrain(cfg, out_dir=args.out, resume=args.resume)
    print(f"finished {cfg.iterations} iterations; outputs in {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suites

    return EXIT_OK if run_suites(args.suite, seed=args.seed) else EXIT_CONTRACT


def cmd_inspect_cache(args) -> int:
    mpath = manifest_path(args.cache)
    if mpath.exists():
        manifest = read_manifest(mpath)
        if args.image_id not in manifest:
            raise ContractError(f"image {args.image_id!r} is not in {args.cache}")
        offset = manifest[args.image_id]
        if offset is None:
            print(f"{args.image_id}: skipped during precompute")
            return EXIT_OK
        entry = read_cache_entry(args.cache, offset)
    else:
        entries = read_cache(args.cache)
        if args.image_id not in entries:
            raise ContractError(f"image {args.image_id!r} is not in {args.cache}")
        entry = entries[args.image_id]
    print(f"{entry.image_id}: {len(entry)} boxes")
    for row in entry.data:
        print("  " + " ".join(f"{v:.4f}" for v in row))
    return EXIT_OK


def cmd_export_plots(args) -> int:
    with open(args.metrics, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ContractError(f"{args.metrics}: empty metrics file") from None
        rows = list(reader)
    if not header or header[0] != "step":
        raise ContractError(f"{args.metrics}: first column must be 'step'")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for col, name in enumerate(header[1:], start=1):
        path = out / f"{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", name])
            w.writerows([r[0], r[col]] for r in rows)
        print(path)
    return EXIT_OK


COMMANDS = {
    "ss-precompute": cmd_ss_precompute,
    "pretrain": cmd_pretrain,
    "verify": cmd_verify,
    "inspect-cache": cmd_inspect_cache,
    "export-plots": cmd_export_plots,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or usage error
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
