"""``coldstart`` command line.

Exit codes: 0 success, 1 usage/configuration error, 2 data or format
error, 3 benchmark finished with failed cells.
"""

from __future__ import annotations

import argparse
import os
import sys
from importlib.resources import files
from pathlib import Path

from coldstart import __version__
from coldstart.bench import BenchConfig, run_benchmark
from coldstart.errors import ColdStartError, ConfigError, FormatError
from coldstart.features import read_feature_table
from coldstart.metrics import score, write_scores_csv
from coldstart.selectors import (
    PROXY_MEASURE,
    ROI_MODES,
    STRATEGIES,
    SelectorOptions,
    pool_scores,
    run_selector,
    select,
)
from coldstart.uncertainty import read_stacks
from coldstart.volumes import (
    preprocess_ct,
    preprocess_mr,
    read_pool,
    read_volume,
    roi_from_mask,
    write_volume,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PARTIAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _env_threads() -> int:
    try:
        return max(1, int(os.environ.get("COLOSSAL_THREADS", "1")))
    except ValueError:
        return 1


def _write_run_log(out_path: Path, args: argparse.Namespace, directory: bool = False) -> None:
    """Echo version and resolved flags next to the outputs (no timestamps, so reruns match)."""
    target = out_path if directory else out_path.parent
    target.mkdir(parents=True, exist_ok=True)
    lines = [f"coldstart {__version__}", f"command: {args.command}"]
    for key in sorted(vars(args)):
        # output locations are left out so reruns into fresh directories match
        if key not in ("command", "func", "out", "output"):
            lines.append(f"{key} = {getattr(args, key)}")
    name = "run.cli.log" if directory else f"{out_path.name}.log"
    (target / name).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_preprocess(args) -> int:
    grid = read_volume(args.input)
    out = preprocess_ct(grid) if args.modality == "ct" else preprocess_mr(grid)
    write_volume(out, args.output)
    _write_run_log(Path(args.output), args)
    return EXIT_OK


def _mask_rois(mask_dir, margin):
    rois = {}
    for p in sorted(Path(mask_dir).glob("*.vol")):
        rois[p.stem] = roi_from_mask(read_volume(p, "binary-mask"), margin)
    return rois


def cmd_select(args) -> int:
    options = SelectorOptions(
        grid_g=args.grid,
        birch_threshold=args.birch_threshold,
        ct_window=tuple(args.ct_window) if args.ct_window else None,
    )
    strategy = args.strategy
    if args.pool:
        pool = read_pool(args.pool, args.modality)
        result = run_selector(strategy, pool, args.budget, args.roi_mode, args.seed, options=options)
    elif args.stacks:
        if strategy not in PROXY_MEASURE and strategy != "random":
            raise ConfigError(f"--stacks feeds proxy strategies only, not {strategy!r}")
        rois = None
        if args.roi_mode == "local":
            if not args.masks:
                raise ConfigError("--roi-mode local with --stacks needs --masks")
            rois = _mask_rois(args.masks, options.roi_margin)
        stacks = read_stacks(args.stacks, rois)
        if strategy == "random":
            result = select("random", args.budget, ids=[s.id for s in stacks], seed=args.seed,
                            roi_mode=args.roi_mode)
        else:
            scores = pool_scores(stacks, PROXY_MEASURE[strategy], args.roi_mode)
            result = select(strategy, args.budget, scores=scores, roi_mode=args.roi_mode)
    else:
        if strategy in PROXY_MEASURE:
            raise ConfigError(f"{strategy} needs --stacks or --pool, not --features")
        table = read_feature_table(args.features)
        result = select(strategy, args.budget, table=table, seed=args.seed,
                        roi_mode=args.roi_mode, options=options)
    result.write(args.out)
    _write_run_log(Path(args.out), args)
    return EXIT_OK


def _resolve_config(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    preset = name if name.endswith(".cfg") else f"{name}.cfg"
    packaged = files("coldstart").joinpath("presets", preset)
    if packaged.is_file():
        return Path(str(packaged))
    raise ConfigError(f"config file {name!r} not found (and no preset of that name)")


def cmd_benchmark(args) -> int:
    config = BenchConfig.from_file(_resolve_config(args.config))
    out = Path(args.out)
    report = run_benchmark(config, out, threads=args.threads)
    _write_run_log(out, args, directory=True)
    if report.failed:
        for cell in report.failed:
            print(f"cell {cell.name} failed: {cell.error}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _mask_pairs(pred: Path, gt: Path):
    if pred.is_dir() != gt.is_dir():
        raise FormatError("--pred and --gt must both be files or both be directories")
    if not pred.is_dir():
        return [(pred.stem, pred, gt)]
    names = sorted(p.name for p in pred.glob("*.vol"))
    missing = [n for n in names if not (gt / n).exists()]
    if missing:
        raise FormatError(f"no ground-truth mask for {missing[0]}")
    return [(Path(n).stem, pred / n, gt / n) for n in names]


def cmd_metrics(args) -> int:
    rows = []
    for id_, p, g in _mask_pairs(Path(args.pred), Path(args.gt)):
        pm, gm = read_volume(p, "binary-mask"), read_volume(g, "binary-mask")
        rows.append((id_, score(pm, gm, gm.spacing)))
    write_scores_csv(rows, args.out)
    _write_run_log(Path(args.out), args)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coldstart", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"coldstart {__version__}")
    parser.add_argument("--threads", type=int, default=_env_threads(),
                        help="worker cap (default: $COLOSSAL_THREADS or 1); never changes outputs")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="CT or MR intensity normalization to [0, 1]")
    p.add_argument("--modality", required=True, choices=["ct", "mr"])
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("select", help="run one selection strategy")
    p.add_argument("--strategy", required=True, choices=STRATEGIES)
    p.add_argument("--budget", required=True, type=int)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--features", help="feature CSV (id,f0,...)")
    src.add_argument("--stacks", help="directory of <id>/run_NNN.vol prediction stacks")
    src.add_argument("--pool", help="directory with images/<id>.vol and optional masks/<id>.vol")
    p.add_argument("--roi-mode", default="global", choices=ROI_MODES)
    p.add_argument("--masks", help="ground-truth masks <id>.vol for local ROIs with --stacks")
    p.add_argument("--modality", default="synthetic", choices=["CT", "MR", "synthetic"])
    p.add_argument("--ct-window", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--birch-threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("benchmark", help="run the experiment matrix from a config file")
    p.add_argument("--config", required=True, help="config path or preset name (smoke, full, heart)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("metrics", help="Dice / HD95 for predicted vs ground-truth masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        build_parser().error("--threads must be at least 1")
    try:
        return args.func(args)
    except ColdStartError as exc:
        print(f"coldstart {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"coldstart {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
