"""Desk-scale benchmark: strategy x budget x ROI-mode matrix on synthetic pools.

For every cell the selected pool samples train the surrogate segmenter,
which is then scored (Dice, HD95) on a held-out validation pool. Random
selection runs once per configured seed and its mean is the baseline
every other strategy is compared against.

Config files hold one ``key = value`` per line; ``#`` starts a comment.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from coldstart import __version__
from coldstart.errors import ColdStartError, ConfigError
from coldstart.metrics import SegScore, fmt, score
from coldstart.selectors import (
    PROXY_MEASURE,
    ROI_MODES,
    STRATEGIES,
    SelectionResult,
    SelectorOptions,
    pool_features,
    pool_stacks,
    run_selector,
)
from coldstart.surrogate import surrogate_predict, surrogate_train, voxel_descriptors
from coldstart.synthetic import SyntheticSpec, generate_pool

REQUIRED = object()

DEFAULTS = {
    "strategies": REQUIRED,
    "budgets": "5,10",
    "roi_modes": "global",
    "random_seeds": "0..14",
    "selector.seed": "0",
    "pool.n": REQUIRED,
    "pool.dims": "32,32,32",
    "pool.spacing": "1.0,1.0,1.0",
    "pool.seed": "0",
    "pool.task_seed": "0",
    "pool.modes": "1",
    "pool.noise": "0.05",
    "pool.shared_noise": "0.0",
    "pool.jitter": "0.15",
    "pool.tumor_prob": "0.0",
    "pool.organ_range": "0.55,0.9",
    "pool.background_range": "0.05,0.3",
    "pool.radius_range": "0.15,0.28",
    "val.n": REQUIRED,
    "surrogate.sigma": "0.1",
    "surrogate.runs": "20",
    "surrogate.seed": "0",
    "features.grid": "4",
    "features.standardize": "true",
    "birch.threshold": "0.5",
    "birch.branching": "50",
    "kmeans.n_init": "10",
    "roi.margin": "5",
}
# val.* keys default to their pool.* counterpart, except the sample seed
VAL_KEYS = [k[len("pool."):] for k in DEFAULTS if k.startswith("pool.") and k != "pool.n"]
VAL_SEED_OFFSET = 1000


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"config line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _ints(value: str, key: str) -> list[int]:
    try:
        if ".." in value:
            lo, hi = value.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"config key {key!r}: expected integers, got {value!r}") from None


def _floats(value: str, key: str, count: int | None = None) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in value.split(","))
    except ValueError:
        raise ConfigError(f"config key {key!r}: expected numbers, got {value!r}") from None
    if count is not None and len(vals) != count:
        raise ConfigError(f"config key {key!r}: expected {count} values, got {value!r}")
    return vals


def _int(value: str, key: str) -> int:
    vals = _ints(value, key)
    if len(vals) != 1:
        raise ConfigError(f"config key {key!r}: expected one integer, got {value!r}")
    return vals[0]


def _bool(value: str, key: str) -> bool:
    low = value.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"config key {key!r}: expected a boolean, got {value!r}")


def _names(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


@dataclass
class BenchConfig:
    strategies: list[str]
    budgets: list[int]
    roi_modes: list[str]
    random_seeds: list[int]
    selector_seed: int
    pool: SyntheticSpec
    val: SyntheticSpec
    options: SelectorOptions
    raw: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, given: dict[str, str]) -> "BenchConfig":
        known = set(DEFAULTS) | {"val.n"} | {f"val.{k}" for k in VAL_KEYS}
        unknown = sorted(set(given) - known)
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        raw = {}
        for key, default in DEFAULTS.items():
            if key in given:
                raw[key] = given[key]
            elif default is REQUIRED:
                raise ConfigError(f"missing required config key {key!r}")
            else:
                raw[key] = default
        for k in VAL_KEYS:
            if f"val.{k}" in given:
                raw[f"val.{k}"] = given[f"val.{k}"]
            elif k == "seed":
                raw["val.seed"] = str(_int(raw["pool.seed"], "pool.seed") + VAL_SEED_OFFSET)
            else:
                raw[f"val.{k}"] = raw[f"pool.{k}"]

        strategies = _names(raw["strategies"])
        for s in strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"config key 'strategies': unknown strategy {s!r}")
        if not strategies or len(set(strategies)) != len(strategies):
            raise ConfigError("config key 'strategies': need a non-empty list without repeats")
        roi_modes = _names(raw["roi_modes"])
        for r in roi_modes:
            if r not in ROI_MODES:
                raise ConfigError(f"config key 'roi_modes': unknown roi mode {r!r}")
        budgets = _ints(raw["budgets"], "budgets")
        seeds = _ints(raw["random_seeds"], "random_seeds")
        if not budgets or not roi_modes or not seeds:
            raise ConfigError("budgets, roi_modes and random_seeds must be non-empty")

        options = SelectorOptions(
            grid_g=_int(raw["features.grid"], "features.grid"),
            standardize=_bool(raw["features.standardize"], "features.standardize"),
            n_init=_int(raw["kmeans.n_init"], "kmeans.n_init"),
            birch_threshold=_floats(raw["birch.threshold"], "birch.threshold", 1)[0],
            birch_branching=_int(raw["birch.branching"], "birch.branching"),
            surrogate_runs=_int(raw["surrogate.runs"], "surrogate.runs"),
            surrogate_sigma=_floats(raw["surrogate.sigma"], "surrogate.sigma", 1)[0],
            mc_seed=_int(raw["surrogate.seed"], "surrogate.seed"),
            roi_margin=_int(raw["roi.margin"], "roi.margin"),
        )
        return cls(
            strategies, budgets, roi_modes, seeds, _int(raw["selector.seed"], "selector.seed"),
            _spec(raw, "pool", "p"), _spec(raw, "val", "v"), options, raw,
        )

    @classmethod
    def from_text(cls, text: str) -> "BenchConfig":
        return cls.from_mapping(parse_config_text(text))

    @classmethod
    def from_file(cls, path) -> "BenchConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def resolved_text(self) -> str:
        return "".join(f"{k} = {self.raw[k]}\n" for k in sorted(self.raw))

    @property
    def cells(self) -> list[tuple[int, str]]:
        return [(b, r) for b in self.budgets for r in self.roi_modes]


def _spec(raw: dict, prefix: str, id_prefix: str) -> SyntheticSpec:
    g = lambda k: raw[f"{prefix}.{k}"]  # noqa: E731
    dims = tuple(_ints(g("dims"), f"{prefix}.dims"))
    if len(dims) != 3:
        raise ConfigError(f"config key '{prefix}.dims': expected 3 integers")
    return SyntheticSpec(
        n=_int(g("n"), f"{prefix}.n"),
        dims=dims,
        spacing=_floats(g("spacing"), f"{prefix}.spacing", 3),
        seed=_int(g("seed"), f"{prefix}.seed"),
        task_seed=_int(g("task_seed"), f"{prefix}.task_seed"),
        organ_range=_floats(g("organ_range"), f"{prefix}.organ_range", 2),
        background_range=_floats(g("background_range"), f"{prefix}.background_range", 2),
        noise_std=_floats(g("noise"), f"{prefix}.noise", 1)[0],
        shared_noise=_floats(g("shared_noise"), f"{prefix}.shared_noise", 1)[0],
        tumor_prob=_floats(g("tumor_prob"), f"{prefix}.tumor_prob", 1)[0],
        modes=_int(g("modes"), f"{prefix}.modes"),
        jitter=_floats(g("jitter"), f"{prefix}.jitter", 1)[0],
        radius_range=_floats(g("radius_range"), f"{prefix}.radius_range", 2),
        id_prefix=id_prefix,
    )


# --------------------------------------------------------------------------
# results
# --------------------------------------------------------------------------

@dataclass
class CellResult:
    strategy: str
    budget: int
    roi_mode: str
    selections: list[SelectionResult] = field(default_factory=list)
    scores: list[list[tuple[str, SegScore]]] = field(default_factory=list)
    mean_dice: float | None = None
    mean_hd95: float | None = None
    run_dice: list[float] = field(default_factory=list)
    run_hd95: list[float | None] = field(default_factory=list)
    delta: float | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def name(self) -> str:
        return cell_name(self.strategy, self.budget, self.roi_mode)


def cell_name(strategy: str, budget: int, roi_mode: str) -> str:
    return f"{strategy}_m{budget}_{roi_mode}"


@dataclass
class RandomBaseline:
    budget: int
    roi_mode: str
    seeds: list[int]
    dice: list[float]
    hd95: list[float | None]

    @property
    def mean(self) -> float:
        return float(np.mean(self.dice))

    @property
    def min(self) -> float:
        return float(np.min(self.dice))

    @property
    def max(self) -> float:
        return float(np.max(self.dice))


@dataclass
class ExperimentReport:
    config: BenchConfig
    results: dict[tuple[str, int, str], CellResult]
    baselines: dict[tuple[int, str], RandomBaseline]
    log_lines: list[str]

    @property
    def strategies(self) -> list[str]:
        return self.config.strategies

    @property
    def cells(self) -> list[tuple[int, str]]:
        return self.config.cells

    @property
    def failed(self) -> list[CellResult]:
        return [r for r in self.results.values() if not r.ok]

    def delta_matrix(self) -> list[list[float | None]]:
        return [[self.results[(s, b, r)].delta for b, r in self.cells] for s in self.strategies]

    def trend_check(self, strategy: str = "typiclust", slack: float = 0.02) -> list[dict]:
        """Per cell: does ``strategy`` reach (random mean - slack) and the worst random run?"""
        rows = []
        for b, r in self.cells:
            cell = self.results.get((strategy, b, r))
            base = self.baselines.get((b, r))
            if cell is None or not cell.ok or base is None or not base.dice:
                continue
            rows.append({
                "budget": b, "roi_mode": r, "dice": cell.mean_dice,
                "random_mean": base.mean, "random_min": base.min,
                "passed": cell.mean_dice >= base.mean - slack and cell.mean_dice >= base.min,
            })
        return rows


# --------------------------------------------------------------------------
# running
# --------------------------------------------------------------------------

def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


class _Evaluator:
    """Train on a selection, score on the validation pool; memoized per id set."""

    def __init__(self, pool, val):
        self.index = {s.id: i for i, s in enumerate(pool)}
        self.pool = pool
        self.val = val
        self.val_desc = [voxel_descriptors(v.image) for v in val]
        self._memo = {}

    def __call__(self, selected) -> list[tuple[str, SegScore]]:
        # train in pool order so equal sets give bit-identical models
        order = tuple(sorted(self.index[i] for i in selected))
        if order not in self._memo:
            train = [self.pool[i] for i in order]
            model = surrogate_train([s.image for s in train], [s.gt_mask for s in train])
            self._memo[order] = [
                (v.id, score(surrogate_predict(model, v.image, d), v.gt_mask, v.gt_mask.spacing))
                for v, d in zip(self.val, self.val_desc)
            ]
        return self._memo[order]


def run_benchmark(config: BenchConfig, out_dir=None, threads: int = 1) -> ExperimentReport:
    """Run every (strategy, budget, roi mode) cell and build the report.

    Cells run on up to ``threads`` workers; results are assembled in
    config order so the worker count never changes the output.
    """
    lines = [f"coldstart {__version__}", "resolved configuration:"]
    lines += ["  " + ln for ln in config.resolved_text().splitlines()]
    pool = generate_pool(config.pool)
    val = generate_pool(config.val)
    pool_ids = {s.id for s in pool}
    val_ids = {s.id for s in val}
    if pool_ids & val_ids:
        raise ConfigError("selection pool and validation pool share sample ids")
    lines.append(f"selection pool ids ({len(pool)}): {' '.join(s.id for s in pool)}")
    lines.append(f"validation ids ({len(val)}): {' '.join(s.id for s in val)}")

    options = config.options
    cache: dict = {}
    prep_errors: dict = {}
    if any(s in ("alps", "calr", "typiclust") for s in config.strategies):
        for roi in config.roi_modes:
            try:
                cache[("features", roi)] = pool_features(pool, roi, options)
            except ColdStartError as exc:
                prep_errors[("features", roi)] = exc
    if any(s in PROXY_MEASURE for s in config.strategies):
        try:
            cache["stacks"] = pool_stacks(pool, options)
        except ColdStartError as exc:
            prep_errors["stacks"] = exc
    lines.append("feature standardization: " + ("on" if options.standardize else "off"))
    lines.append("audit: selection, standardization and training use only selection-pool ids")

    evaluate = _Evaluator(pool, val)
    rows = list(config.strategies)
    if "random" not in rows:
        rows.append("random")
    tasks = [(s, b, r) for s in rows for b, r in config.cells]

    def run_cell(task) -> CellResult:
        strategy, budget, roi = task
        cell = CellResult(strategy, budget, roi)
        try:
            if strategy in PROXY_MEASURE and "stacks" in prep_errors:
                raise prep_errors["stacks"]
            if strategy in ("alps", "calr", "typiclust") and ("features", roi) in prep_errors:
                raise prep_errors[("features", roi)]
            seeds = config.random_seeds if strategy == "random" else [config.selector_seed]
            for seed in seeds:
                sel = run_selector(strategy, pool, budget, roi, seed, options=options, cache=cache)
                if set(sel.selected) - pool_ids:
                    raise ConfigError("selection left the selection pool")
                scores = evaluate(sel.selected)
                cell.selections.append(sel)
                cell.scores.append(scores)
                cell.run_dice.append(float(np.mean([s.dice for _, s in scores])))
                cell.run_hd95.append(_mean_or_none(s.hd95 for _, s in scores))
            cell.mean_dice = float(np.mean(cell.run_dice))
            cell.mean_hd95 = _mean_or_none(cell.run_hd95)
        except Exception as exc:  # a failed cell must not stop the matrix
            cell.error = f"{type(exc).__name__}: {exc}"
            cell.selections, cell.scores = [], []
        return cell

    workers = max(1, int(threads))
    if workers == 1:
        done = [run_cell(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            done = list(ex.map(run_cell, tasks))
    results = {(c.strategy, c.budget, c.roi_mode): c for c in done}

    baselines = {}
    for b, r in config.cells:
        rc = results[("random", b, r)]
        baselines[(b, r)] = RandomBaseline(
            b, r, list(config.random_seeds) if rc.ok else [], rc.run_dice, rc.run_hd95
        )
    for (s, b, r), cell in results.items():
        base = results[("random", b, r)]
        if cell.ok and base.ok:
            cell.delta = cell.mean_dice - base.mean_dice

    for s, b, r in tasks:
        cell = results[(s, b, r)]
        status = "ok" if cell.ok else f"FAILED ({cell.error})"
        lines.append(f"cell {cell.name}: {status}")
    report = ExperimentReport(config, {k: results[k] for k in tasks}, baselines, lines)
    if out_dir is not None:
        emit_report(report, out_dir)
    return report


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

def _csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def emit_report(report: ExperimentReport, out_dir) -> None:
    """Write the report tree. All numbers carry 6 decimals; row/column order follows the config.

    Layout::

        report.csv            strategy x (budget, roi) Dice delta vs random mean
        summary.csv           per cell mean Dice, mean HD95, delta, status
        random_runs.csv       per random seed mean Dice / HD95
        random_baseline.csv   per cell random mean / min / max Dice
        cells/<cell>/         selection.json (random: selection_seedNN.json), metrics.csv
        config.resolved.cfg   every config key after defaults
        run.log               version, config echo, id audit, cell status
    """
    out = Path(out_dir)
    cells = report.cells
    header = ["strategy"] + [f"m{b}_{r}" for b, r in cells]
    rows = [header]
    for s, deltas in zip(report.strategies, report.delta_matrix()):
        rows.append([s] + ["FAILED" if d is None else fmt(d) for d in deltas])
    _write(out / "report.csv", _csv_text(rows))

    rows = [["strategy", "budget", "roi_mode", "status", "mean_dice", "mean_hd95", "delta_dice"]]
    for cell in report.results.values():
        rows.append([
            cell.strategy, cell.budget, cell.roi_mode, "ok" if cell.ok else "failed",
            fmt(cell.mean_dice), fmt(cell.mean_hd95), fmt(cell.delta),
        ])
    _write(out / "summary.csv", _csv_text(rows))

    rows = [["budget", "roi_mode", "seed", "mean_dice", "mean_hd95"]]
    base_rows = [["budget", "roi_mode", "runs", "mean_dice", "min_dice", "max_dice"]]
    for (b, r), base in report.baselines.items():
        for seed, d, h in zip(base.seeds, base.dice, base.hd95):
            rows.append([b, r, seed, fmt(d), fmt(h)])
        if base.dice:
            base_rows.append([b, r, len(base.dice), fmt(base.mean), fmt(base.min), fmt(base.max)])
        else:
            base_rows.append([b, r, 0, "", "", ""])
    _write(out / "random_runs.csv", _csv_text(rows))
    _write(out / "random_baseline.csv", _csv_text(base_rows))

    for cell in report.results.values():
        cdir = out / "cells" / cell.name
        if not cell.ok:
            _write(cdir / "error.txt", cell.error + "\n")
            continue
        if cell.strategy == "random":
            rows = [["seed", "id", "dice", "hd95"]]
            for sel, scores in zip(cell.selections, cell.scores):
                sel.write(cdir / f"selection_seed{sel.seed:02d}.json")
                rows += [[sel.seed, i, fmt(s.dice), fmt(s.hd95)] for i, s in scores]
        else:
            cell.selections[0].write(cdir / "selection.json")
            rows = [["id", "dice", "hd95"]] + [[i, fmt(s.dice), fmt(s.hd95)] for i, s in cell.scores[0]]
        _write(cdir / "metrics.csv", _csv_text(rows))

    _write(out / "config.resolved.cfg", report.config.resolved_text())
    trend = report.trend_check()
    lines = list(report.log_lines)
    for t in trend:
        lines.append(
            f"trend typiclust m{t['budget']}_{t['roi_mode']}: dice {t['dice']:.6f} "
            f"random mean {t['random_mean']:.6f} min {t['random_min']:.6f} "
            f"{'PASS' if t['passed'] else 'FAIL'} (diagnostic)"
        )
    _write(out / "run.log", "\n".join(lines) + "\n")
