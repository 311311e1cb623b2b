"""The six cold-start selection strategies behind one dispatch function.

Strategies:

* ``random``     - seeded Fisher-Yates shuffle, first ``m`` ids.
* ``proxy-ent``  - top-``m`` mean predictive entropy on a proxy task.
* ``proxy-var``  - top-``m`` mean prediction variance on a proxy task.
* ``alps``       - k-means with ``k = m``; member nearest each center.
* ``calr``       - BIRCH with ``k = m``; member of highest mean cosine
  similarity to its cluster (self-similarity included).
* ``typiclust``  - k-means with ``k = m``; member with the smallest mean
  Euclidean distance to the rest of its cluster.

Ties always go to the lexicographically smallest id.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from coldstart.clustering import birch_cluster, cosine_matrix, kmeans, pairwise_euclidean
from coldstart.errors import BudgetError, ConfigError, InputError
from coldstart.features import FeatureTable, extract_table
from coldstart.rng import philox
from coldstart.surrogate import DEFAULT_SIGMA, surrogate_predict_stack, surrogate_train
from coldstart.uncertainty import DEFAULT_RUNS, UncertaintyScore, score_stack
from coldstart.volumes import check_unique_ids, proxy_label_ct, proxy_label_mr, roi_from_mask

STRATEGIES = ("random", "proxy-ent", "proxy-var", "alps", "calr", "typiclust")
ROI_MODES = ("global", "local")
PROXY_MEASURE = {"proxy-ent": "entropy", "proxy-var": "variance"}

LOW_BUDGET = 5
HIGH_BUDGET = 10
HEART_BUDGETS = (3, 5)
RANDOM_RUNS = 15


@dataclass(frozen=True)
class Budget:
    m: int

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise BudgetError(f"budget must be a positive integer, got {self.m}")

    def check(self, n: int) -> None:
        if self.m > n:
            raise BudgetError(f"budget exceeds pool size ({self.m} > {n})")


def _budget(budget, n: int) -> int:
    b = budget if isinstance(budget, Budget) else Budget(int(budget))
    b.check(n)
    return b.m


@dataclass
class SelectionResult:
    strategy: str
    budget: int
    selected: list[str]
    seed: int | None = None
    scores: dict[str, dict] = field(default_factory=dict)
    roi_mode: str = "global"

    def __post_init__(self):
        if len(self.selected) != self.budget:
            raise InputError(f"{self.strategy}: selected {len(self.selected)} ids for budget {self.budget}")
        if len(set(self.selected)) != len(self.selected):
            raise InputError(f"{self.strategy}: selected ids are not distinct")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "budget": self.budget,
            "seed": self.seed,
            "roi_mode": self.roi_mode,
            "selected": list(self.selected),
            "scores": {k: _json_safe(v) for k, v in self.scores.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "SelectionResult":
        d = json.loads(text)
        return cls(d["strategy"], d["budget"], d["selected"], d["seed"], d["scores"], d["roi_mode"])


def _json_safe(diag: dict) -> dict:
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in diag.items()}


# --------------------------------------------------------------------------
# random / uncertainty
# --------------------------------------------------------------------------

def select_random(pool_ids, budget, seed: int) -> SelectionResult:
    ids = list(pool_ids)
    m = _budget(budget, len(ids))
    rng = philox(seed)
    for i in range(len(ids) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        ids[i], ids[j] = ids[j], ids[i]
    return SelectionResult("random", m, ids[:m], seed=int(seed))


def select_proxy_rank(scores, budget) -> SelectionResult:
    """Most uncertain ``m`` ids: descending score, ties by ascending id."""
    scores = list(scores)
    if not scores:
        raise InputError("no uncertainty scores given")
    measures = {s.measure for s in scores}
    if len(measures) != 1:
        raise InputError(f"mixed uncertainty measures {sorted(measures)}")
    ids = [s.id for s in scores]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate ids among uncertainty scores")
    m = _budget(budget, len(scores))
    ranked = sorted(scores, key=lambda s: (-s.score, s.id))
    measure = measures.pop()
    strategy = "proxy-ent" if measure == "entropy" else "proxy-var"
    diag = {s.id: {"uncertainty": s.score, "rank": r} for r, s in enumerate(ranked)}
    return SelectionResult(
        strategy, m, [s.id for s in ranked[:m]], scores=diag, roi_mode=scores[0].roi_mode
    )


# --------------------------------------------------------------------------
# diversity
# --------------------------------------------------------------------------

def typicality(x, labels) -> np.ndarray:
    """Inverse mean Euclidean distance to the other members of the same cluster.

    Singleton clusters get NaN (their member is picked by rule, not score).
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    out = np.full(len(x), np.nan)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            continue
        mean_d = pairwise_euclidean(x[idx]).sum(axis=1) / (len(idx) - 1)
        with np.errstate(divide="ignore"):
            out[idx] = 1.0 / mean_d
    return out


def information_density(x, labels) -> np.ndarray:
    """Mean cosine similarity to every member of the same cluster, itself included."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    out = np.empty(len(x))
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        out[idx] = cosine_matrix(x[idx]).sum(axis=1) / len(idx)
    return out


TIE_RTOL = 1e-12


def _pick_per_cluster(ids, labels, k, key):
    """For each cluster in index order, the member minimizing ``key``.

    Keys within ``TIE_RTOL`` (relative) of the minimum count as tied, so
    values that are equal in exact arithmetic but differ by rounding
    still fall back to the smallest id.
    """
    picks = []
    for c in range(k):
        members = np.flatnonzero(labels == c)
        keys = {int(i): key(i) for i in members}
        lo = min(keys.values())
        tied = [i for i, v in keys.items() if v - lo <= TIE_RTOL * max(1.0, abs(lo))]
        picks.append(min(ids[i] for i in tied))
    return picks


def _table(table) -> FeatureTable:
    if not isinstance(table, FeatureTable):
        raise InputError("diversity selectors need a FeatureTable")
    return table


def alps_pick(table: FeatureTable, clustering) -> tuple[list[str], dict]:
    x, ids, labels = table.values, table.ids, clustering.assignment
    dist = np.sqrt(((x - clustering.centers[labels]) ** 2).sum(axis=1))
    picks = _pick_per_cluster(ids, labels, clustering.k, lambda i: dist[i])
    diag = {ids[i]: {"cluster": int(labels[i]), "distance": float(dist[i])} for i in range(len(ids))}
    return picks, diag


def typiclust_pick(table: FeatureTable, clustering) -> tuple[list[str], dict]:
    x, ids, labels = table.values, table.ids, clustering.assignment
    typ = typicality(x, labels)
    # NaN marks a singleton, whose only member wins regardless
    picks = _pick_per_cluster(ids, labels, clustering.k, lambda i: -typ[i] if not np.isnan(typ[i]) else 0.0)
    diag = {ids[i]: {"cluster": int(labels[i]), "typicality": float(typ[i])} for i in range(len(ids))}
    return picks, diag


def calr_pick(table: FeatureTable, clustering) -> tuple[list[str], dict]:
    x, ids, labels = table.values, table.ids, clustering.assignment
    dens = information_density(x, labels)
    picks = _pick_per_cluster(ids, labels, clustering.k, lambda i: -dens[i])
    diag = {ids[i]: {"cluster": int(labels[i]), "density": float(dens[i])} for i in range(len(ids))}
    return picks, diag


def select_alps(table: FeatureTable, budget, seed: int = 0, n_init: int = 10) -> SelectionResult:
    table = _table(table)
    m = _budget(budget, len(table))
    picks, diag = alps_pick(table, kmeans(table, m, seed, n_init))
    return SelectionResult("alps", m, picks, seed=int(seed), scores=diag)


def select_calr(table: FeatureTable, budget, threshold: float = 0.5, branching: int = 50) -> SelectionResult:
    table = _table(table)
    m = _budget(budget, len(table))
    picks, diag = calr_pick(table, birch_cluster(table, m, threshold, branching))
    return SelectionResult("calr", m, picks, scores=diag)


def select_typiclust(table: FeatureTable, budget, seed: int = 0, n_init: int = 10) -> SelectionResult:
    table = _table(table)
    m = _budget(budget, len(table))
    picks, diag = typiclust_pick(table, kmeans(table, m, seed, n_init))
    return SelectionResult("typiclust", m, picks, seed=int(seed), scores=diag)


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SelectorOptions:
    grid_g: int = 4
    standardize: bool = True
    n_init: int = 10
    birch_threshold: float = 0.5
    birch_branching: int = 50
    surrogate_runs: int = DEFAULT_RUNS
    surrogate_sigma: float = DEFAULT_SIGMA
    mc_seed: int = 0
    ct_window: tuple[float, float] | None = None
    roi_margin: int = 5


def select(strategy, budget, *, ids=None, table=None, scores=None, seed=0, roi_mode="global",
           options: SelectorOptions = SelectorOptions()) -> SelectionResult:
    """Run a strategy on precomputed inputs.

    ``random`` needs ``ids`` (or a table), proxy strategies need
    ``scores`` and the diversity strategies need ``table``.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    if roi_mode not in ROI_MODES:
        raise ConfigError(f"unknown roi mode {roi_mode!r}")
    if strategy == "random":
        if ids is None:
            if table is None:
                raise ConfigError("random selection needs pool ids")
            ids = table.ids
        result = select_random(ids, budget, seed)
    elif strategy in PROXY_MEASURE:
        if scores is None:
            raise ConfigError(f"{strategy} needs uncertainty scores")
        wanted = PROXY_MEASURE[strategy]
        if any(s.measure != wanted for s in scores):
            raise ConfigError(f"{strategy} needs {wanted} scores")
        result = select_proxy_rank(scores, budget)
    else:
        if table is None:
            raise ConfigError(f"{strategy} needs a feature table")
        if strategy == "alps":
            result = select_alps(table, budget, seed, options.n_init)
        elif strategy == "typiclust":
            result = select_typiclust(table, budget, seed, options.n_init)
        else:
            result = select_calr(table, budget, options.birch_threshold, options.birch_branching)
    result.roi_mode = roi_mode
    return result


def pool_rois(pool, margin: int = 5) -> dict:
    missing = [s.id for s in pool if s.gt_mask is None]
    if missing:
        raise ConfigError(f"local roi mode needs ground-truth masks; missing for {missing[0]!r}")
    return {s.id: roi_from_mask(s.gt_mask, margin) for s in pool}


def pool_features(pool, roi_mode="global", options: SelectorOptions = SelectorOptions()) -> FeatureTable:
    rois = pool_rois(pool, options.roi_margin) if roi_mode == "local" else None
    return extract_table(pool, options.grid_g, rois, options.standardize)


def proxy_label(sample, ct_window=None):
    if sample.modality == "CT":
        if ct_window is None:
            raise ConfigError("CT proxy labels need an HU window (organ-dependent, no default)")
        return proxy_label_ct(sample.image, ct_window)
    return proxy_label_mr(sample.image)


def pool_stacks(pool, options: SelectorOptions = SelectorOptions()) -> list:
    """MC-style prediction stacks from a surrogate fitted to proxy labels of the whole pool.

    Stack ``i`` draws from ``philox((mc_seed, i))``. ROIs are attached when
    every sample carries a ground-truth mask.
    """
    labels = [proxy_label(s, options.ct_window) for s in pool]
    model = surrogate_train([s.image for s in pool], labels)
    rois = {}
    if all(s.gt_mask is not None for s in pool):
        rois = pool_rois(pool, options.roi_margin)
    return [
        surrogate_predict_stack(
            model, s.image, s.id, options.surrogate_runs, options.surrogate_sigma,
            (options.mc_seed, i), rois.get(s.id),
        )
        for i, s in enumerate(pool)
    ]


def pool_scores(stacks, measure: str, roi_mode: str = "global") -> list[UncertaintyScore]:
    return [score_stack(st, measure, roi_mode) for st in stacks]


def run_selector(strategy, pool, budget, roi_mode="global", seed=0, *,
                 options: SelectorOptions = SelectorOptions(), cache: dict | None = None) -> SelectionResult:
    """Compute a strategy's inputs from a pool of samples and select.

    ``roi_mode="local"`` restricts descriptors and uncertainty averaging to
    each sample's ground-truth box grown by ``options.roi_margin``. Pass a
    shared ``cache`` dict to reuse features and stacks across calls.
    """
    pool = list(pool)
    check_unique_ids(pool)
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    if roi_mode not in ROI_MODES:
        raise ConfigError(f"unknown roi mode {roi_mode!r}")
    if roi_mode == "local":
        pool_rois(pool, options.roi_margin)
    cache = {} if cache is None else cache
    ids = [s.id for s in pool]
    if strategy == "random":
        return select("random", budget, ids=ids, seed=seed, roi_mode=roi_mode, options=options)
    if strategy in PROXY_MEASURE:
        if "stacks" not in cache:
            cache["stacks"] = pool_stacks(pool, options)
        scores = pool_scores(cache["stacks"], PROXY_MEASURE[strategy], roi_mode)
        return select(strategy, budget, scores=scores, roi_mode=roi_mode, options=options)
    key = ("features", roi_mode)
    if key not in cache:
        cache[key] = pool_features(pool, roi_mode, options)
    return select(strategy, budget, table=cache[key], seed=seed, roi_mode=roi_mode, options=options)
