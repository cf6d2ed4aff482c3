"""Penalized choice of a (variable subset, pruned subtree) pair.

For every candidate subset a maximal tree is grown and pruned into its nested
chain. For a penalty ``pen(M, T) = a(|M|) |T| / n + b |M| (1 + log(p/|M|)) / n``
the best subtree of each subset is the chain member selected at the per-leaf
level ``a(|M|) / n``, and the subset is then chosen by the full criterion.
Sweeping the two constants over a grid gives a family of estimators, and the
final one is chosen by its error on the hold-out part.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .cart import (
    PrunedSequence,
    Tree,
    empirical_contrast,
    grow_maximal,
    prune_sequence,
    refit_leaves,
    subtree_index,
    tree_to_dict,
)
from .data import Dataset, Framework, Method, SampleSplit, split_three
from .importance import (
    TEST_ONE_SE,
    VI_PRIMARY,
    VI_SURROGATE,
    ImportanceReport,
    PstarConfig,
    SubsetFamily,
    build_pstar,
    importance_tree,
    variable_importance,
)

log = logging.getLogger(__name__)

DEFAULT_ALPHA_GRID = (0.0, 0.01, 0.05, 0.1, 0.3, 0.5, 1.0, 2.0, 5.0, 12.0, 30.0, 60.0, 120.0)
DEFAULT_BETA_GRID = (0.0, 10.0, 50.0, 100.0, 300.0, 700.0, 1300.0, 1700.0, 1900.0, 2500.0)
EXHAUSTIVE_CAP = 20

Subset = tuple[int, ...]


class ExhaustiveCapError(ValueError):
    """Exhaustive search requested for too many variables."""


@dataclass(frozen=True)
class Theoretical:
    """Constants of the theoretical penalties.

    ``sigma2`` and ``rho`` describe the noise moments, ``R`` bounds the
    regression function, and ``h`` is the classification margin.
    """

    sigma2: float = 1.0
    rho: float = 0.0
    R: float = 0.0
    h: float = 1.0


@dataclass(frozen=True)
class PenaltySpec:
    framework: Framework
    method: Method
    alpha: float
    beta: float
    n_eff: int
    p: int
    theoretical: Theoretical | None = None

    def __post_init__(self):
        object.__setattr__(self, "framework", Framework(self.framework))
        object.__setattr__(self, "method", Method(self.method))
        if self.n_eff < 1:
            raise ValueError("n_eff must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        th = self.theoretical
        if th is not None and self.framework is Framework.CLASSIFICATION and not th.h > 0:
            raise ValueError("margin h must be positive")

    def multiplier(self) -> float:
        th = self.theoretical
        if th is None:
            return 1.0
        if self.framework is Framework.CLASSIFICATION:
            return 1.0 / th.h
        if self.method is Method.M1:
            return th.sigma2 + th.rho * th.R
        log_term = math.log(self.n_eff / self.p) ** 2
        return th.sigma2 * (1.0 + th.rho ** 4 / th.sigma2 ** 2 * log_term) + th.rho * th.R


def _check_sizes(spec: PenaltySpec, m_size: int, t_size: int) -> None:
    if not 1 <= m_size <= spec.p:
        raise ValueError(f"|M|={m_size} outside [1, {spec.p}]")
    if t_size < 1:
        raise ValueError(f"|T|={t_size} must be >= 1")


def leaf_coefficient(spec: PenaltySpec, m_size: int) -> float:
    """Per-leaf penalty ``lambda`` such that the tree term is ``lambda * |T|``."""
    a = spec.alpha
    if spec.method is Method.M2:
        m1 = m_size + 1
        a *= 1.0 + m1 * (1.0 + math.log(spec.n_eff / m1))
    return spec.multiplier() * a / spec.n_eff


def subset_term(spec: PenaltySpec, m_size: int) -> float:
    return spec.multiplier() * spec.beta * m_size / spec.n_eff * (1.0 + math.log(spec.p / m_size))


def penalty_value(spec: PenaltySpec, m_size: int, t_size: int) -> float:
    _check_sizes(spec, m_size, t_size)
    return leaf_coefficient(spec, m_size) * t_size + subset_term(spec, m_size)


def select_tree_index(seq: PrunedSequence, spec: PenaltySpec, m_size: int) -> int:
    return subtree_index(seq, leaf_coefficient(spec, m_size))


def select_tree(seq: PrunedSequence, spec: PenaltySpec, m_size: int) -> Tree:
    """Pruned subtree minimizing contrast plus the tree-size penalty."""
    return seq.subtrees[select_tree_index(seq, spec, m_size)]


def all_subsets(p: int, cap: int = EXHAUSTIVE_CAP, force: bool = False) -> list[Subset]:
    """Every nonempty subset of ``range(p)``, by size then lexicographically."""
    if p > cap and not force:
        raise ExhaustiveCapError(
            f"exhaustive mode over p={p} variables exceeds the cap of {cap}; "
            "use --force-exhaustive to override"
        )
    return [c for r in range(1, p + 1) for c in itertools.combinations(range(p), r)]


# Worker state for process pools; set once per worker by the initializer.
_WORKER: dict = {}


def _init_worker(ds, split, n_min):
    _WORKER.update(ds=ds, split=split, n_min=n_min)


def _grow_and_prune(subset: Subset) -> PrunedSequence:
    ds, split, n_min = _WORKER["ds"], _WORKER["split"], _WORKER["n_min"]
    return grow_and_prune(ds, split, subset, n_min)


def grow_and_prune(ds: Dataset, split: SampleSplit, subset: Subset, n_min: int) -> PrunedSequence:
    tree = grow_maximal(ds, split.i1, subset, n_min)
    if split.method is Method.M1:
        tree = refit_leaves(tree, ds, split.i2)
        return prune_sequence(tree, ds, split.i2)
    return prune_sequence(tree, ds, split.i1)


def build_collection(
    ds: Dataset,
    split: SampleSplit,
    subsets: Iterable[Iterable[int]],
    n_min: int,
    jobs: int = 1,
) -> dict[Subset, PrunedSequence]:
    """Pruned chain of the maximal tree of every subset.

    M1 grows on i1, refits the node constants on i2 and prunes against i2.
    M2 grows and prunes on i1.
    """
    keys = list(dict.fromkeys(tuple(sorted(set(s))) for s in subsets))
    if not keys:
        raise ValueError("no subsets given")
    if jobs > 1 and len(keys) > 1:
        chunk = max(1, len(keys) // (4 * jobs))
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(ds, split, n_min)) as pool:
            seqs = list(pool.map(_grow_and_prune, keys, chunksize=chunk))
    else:
        seqs = [grow_and_prune(ds, split, k, n_min) for k in keys]
    return dict(zip(keys, seqs))


@dataclass(frozen=True)
class ModelChoice:
    subset: Subset
    index: int
    tree: Tree
    criterion: float

    @property
    def key(self) -> tuple[Subset, int]:
        return (self.subset, self.index)


def _choice_order(subset: Subset, crit: float, t_size: int):
    return (crit, len(subset), t_size, subset)


def select_model(
    collection: dict[Subset, PrunedSequence],
    spec: PenaltySpec,
    ds: Dataset | None = None,
    split: SampleSplit | None = None,
) -> ModelChoice:
    """Two-step minimization of contrast plus penalty over the collection.

    The contrast of a chain member is its risk on the pruning sample, which
    the chain already stores. Ties go to the smaller subset, then the smaller
    tree, then the lexicographically first subset.
    """
    if not collection:
        raise ValueError("empty collection")
    best = None
    for subset, seq in collection.items():
        m = len(subset)
        k = select_tree_index(seq, spec, m)
        t_size = seq.subtrees[k].n_leaves
        crit = seq.risks[k] + penalty_value(spec, m, t_size)
        order = _choice_order(subset, crit, t_size)
        if best is None or order < best[0]:
            best = (order, subset, k, crit)
    _, subset, k, crit = best
    return ModelChoice(subset, k, collection[subset].subtrees[k], crit)


@dataclass
class EstimatorFamily:
    """Models selected over the (alpha, beta) grid.

    ``entries`` maps each grid pair to a model key ``(subset, chain index)``;
    ``models`` holds the distinct models in order of first appearance.
    """

    entries: dict[tuple[float, float], tuple[Subset, int]]
    models: dict[tuple[Subset, int], ModelChoice]

    @property
    def K(self) -> int:
        return len(self.models)

    @property
    def distinct_models(self) -> list[ModelChoice]:
        return list(self.models.values())


def grid_select(
    collection: dict[Subset, PrunedSequence],
    alpha_grid: Sequence[float],
    beta_grid: Sequence[float],
    spec_base: PenaltySpec,
    ds: Dataset | None = None,
    split: SampleSplit | None = None,
) -> EstimatorFamily:
    if not alpha_grid or not beta_grid:
        raise ValueError("grids must be nonempty")
    entries, models = {}, {}
    for a in alpha_grid:
        for b in beta_grid:
            choice = select_model(collection, replace(spec_base, alpha=float(a), beta=float(b)))
            entries[(float(a), float(b))] = choice.key
            models.setdefault(choice.key, choice)
    return EstimatorFamily(entries, models)


@dataclass
class SelectionResult:
    alpha: float
    beta: float
    subset: Subset
    tree: Tree
    holdout_risk: float
    family: EstimatorFamily
    holdout_risks: dict[tuple[Subset, int], float]
    names: tuple[str, ...] = ()
    importance: ImportanceReport | None = None
    pstar: SubsetFamily | None = None
    subsets_processed: int = 0
    chain_lengths: int = 0
    config: dict = field(default_factory=dict)

    @property
    def grid_map(self) -> list[tuple[float, float, Subset]]:
        return [(a, b, key[0]) for (a, b), key in self.family.entries.items()]

    @property
    def K(self) -> int:
        return self.family.K

    def to_dict(self) -> dict:
        out = {
            "chosen": {
                "alpha": self.alpha,
                "beta": self.beta,
                "subset": list(self.subset),
                "subset_names": [self.names[j] for j in self.subset] if self.names else [],
                "tree": tree_to_dict(self.tree),
            },
            "holdout_risk": self.holdout_risk,
            "grid_map": [
                {"alpha": a, "beta": b, "subset": list(s)} for a, b, s in self.grid_map
            ],
            "K": self.K,
            "models": [
                {
                    "subset": list(s),
                    "chain_index": k,
                    "leaves": self.family.models[(s, k)].tree.n_leaves,
                    "holdout_risk": r,
                }
                for (s, k), r in self.holdout_risks.items()
            ],
            "subsets_processed": self.subsets_processed,
            "config": self.config,
        }
        if self.importance is not None:
            out["importance"] = self.importance.to_dict(self.names or None)
        if self.pstar is not None:
            out["pstar"] = self.pstar.to_dict()
        return out

    def grid_markdown(self) -> str:
        """Selected subset per grid cell; rows are beta, columns alpha."""
        alphas = sorted({a for a, _ in self.family.entries})
        betas = sorted({b for _, b in self.family.entries})
        lookup = {(a, b): s for a, b, s in self.grid_map}
        fmt = lambda s: "{" + ",".join(str(j + 1) for j in s) + "}"
        lines = ["| beta \\ alpha | " + " | ".join(f"{a:g}" for a in alphas) + " |"]
        lines.append("|---|" + "---|" * len(alphas))
        for b in betas:
            lines.append(f"| {b:g} | " + " | ".join(fmt(lookup[(a, b)]) for a in alphas) + " |")
        return "\n".join(lines) + "\n"


def final_holdout(family: EstimatorFamily, ds: Dataset, split: SampleSplit) -> SelectionResult:
    """Pick the family member with the smallest contrast on i3.

    Ties go to the smaller subset, then the smaller tree. The reported
    ``(alpha, beta)`` is the smallest grid pair (alpha first) mapping to the
    winner.
    """
    if len(split.i3) == 0:
        raise ValueError("empty hold-out part")
    if not family.models:
        raise ValueError("empty family")
    risks = {key: empirical_contrast(m.tree, ds, split.i3) for key, m in family.models.items()}
    win = min(
        risks,
        key=lambda key: (risks[key], len(key[0]), family.models[key].tree.n_leaves, key[0], key[1]),
    )
    a, b = min(pair for pair, key in family.entries.items() if key == win)
    model = family.models[win]
    return SelectionResult(
        alpha=a,
        beta=b,
        subset=model.subset,
        tree=model.tree,
        holdout_risk=risks[win],
        family=family,
        holdout_risks=risks,
        names=ds.names,
    )


@dataclass(frozen=True)
class RunConfig:
    """Settings of one full run of the procedure.

    ``fractions`` defaults to (0.5, 0.25, 0.25) for M1 and (0.75, 0, 0.25) for
    M2; ``n_min`` defaults to 5 for regression and 1 for classification.
    """

    method: Method = Method.M1
    fractions: tuple[float, float, float] | None = None
    seed: int = 0
    mode: str = "pstar"
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
    beta_grid: tuple[float, ...] = DEFAULT_BETA_GRID
    n_min: int | None = None
    vi: str = VI_SURROGATE
    pstar_test: str = TEST_ONE_SE
    jobs: int = 1
    exhaustive_cap: int = EXHAUSTIVE_CAP
    force_exhaustive: bool = False
    theoretical: Theoretical | None = None
    sigma2_plugin: bool = False

    def resolved_fractions(self) -> tuple[float, float, float]:
        if self.fractions is not None:
            return tuple(float(f) for f in self.fractions)
        return (0.5, 0.25, 0.25) if Method(self.method) is Method.M1 else (0.75, 0.0, 0.25)

    def resolved_nmin(self, framework: Framework) -> int:
        if self.n_min is not None:
            return int(self.n_min)
        return 5 if Framework(framework) is Framework.REGRESSION else 1

    def echo(self, framework: Framework) -> dict:
        return {
            "framework": Framework(framework).value,
            "method": Method(self.method).value,
            "fractions": list(self.resolved_fractions()),
            "seed": self.seed,
            "mode": self.mode,
            "alpha_grid": list(self.alpha_grid),
            "beta_grid": list(self.beta_grid),
            "n_min": self.resolved_nmin(framework),
            "vi": self.vi,
            "pstar_test": self.pstar_test,
        }


def estimate_sigma2(ds: Dataset, rows: np.ndarray, n_min: int) -> float:
    """Residual mean square of the maximal tree on all variables."""
    tree = grow_maximal(ds, rows, range(ds.p), n_min)
    return empirical_contrast(tree, ds, rows)


def run_procedure(ds: Dataset, config: RunConfig) -> SelectionResult:
    """Split, build the candidate subsets, select over the grid, then hold out."""
    method = Method(config.method)
    n_min = config.resolved_nmin(ds.framework)
    if config.mode == "exhaustive":
        # Fail on the cap before any work.
        subsets = all_subsets(ds.p, config.exhaustive_cap, config.force_exhaustive)
    elif config.mode != "pstar":
        raise ValueError(f"unknown mode {config.mode!r}")
    split = split_three(ds, config.resolved_fractions(), config.seed, method)
    pconf = PstarConfig(n_min=n_min, vi=config.vi, test=config.pstar_test, seed=config.seed)
    pstar = None
    if config.mode == "pstar":
        pstar = build_pstar(ds, split, pconf)
        subsets = pstar.sets
        report = pstar.importance
    else:
        tree, grow_rows = importance_tree(ds, split, pconf)
        report = variable_importance(tree, ds, grow_rows, surrogate=config.vi != VI_PRIMARY)
    collection = build_collection(ds, split, subsets, n_min, config.jobs)
    theoretical = config.theoretical
    if config.sigma2_plugin and ds.framework is Framework.REGRESSION:
        theoretical = Theoretical(sigma2=estimate_sigma2(ds, split.i1, n_min), rho=0.0)
    spec = PenaltySpec(
        ds.framework, method, 0.0, 0.0, len(split.pruning_rows), ds.p, theoretical
    )
    family = grid_select(collection, config.alpha_grid, config.beta_grid, spec)
    result = final_holdout(family, ds, split)
    result.importance = report
    result.pstar = pstar
    result.subsets_processed = len(collection)
    result.chain_lengths = sum(len(s) for s in collection.values())
    result.config = config.echo(ds.framework)
    log.info(
        "selected %s with hold-out risk %.6g (K=%d, %d subsets)",
        [ds.names[j] for j in result.subset], result.holdout_risk, result.K, len(collection),
    )
    return result
