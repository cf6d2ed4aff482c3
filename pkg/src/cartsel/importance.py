"""Breiman variable importance and the importance-driven subset family.

The family is built by forward inclusion along the importance ranking: the
top variable starts the first set and each further candidate is kept only if
a hold-out test says it adds predictive power to the current set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cart import (
    Tree,
    impurity_gini,
    empirical_contrast,
    grow_maximal,
    node_rows,
    pointwise_losses,
    prune_sequence,
)
from .data import (
    STREAM_INTERNAL,
    STREAM_PERMUTATION,
    Dataset,
    Framework,
    Method,
    SampleSplit,
    rng_for,
)

VI_SURROGATE = "surrogate"
VI_PRIMARY = "primary-only"
TEST_ONE_SE = "one-se"
TEST_PERMUTATION = "permutation"


@dataclass(frozen=True)
class ImportanceReport:
    scores: tuple[float, ...]
    ranking: tuple[int, ...]
    raw: tuple[float, ...] = ()

    def to_dict(self, names=None) -> dict:
        out = {"scores": list(self.scores), "ranking": list(self.ranking)}
        if names is not None:
            out["names"] = list(names)
        return out

    def to_markdown(self, names) -> str:
        """Two-row table: variables by decreasing importance, then their rank."""
        head = "| Variable | " + " | ".join(names[j] for j in self.ranking) + " |"
        sep = "|---|" + "---|" * len(self.ranking)
        score = "| Score | " + " | ".join(f"{self.scores[j]:.1f}" for j in self.ranking) + " |"
        rank = "| Rank | " + " | ".join(str(i + 1) for i in range(len(self.ranking))) + " |"
        return "\n".join([head, sep, score, rank]) + "\n"


def split_decrease(y: np.ndarray, goes_left: np.ndarray, framework: Framework, n_total: int) -> float:
    """Impurity decrease of routing ``y`` by ``goes_left`` (same scale as growing)."""
    n = len(y)
    yl, yr = y[goes_left], y[~goes_left]
    if len(yl) == 0 or len(yr) == 0:
        return 0.0
    if framework is Framework.REGRESSION:
        yc = y - y.mean()
        s = float(yc[goes_left].sum())
        return s * s * (1.0 / len(yl) + 1.0 / len(yr)) / n_total
    gini = impurity_gini(n - y.sum(), y.sum())
    child = (len(yl) * impurity_gini(len(yl) - yl.sum(), yl.sum())
             + len(yr) * impurity_gini(len(yr) - yr.sum(), yr.sum())) / n
    return (n / n_total) * (gini - child)


def best_surrogate(x: np.ndarray, goes_left: np.ndarray) -> tuple[float, np.ndarray | None]:
    """Split on ``x`` agreeing most with the primary routing ``goes_left``.

    Both orientations count. Returns ``(agreement, routing)``, with routing
    None when ``x`` is constant in the node. Ties go to the smaller threshold.
    """
    n = len(x)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    valid = xs[1:] > xs[:-1]
    if not valid.any():
        return 0.0, None
    gl = goes_left[order].astype(float)
    left_in = np.cumsum(gl)[:-1]
    k = np.arange(1, n)
    right_total = n - gl.sum()
    agree = (left_in + right_total - (k - left_in)) / n
    agree = np.where(valid, np.maximum(agree, 1.0 - agree), -1.0)
    pos = int(np.argmax(agree))
    threshold = 0.5 * (xs[pos] + xs[pos + 1])
    return float(agree[pos]), x <= threshold


def variable_importance(
    tree: Tree, ds: Dataset, rows: np.ndarray, surrogate: bool = True
) -> ImportanceReport:
    """Impurity-decrease importance of every variable, scaled to a max of 100.

    The split variable of each internal node is credited with the node's
    decrease. With ``surrogate`` every other variable is also credited with
    the decrease achieved by its best surrogate split at that node (the split
    on it that reproduces the primary routing most often).
    """
    raw = np.zeros(ds.p)
    groups = node_rows(tree, ds, rows)
    n_total = len(np.asarray(rows))
    for k in tree.internal:
        j_star = int(tree.var[k])
        raw[j_star] += float(tree.decrease[k])
        if not surrogate:
            continue
        r = groups[k]
        if len(r) < 2:
            continue
        y = ds.y[r]
        goes_left = ds.x[r, j_star] <= tree.threshold[k]
        for j in range(ds.p):
            if j == j_star:
                continue
            _, routing = best_surrogate(ds.x[r, j], goes_left)
            if routing is not None:
                raw[j] += max(0.0, split_decrease(y, routing, ds.framework, n_total))
    top = raw.max()
    scores = 100.0 * raw / top if top > 0 else np.zeros(ds.p)
    ranking = sorted(range(ds.p), key=lambda j: (-raw[j], j))
    return ImportanceReport(
        tuple(float(s) for s in scores), tuple(ranking), tuple(float(v) for v in raw)
    )


@dataclass(frozen=True)
class PstarConfig:
    n_min: int = 5
    vi: str = VI_SURROGATE
    test: str = TEST_ONE_SE
    permutations: int = 200
    level: float = 0.05
    seed: int = 0
    grow_fraction: float = 2.0 / 3.0


@dataclass
class SubsetFamily:
    """Nested subsets built along the importance ranking.

    ``order`` lists accepted variables in acceptance order, so ``sets[i]`` is
    ``sorted(order[:i + 1])``. ``provenance`` has one entry per forward test.
    """

    sets: list[tuple[int, ...]]
    order: list[int]
    importance: ImportanceReport
    provenance: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "sets": [list(s) for s in self.sets],
            "order": list(self.order),
            "provenance": self.provenance,
        }


def learning_rows(ds: Dataset, split: SampleSplit, seed: int, grow_fraction: float):
    """Growing and validation rows for importance and forward tests.

    M1 uses the growing and pruning parts. M2 has no separate pruning part,
    so the growing part is cut again with the internal random stream.
    """
    if split.method is Method.M1:
        return split.i1, split.i2
    perm = rng_for(seed, STREAM_INTERNAL).permutation(split.i1)
    n_grow = math.floor(grow_fraction * len(perm) + 0.5)
    n_grow = min(max(n_grow, 1), len(perm) - 1)
    return np.sort(perm[:n_grow]), np.sort(perm[n_grow:])


def holdout_tree(
    ds: Dataset, grow_rows: np.ndarray, val_rows: np.ndarray, subset, n_min: int
) -> Tree:
    """Classical CART: grow, prune on the growing rows, pick by validation error.

    Ties in validation error go to the smaller subtree.
    """
    tree = grow_maximal(ds, grow_rows, subset, n_min)
    seq = prune_sequence(tree, ds, grow_rows)
    errors = [empirical_contrast(t, ds, val_rows) for t in seq.subtrees]
    best = min(range(len(errors)), key=lambda k: (errors[k], -k))
    return seq.subtrees[best]


def importance_tree(ds: Dataset, split: SampleSplit, config: PstarConfig) -> tuple[Tree, np.ndarray]:
    grow_rows, val_rows = learning_rows(ds, split, config.seed, config.grow_fraction)
    tree = holdout_tree(ds, grow_rows, val_rows, range(ds.p), config.n_min)
    return tree, grow_rows


def _one_se_test(base: np.ndarray, cand: np.ndarray) -> dict:
    """Accept when the mean loss drop exceeds its paired standard error."""
    diff = base - cand
    se = float(np.std(diff, ddof=1) / math.sqrt(len(diff))) if len(diff) > 1 else 0.0
    gain = float(diff.mean())
    return {"rule": TEST_ONE_SE, "gain": gain, "threshold": se, "accepted": gain > se}


def _permutation_test(
    ds: Dataset,
    grow_rows: np.ndarray,
    val_rows: np.ndarray,
    subset: tuple[int, ...],
    v: int,
    cand: np.ndarray,
    config: PstarConfig,
) -> dict:
    """Permute the candidate column and compare the refitted hold-out error."""
    rng = rng_for(config.seed, STREAM_PERMUTATION + 100 * (v + 1))
    observed = float(cand.mean())
    used = np.concatenate([grow_rows, val_rows])
    hits = 0
    for _ in range(config.permutations):
        x = ds.x.copy()
        x[used, v] = x[rng.permutation(used), v]
        perm_ds = Dataset(x, ds.y, ds.framework, ds.names)
        t = holdout_tree(perm_ds, grow_rows, val_rows, subset, config.n_min)
        if empirical_contrast(t, perm_ds, val_rows) <= observed:
            hits += 1
    p_value = (1 + hits) / (config.permutations + 1)
    return {
        "rule": TEST_PERMUTATION,
        "p_value": p_value,
        "threshold": config.level,
        "accepted": p_value <= config.level,
    }


def build_pstar(ds: Dataset, split: SampleSplit, config: PstarConfig | None = None) -> SubsetFamily:
    config = config or PstarConfig()
    grow_rows, val_rows = learning_rows(ds, split, config.seed, config.grow_fraction)
    tree = holdout_tree(ds, grow_rows, val_rows, range(ds.p), config.n_min)
    report = variable_importance(tree, ds, grow_rows, surrogate=config.vi == VI_SURROGATE)

    def losses(subset) -> np.ndarray:
        t = holdout_tree(ds, grow_rows, val_rows, subset, config.n_min)
        return pointwise_losses(t, ds, val_rows)

    order = [report.ranking[0]]
    sets = [tuple(order)]
    base = losses(order)
    provenance = []
    for v in report.ranking[1:]:
        candidate = tuple(sorted(order + [v]))
        cand = losses(candidate)
        if config.test == TEST_PERMUTATION:
            outcome = _permutation_test(ds, grow_rows, val_rows, candidate, v, cand, config)
        else:
            outcome = _one_se_test(base, cand)
        outcome.update(
            var=int(v),
            base_contrast=float(base.mean()),
            candidate_contrast=float(cand.mean()),
        )
        provenance.append(outcome)
        if outcome["accepted"]:
            order.append(v)
            sets.append(candidate)
            base = cand
    return SubsetFamily(sets, [int(v) for v in order], report, provenance)
