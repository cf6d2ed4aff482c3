"""CART growing, prediction and weakest-link pruning.

Trees are stored as flat preorder node arrays. Every node keeps the value it
would carry as a leaf, so a pruned subtree is the same arrays with some
internal nodes turned into leaves (``var == -1``). Subtrees of one grown tree
therefore share node ids, and a subtree is identified by its leaf set.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Callable, Iterable, Sequence, Union

import numpy as np

from .data import Dataset, Framework

# Relative tolerance for treating floating values as tied.
TIE_RTOL = 1e-11


@dataclass(frozen=True)
class Split:
    var: int
    threshold: float
    decrease: float


@dataclass(frozen=True, eq=False)
class Tree:
    """Binary tree over a variable subset.

    Attributes
    ----------
    var, threshold, decrease, left, right : np.ndarray
        Per-node split description; ``var[k] == -1`` marks a leaf.
    value : np.ndarray
        Constant fitted at each node (used when the node is a leaf).
    count : np.ndarray
        Number of growing observations reaching each node.
    empty : np.ndarray
        True where a refit sample sent no rows to the node, so ``value`` is
        the growing-sample value.
    subset : tuple of int
        Variables the tree may split on.
    n_total : int
        Size of the growing sample.
    n_min : int
        Minimum child size used while growing.
    framework : Framework
    """

    var: np.ndarray
    threshold: np.ndarray
    decrease: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray
    empty: np.ndarray
    subset: tuple[int, ...]
    n_total: int
    n_min: int
    framework: Framework

    @cached_property
    def parent(self) -> np.ndarray:
        par = np.full(len(self.var), -1, dtype=int)
        for k in range(len(self.var)):
            if self.left[k] >= 0:
                par[self.left[k]] = k
                par[self.right[k]] = k
        return par

    @cached_property
    def reachable(self) -> np.ndarray:
        """Node ids reachable from the root, in preorder."""
        out = []
        stack = [0]
        while stack:
            k = stack.pop()
            out.append(k)
            if self.var[k] >= 0:
                stack.append(int(self.right[k]))
                stack.append(int(self.left[k]))
        return np.array(out, dtype=int)

    @cached_property
    def leaves(self) -> tuple[int, ...]:
        r = self.reachable
        return tuple(int(k) for k in r[self.var[r] < 0])

    @cached_property
    def internal(self) -> tuple[int, ...]:
        r = self.reachable
        return tuple(int(k) for k in r[self.var[r] >= 0])

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    def used_variables(self) -> set[int]:
        return {int(self.var[k]) for k in self.internal}

    def key(self) -> tuple:
        """Hashable identity of the subtree (within one grown tree)."""
        return (self.subset, self.leaves)

    def same_structure(self, other: "Tree") -> bool:
        return tree_to_dict(self) == tree_to_dict(other)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return predict_many(self, x)


Predictor = Union[Tree, Callable[[np.ndarray], np.ndarray]]


def impurity_regression(responses: Sequence[float], n_total: int) -> float:
    """Within-node sum of squares divided by the global sample size."""
    r = np.asarray(responses, dtype=float)
    if r.size == 0:
        raise ValueError("empty node")
    if n_total < r.size:
        raise ValueError("n_total smaller than node size")
    return float(((r - r.mean()) ** 2).sum() / n_total)


def impurity_gini(count0: int, count1: int) -> float:
    n = count0 + count1
    if n < 1:
        raise ValueError("empty node")
    p0 = count0 / n
    return 2.0 * p0 * (1.0 - p0)


def leaf_value(responses: np.ndarray, framework: Framework) -> float:
    if framework is Framework.REGRESSION:
        return float(np.mean(responses))
    ones = float(np.sum(responses))
    # Equal class counts resolve to label 0.
    return 1.0 if 2.0 * ones > len(responses) else 0.0


def best_split(
    ds: Dataset,
    rows: np.ndarray,
    subset: Iterable[int],
    framework: Framework | None = None,
    n_total: int | None = None,
    n_min: int = 1,
) -> Split | None:
    """Best impurity-decreasing split of ``rows`` over the variables in ``subset``.

    Candidate thresholds are midpoints between consecutive distinct values;
    only splits leaving ``n_min`` rows on each side are admissible. Ties go to
    the smallest variable index, then the smallest threshold. Returns None
    when no admissible split strictly decreases impurity.
    """
    framework = Framework(framework or ds.framework)
    rows = np.asarray(rows, dtype=int)
    n = len(rows)
    n_total = n if n_total is None else n_total
    n_min = max(int(n_min), 1)
    if n < 2 or n < 2 * n_min:
        return None
    cols = np.array(sorted(subset), dtype=int)
    xs = ds.x[np.ix_(rows, cols)]
    order = np.argsort(xs, axis=0, kind="stable")
    xs = np.take_along_axis(xs, order, axis=0)
    yv = ds.y[rows]
    nl = np.arange(1, n, dtype=float)[:, None]
    nr = n - nl
    if framework is Framework.REGRESSION:
        yc = yv - yv.mean()
        scale = float(yc @ yc) / n_total
        cl = np.cumsum(yc[order], axis=0)[:-1]
        dec = cl * cl * (1.0 / nl + 1.0 / nr) / n_total
    else:
        ones = float(yv.sum())
        q = ones / n
        gini = 2.0 * q * (1.0 - q)
        scale = gini * n / n_total
        c1 = np.cumsum(yv[order], axis=0)[:-1]
        ql = c1 / nl
        qr = (ones - c1) / nr
        child = (nl * 2.0 * ql * (1.0 - ql) + nr * 2.0 * qr * (1.0 - qr)) / n
        dec = (n / n_total) * (gini - child)
    valid = xs[1:] > xs[:-1]
    if n_min > 1:
        valid &= (nl >= n_min) & (nr >= n_min)
    dec = np.where(valid, dec, -np.inf)
    best = dec.max()
    if not best > TIE_RTOL * scale:
        return None
    flat = dec.T.ravel()
    idx = int(np.flatnonzero(flat >= best - TIE_RTOL * best)[0])
    j, k = divmod(idx, n - 1)
    threshold = 0.5 * (xs[k, j] + xs[k + 1, j])
    return Split(int(cols[j]), float(threshold), float(max(flat[idx], 0.0)))


def grow_maximal(
    ds: Dataset,
    rows: np.ndarray,
    subset: Iterable[int],
    n_min: int = 1,
    framework: Framework | None = None,
) -> Tree:
    """Grow the maximal tree on ``rows`` using splits on ``subset`` only.

    A node stays a leaf when it is pure, when it has fewer than two rows, or
    when no admissible split (both children >= ``n_min`` rows) decreases
    impurity.
    """
    framework = Framework(framework or ds.framework)
    rows = np.asarray(rows, dtype=int)
    if len(rows) < 1:
        raise ValueError("cannot grow a tree on zero rows")
    subset = tuple(sorted({int(j) for j in subset}))
    if not subset or subset[0] < 0 or subset[-1] >= ds.p:
        raise ValueError(f"invalid variable subset {subset}")
    n_total = len(rows)
    var, thr, dec, left, right, value, count = [], [], [], [], [], [], []
    stack = [(rows, -1, 0)]
    while stack:
        node_rows, parent, side = stack.pop()
        k = len(var)
        if parent >= 0:
            (left if side == 0 else right)[parent] = k
        yv = ds.y[node_rows]
        value.append(leaf_value(yv, framework))
        count.append(len(node_rows))
        left.append(-1)
        right.append(-1)
        split = None
        if len(node_rows) >= 2 and yv.min() != yv.max():
            split = best_split(ds, node_rows, subset, framework, n_total, n_min)
        if split is None:
            var.append(-1)
            thr.append(np.nan)
            dec.append(0.0)
            continue
        var.append(split.var)
        thr.append(split.threshold)
        dec.append(split.decrease)
        go_left = ds.x[node_rows, split.var] <= split.threshold
        stack.append((node_rows[~go_left], k, 1))
        stack.append((node_rows[go_left], k, 0))
    size = len(var)
    return Tree(
        var=np.array(var, dtype=int),
        threshold=np.array(thr, dtype=float),
        decrease=np.array(dec, dtype=float),
        left=np.array(left, dtype=int),
        right=np.array(right, dtype=int),
        value=np.array(value, dtype=float),
        count=np.array(count, dtype=int),
        empty=np.zeros(size, dtype=bool),
        subset=subset,
        n_total=n_total,
        n_min=int(n_min),
        framework=framework,
    )


def apply(tree: Tree, x: np.ndarray) -> np.ndarray:
    """Leaf id reached by each row of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    node = np.zeros(len(x), dtype=int)
    active = np.full(len(x), tree.var[0] >= 0)
    while active.any():
        idx = np.flatnonzero(active)
        nd = node[idx]
        go_left = x[idx, tree.var[nd]] <= tree.threshold[nd]
        node[idx] = np.where(go_left, tree.left[nd], tree.right[nd])
        active[idx] = tree.var[node[idx]] >= 0
    return node


def predict_many(tree: Tree, x: np.ndarray) -> np.ndarray:
    return tree.value[apply(tree, x)]


def predict(tree: Tree, x: Sequence[float]) -> float:
    k = 0
    while tree.var[k] >= 0:
        k = tree.left[k] if x[tree.var[k]] <= tree.threshold[k] else tree.right[k]
    return float(tree.value[k])


def _predict_rows(pred: Predictor, ds: Dataset, rows: np.ndarray) -> np.ndarray:
    if isinstance(pred, Tree):
        return predict_many(pred, ds.x[rows])
    return np.asarray(pred(ds.x[rows]), dtype=float)


def pointwise_losses(pred: Predictor, ds: Dataset, rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=int)
    return (ds.y[rows] - _predict_rows(pred, ds, rows)) ** 2


def empirical_contrast(pred: Predictor, ds: Dataset, rows: np.ndarray) -> float:
    """Mean squared error over ``rows``; the error rate for 0/1 predictors."""
    rows = np.asarray(rows, dtype=int)
    if rows.size == 0:
        raise ValueError("empty row set")
    return float(pointwise_losses(pred, ds, rows).mean())


def node_rows(tree: Tree, ds: Dataset, rows: np.ndarray) -> dict[int, np.ndarray]:
    """Rows reaching every reachable node."""
    rows = np.asarray(rows, dtype=int)
    out = {0: rows}
    for k in tree.reachable:
        if tree.var[k] < 0:
            continue
        r = out[k]
        go_left = ds.x[r, tree.var[k]] <= tree.threshold[k]
        out[int(tree.left[k])] = r[go_left]
        out[int(tree.right[k])] = r[~go_left]
    return out


def refit_leaves(
    tree: Tree, ds: Dataset, rows: np.ndarray, framework: Framework | None = None
) -> Tree:
    """Re-estimate node constants on ``rows`` keeping the structure.

    Every reachable node (internal ones included, so the result can still be
    pruned) gets the mean or majority label of the rows routed to it. Nodes
    receiving no rows keep their value and are flagged in ``empty``.
    """
    framework = Framework(framework or tree.framework)
    value = tree.value.copy()
    empty = tree.empty.copy()
    for k, r in node_rows(tree, ds, rows).items():
        if len(r) == 0:
            empty[k] = True
        else:
            value[k] = leaf_value(ds.y[r], framework)
            empty[k] = False
    return replace(tree, value=value, empty=empty)


def node_risks(tree: Tree, ds: Dataset, rows: np.ndarray) -> np.ndarray:
    """Contrast contribution of each reachable node taken as a leaf.

    ``risk[k] = sum over rows in k of (y - value[k])**2 / len(rows)``.
    Unreachable nodes get NaN.
    """
    rows = np.asarray(rows, dtype=int)
    n = len(rows)
    risk = np.full(len(tree.var), np.nan)
    for k, r in node_rows(tree, ds, rows).items():
        d = ds.y[r] - tree.value[k]
        risk[k] = float(d @ d) / n
    return risk


@dataclass(frozen=True, eq=False)
class PrunedSequence:
    """Nested subtrees with strictly increasing critical per-leaf penalties.

    ``subtrees[k]`` is the smallest minimizer of ``risk + lam * leaves`` for
    ``criticals[k] <= lam < criticals[k + 1]``.
    """

    subtrees: tuple[Tree, ...]
    criticals: tuple[float, ...]
    risks: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.subtrees)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(t.n_leaves for t in self.subtrees)


def prune_sequence(
    tree: Tree, ds: Dataset, rows: np.ndarray, framework: Framework | None = None
) -> PrunedSequence:
    """Weakest-link pruning of ``tree`` against the contrast on ``rows``.

    Node errors use the constants currently stored in the tree, so refit on
    ``rows`` first when pruning on a sample other than the growing one. All
    nodes attaining the minimal ``g(t)`` are collapsed in the same step.
    """
    risk = node_risks(tree, ds, rows)
    par = tree.parent
    cur_var = tree.var.copy()
    size = len(cur_var)
    branch = np.zeros(size)
    nleaf = np.zeros(size, dtype=int)
    for k in tree.reachable[::-1]:
        if cur_var[k] < 0:
            branch[k] = risk[k]
            nleaf[k] = 1
        else:
            branch[k] = branch[tree.left[k]] + branch[tree.right[k]]
            nleaf[k] = nleaf[tree.left[k]] + nleaf[tree.right[k]]
    g = np.full(size, np.inf)
    internal = [k for k in tree.reachable if cur_var[k] >= 0]
    for k in internal:
        g[k] = max(risk[k] - branch[k], 0.0) / (nleaf[k] - 1)
    tol = TIE_RTOL * max(float(risk[0]), 1e-300)

    def collapse(k: int) -> None:
        stack = [int(tree.left[k]), int(tree.right[k])]
        while stack:
            d = stack.pop()
            if cur_var[d] >= 0:
                stack.append(int(tree.left[d]))
                stack.append(int(tree.right[d]))
            g[d] = np.inf
        cur_var[k] = -1
        g[k] = np.inf
        d_risk = risk[k] - branch[k]
        d_leaf = 1 - nleaf[k]
        branch[k] = risk[k]
        nleaf[k] = 1
        a = par[k]
        while a >= 0:
            branch[a] += d_risk
            nleaf[a] += d_leaf
            g[a] = max(risk[a] - branch[a], 0.0) / (nleaf[a] - 1)
            a = par[a]

    def collapse_up_to(level: float) -> None:
        while True:
            hits = np.flatnonzero(g <= level + tol)
            if hits.size == 0:
                return
            # Preorder ids: ancestors come first and absorb their descendants.
            for k in hits:
                if np.isfinite(g[k]):
                    collapse(int(k))

    def snapshot() -> Tree:
        return replace(tree, var=cur_var.copy())

    subtrees, criticals, risks = [], [], []
    collapse_up_to(0.0)
    subtrees.append(snapshot())
    criticals.append(0.0)
    risks.append(float(branch[0]))
    while cur_var[0] >= 0:
        lam = float(g.min())
        collapse_up_to(lam)
        subtrees.append(snapshot())
        criticals.append(lam)
        risks.append(float(branch[0]))
    return PrunedSequence(tuple(subtrees), tuple(criticals), tuple(risks))


def subtree_index(seq: PrunedSequence, lam: float) -> int:
    """Index of the subtree selected at per-leaf penalty ``lam``."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    k = bisect.bisect_right(seq.criticals, lam + TIE_RTOL * abs(lam)) - 1
    return max(k, 0)


def subtree_at(seq: PrunedSequence, lam: float) -> Tree:
    """Smallest minimizer of ``risk + lam * leaves`` among pruned subtrees."""
    return seq.subtrees[subtree_index(seq, lam)]


def theoretical_nmin(rho: float, sigma2: float, n2: int) -> int:
    """Smallest integer N_min with N_min >= 24 rho^2 / sigma^2 log n2."""
    return max(1, int(np.ceil(24.0 * rho * rho / sigma2 * np.log(n2))))


def tree_to_dict(tree: Tree) -> dict:
    """Nested JSON-ready representation of the reachable tree."""

    def node(k: int) -> dict:
        base = {"value": float(tree.value[k]), "count": int(tree.count[k])}
        if tree.empty[k]:
            base["empty"] = True
        if tree.var[k] < 0:
            return base
        return {
            "var": int(tree.var[k]),
            "threshold": float(tree.threshold[k]),
            "decrease": float(tree.decrease[k]),
            **base,
            "left": node(int(tree.left[k])),
            "right": node(int(tree.right[k])),
        }

    return {
        "framework": tree.framework.value,
        "subset": list(tree.subset),
        "n_total": tree.n_total,
        "n_min": tree.n_min,
        "root": node(0),
    }


def tree_from_dict(doc: dict) -> Tree:
    var, thr, dec, left, right, value, count, empty = ([] for _ in range(8))

    def visit(nd: dict) -> int:
        k = len(var)
        leaf = "var" not in nd
        var.append(-1 if leaf else int(nd["var"]))
        thr.append(np.nan if leaf else float(nd["threshold"]))
        dec.append(0.0 if leaf else float(nd.get("decrease", 0.0)))
        value.append(float(nd["value"]))
        count.append(int(nd.get("count", 0)))
        empty.append(bool(nd.get("empty", False)))
        left.append(-1)
        right.append(-1)
        if not leaf:
            left[k] = visit(nd["left"])
            right[k] = visit(nd["right"])
        return k

    visit(doc["root"])
    return Tree(
        var=np.array(var, dtype=int),
        threshold=np.array(thr, dtype=float),
        decrease=np.array(dec, dtype=float),
        left=np.array(left, dtype=int),
        right=np.array(right, dtype=int),
        value=np.array(value, dtype=float),
        count=np.array(count, dtype=int),
        empty=np.array(empty, dtype=bool),
        subset=tuple(int(j) for j in doc["subset"]),
        n_total=int(doc["n_total"]),
        n_min=int(doc["n_min"]),
        framework=Framework(doc["framework"]),
    )
