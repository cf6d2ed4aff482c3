"""Datasets, sample splitting and the simulated benchmark.

Randomness follows a counter scheme: every consumer of the user seed draws
from ``numpy.random.default_rng([seed, stream])`` with a fixed stream id, so
adding a consumer never perturbs the others.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

STREAM_DATA = 0
STREAM_SPLIT = 1
STREAM_INTERNAL = 2
STREAM_PERMUTATION = 3


def rng_for(seed: int, stream: int) -> np.random.Generator:
    """Generator for one named random stream derived from ``seed``."""
    return np.random.default_rng([int(seed), int(stream)])


class Framework(str, enum.Enum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"


class Method(str, enum.Enum):
    """Data-splitting scheme.

    M1 grows on the first part, prunes and selects on the second, and does the
    final choice on the third. M2 grows and prunes on the first part.
    """

    M1 = "m1"
    M2 = "m2"


class DataError(ValueError):
    """Raised for malformed input data."""


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    framework: Framework
    names: tuple[str, ...] = ()

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DataError(f"x must be a non-empty 2-d array, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise DataError(f"y has shape {y.shape}, expected ({x.shape[0]},)")
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise DataError("dataset contains non-finite values")
        framework = Framework(self.framework)
        if framework is Framework.CLASSIFICATION and not np.isin(y, (0.0, 1.0)).all():
            raise DataError("response not in {0,1}")
        names = tuple(self.names) or tuple(f"X{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DataError(f"{len(names)} names for {x.shape[1]} variables")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "framework", framework)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class SampleSplit:
    """Disjoint index sets for growing (i1), pruning (i2) and final hold-out (i3)."""

    i1: np.ndarray
    i2: np.ndarray
    i3: np.ndarray
    method: Method
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.i1), len(self.i2), len(self.i3)

    @property
    def pruning_rows(self) -> np.ndarray:
        """Rows used to prune and to evaluate the penalized criterion."""
        return self.i2 if self.method is Method.M1 else self.i1


def load_csv(path: str | Path, target: str, framework: Framework | str) -> Dataset:
    framework = Framework(framework)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if target not in header:
            raise DataError(f"{path}: target column {target!r} not in header")
        t = header.index(target)
        rows = []
        for r, record in enumerate(reader, start=1):
            if not record:
                continue
            if len(record) != len(header):
                raise DataError(
                    f"row {r}: expected {len(header)} fields, got {len(record)}"
                )
            values = []
            for c, cell in enumerate(record):
                cell = cell.strip()
                if cell == "":
                    raise DataError(f"missing value at row {r}, column {header[c]}")
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"cannot parse {cell!r} at row {r}, column {header[c]}"
                    ) from None
                if not math.isfinite(v):
                    raise DataError(f"non-finite value at row {r}, column {header[c]}")
                values.append(v)
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    table = np.array(rows, dtype=float)
    y = table[:, t]
    x = np.delete(table, t, axis=1)
    names = tuple(h for i, h in enumerate(header) if i != t)
    if framework is Framework.CLASSIFICATION:
        bad = np.flatnonzero(~np.isin(y, (0.0, 1.0)))
        if bad.size:
            raise DataError(f"response not in {{0,1}} at row {bad[0] + 1}")
    return Dataset(x, y, framework, names)


def write_csv(ds: Dataset, path: str | Path, target: str = "y") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*ds.names, target])
        for xi, yi in zip(ds.x, ds.y):
            writer.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])


def split_sizes(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    f1, f2, f3 = fractions
    n1 = math.floor(f1 * n + 0.5)
    n2 = math.floor(f2 * n + 0.5)
    if abs(f1 + f2 + f3 - 1.0) < 1e-12:
        n3 = n - n1 - n2
    else:
        n3 = math.floor(f3 * n + 0.5)
    return n1, n2, n3


def split_three(
    ds: Dataset,
    fractions: Sequence[float],
    seed: int,
    method: Method | str,
) -> SampleSplit:
    """Random partition of the rows into the three roles.

    Rows are permuted by the seeded split stream and cut by
    ``n1 = floor(f1*n + 0.5)``, ``n2 = floor(f2*n + 0.5)``, with the remainder
    going to the hold-out part when the fractions sum to one. Index arrays are
    returned sorted.
    """
    method = Method(method)
    if len(fractions) != 3:
        raise ValueError("fractions must have three components")
    f1, f2, f3 = (float(f) for f in fractions)
    if min(f1, f2, f3) < 0 or f1 + f2 + f3 > 1 + 1e-12:
        raise ValueError(f"invalid fractions {fractions}")
    if f1 <= 0 or f3 <= 0:
        raise ValueError("f1 and f3 must be positive")
    if method is Method.M1 and f2 <= 0:
        raise ValueError("method m1 needs a positive pruning fraction f2")
    if method is Method.M2 and f2 != 0:
        raise ValueError("method m2 needs f2 = 0")
    n1, n2, n3 = split_sizes(ds.n, (f1, f2, f3))
    if n1 < 1 or n3 < 1 or (method is Method.M1 and n2 < 1) or n1 + n2 + n3 > ds.n:
        raise ValueError(f"split sizes {(n1, n2, n3)} invalid for n={ds.n}")
    perm = rng_for(seed, STREAM_SPLIT).permutation(ds.n)
    i1 = np.sort(perm[:n1])
    i2 = np.sort(perm[n1:n1 + n2])
    i3 = np.sort(perm[n1 + n2:n1 + n2 + n3])
    return SampleSplit(i1, i2, i3, method)


def breiman_function(x: np.ndarray) -> np.ndarray:
    """Regression function of the simulated example (columns 0..6 used)."""
    x = np.atleast_2d(x)
    pos = 3 + 3 * x[:, 1] + 2 * x[:, 2] + x[:, 3]
    neg = -3 + 3 * x[:, 4] + 2 * x[:, 5] + x[:, 6]
    return np.where(x[:, 0] == 1, pos, neg)


def gen_breiman(n: int, seed: int, noise_sd: float = math.sqrt(2.0), p: int = 10) -> Dataset:
    """Simulate the ten-variable benchmark.

    ``X1`` is uniform on {-1, 1}, every other variable uniform on {-1, 0, 1},
    and ``y = s(X) + eps`` with Gaussian noise of standard deviation
    ``noise_sd``. Only X1..X7 enter ``s``. ``p > 10`` appends further pure
    noise variables with the same three-level law.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if p < 10:
        raise ValueError("the benchmark needs p >= 10")
    rng = rng_for(seed, STREAM_DATA)
    x = rng.integers(-1, 2, size=(n, p)).astype(float)
    x[:, 0] = rng.choice([-1.0, 1.0], size=n)
    y = breiman_function(x) + rng.normal(0.0, noise_sd, size=n)
    return Dataset(x, y, Framework.REGRESSION)
