"""Multi-seed reproduction of the simulated study and its report tables."""

from __future__ import annotations

import csv
import json
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .data import gen_breiman
from .selection import RunConfig, SelectionResult, run_procedure

EXPECTED_SIZES = frozenset({1, 3, 5, 7, 10})
# Display bins for the grid table: upper edges, last bin open.
ALPHA_BINS = (0.05, 0.1, 2.0, 12.0, 60.0)
BETA_BINS = (100.0, 700.0, 1300.0, 1700.0, 1900.0)


@dataclass(frozen=True)
class ReproduceConfig:
    n: int = 1000
    seeds: tuple[int, ...] = tuple(range(1, 21))
    run: RunConfig = field(default_factory=RunConfig)
    jobs: int = 1


def fmt_subset(subset: Sequence[int]) -> str:
    """One-based set notation, e.g. ``{1,2,5}``."""
    return "{" + ",".join(str(j + 1) for j in subset) + "}"


def seed_row(seed: int, result: SelectionResult) -> dict:
    return {
        "seed": seed,
        "ranking": list(result.importance.ranking) if result.importance else [],
        "grid": [[a, b, list(s)] for a, b, s in result.grid_map],
        "alpha_hat": result.alpha,
        "beta_hat": result.beta,
        "subset": list(result.subset),
        "holdout_risk": result.holdout_risk,
        "min_model_risk": min(result.holdout_risks.values()),
        "K": result.K,
        "subsets_processed": result.subsets_processed,
        "chain_lengths": result.chain_lengths,
        "pstar": [list(s) for s in result.pstar.sets] if result.pstar else None,
    }


def _run_seed(args) -> dict:
    n, seed, run = args
    ds = gen_breiman(n, seed)
    result = run_procedure(ds, replace(run, seed=seed, jobs=1))
    return seed_row(seed, result)


def _mode(values: list) -> tuple:
    """Most frequent value and its frequency; ties go to the first seen."""
    counts = Counter(values)
    top = max(counts.values())
    value = next(v for v in values if counts[v] == top)
    return value, top / len(values)


@dataclass
class ExperimentReport:
    rows: list[dict]
    config: dict

    @property
    def seeds(self) -> list[int]:
        return [r["seed"] for r in self.rows]

    def vi_table(self) -> dict:
        p = len(self.rows[0]["ranking"])
        positions = []
        for pos in range(p):
            var, freq = _mode([r["ranking"][pos] for r in self.rows])
            positions.append({"rank": pos + 1, "variable": var, "frequency": freq})
        mean_rank = {
            j: sum(r["ranking"].index(j) for r in self.rows) / len(self.rows) for j in range(p)
        }
        order = sorted(range(p), key=lambda j: (mean_rank[j], j))
        return {
            "per_seed": {r["seed"]: r["ranking"] for r in self.rows},
            "modal_by_rank": positions,
            "mean_rank_order": order,
            "mean_rank": [mean_rank[j] for j in range(p)],
        }

    def grid_table(self) -> dict:
        cells = {}
        for r in self.rows:
            for a, b, s in r["grid"]:
                cells.setdefault((a, b), []).append(tuple(s))
        raw = []
        for (a, b), subsets in cells.items():
            modal, freq = _mode(subsets)
            dist = Counter(subsets)
            raw.append({
                "alpha": a,
                "beta": b,
                "modal": list(modal),
                "frequency": freq,
                "distribution": [
                    {"subset": list(s), "frequency": c / len(subsets)}
                    for s, c in sorted(dist.items(), key=lambda kv: (-kv[1], kv[0]))
                ],
            })
        binned = {}
        for (a, b), subsets in cells.items():
            binned.setdefault((_bin(a, ALPHA_BINS), _bin(b, BETA_BINS)), []).extend(subsets)
        bins = []
        for (ai, bi), subsets in sorted(binned.items()):
            modal, freq = _mode(subsets)
            bins.append({
                "alpha_bin": _bin_label(ai, ALPHA_BINS, "alpha"),
                "beta_bin": _bin_label(bi, BETA_BINS, "beta"),
                "alpha_index": ai,
                "beta_index": bi,
                "modal": list(modal),
                "frequency": freq,
            })
        return {"cells": raw, "binned": bins}

    def final_table(self) -> dict:
        modal, freq = _mode([tuple(r["subset"]) for r in self.rows])
        return {
            "per_seed": [
                {k: r[k] for k in ("seed", "alpha_hat", "beta_hat", "subset", "holdout_risk", "K")}
                for r in self.rows
            ],
            "modal_subset": list(modal),
            "frequency": freq,
        }

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seeds": self.seeds,
            "rows": self.rows,
            "vi_table": self.vi_table(),
            "grid_table": self.grid_table(),
            "final_table": self.final_table(),
            "size_flags": check_expected_sizes(self),
        }


def _bin(value: float, edges: Sequence[float]) -> int:
    for i, e in enumerate(edges):
        if value <= e:
            return i
    return len(edges)


def _bin_label(i: int, edges: Sequence[float], name: str) -> str:
    if i == 0:
        return f"{name} <= {edges[0]:g}"
    if i == len(edges):
        return f"{name} > {edges[-1]:g}"
    return f"{edges[i - 1]:g} < {name} <= {edges[i]:g}"


def reproduce_example(config: ReproduceConfig) -> ExperimentReport:
    """Run the whole procedure on one simulated sample per seed."""
    if not config.seeds:
        raise ValueError("no seeds given")
    tasks = [(config.n, s, config.run) for s in sorted(config.seeds)]
    if config.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(config.jobs) as pool:
            rows = list(pool.map(_run_seed, tasks))
    else:
        rows = [_run_seed(t) for t in tasks]
    echo = {"n": config.n, **config.run.echo("regression")}
    echo.pop("seed")
    return ExperimentReport(rows, echo)


def check_expected_sizes(report: ExperimentReport) -> list[dict]:
    """Grid cells whose modal subset size is not one of 1, 3, 5, 7, 10."""
    flags = []
    for cell in report.grid_table()["cells"]:
        size = len(cell["modal"])
        if size not in EXPECTED_SIZES:
            flags.append({"alpha": cell["alpha"], "beta": cell["beta"],
                          "subset": cell["modal"], "size": size})
    return flags


def _markdown_vi(table: dict) -> str:
    lines = ["| Rank | " + " | ".join(str(e["rank"]) for e in table["modal_by_rank"]) + " |"]
    lines.append("|---|" + "---|" * len(table["modal_by_rank"]))
    lines.append("| Variable | " + " | ".join(
        f"X{e['variable'] + 1} ({e['frequency']:.0%})" for e in table["modal_by_rank"]) + " |")
    return "\n".join(lines) + "\n"


def _markdown_grid(table: dict) -> str:
    bins = table["binned"]
    a_idx = sorted({b["alpha_index"] for b in bins})
    b_idx = sorted({b["beta_index"] for b in bins})
    lookup = {(b["alpha_index"], b["beta_index"]): b for b in bins}
    a_label = {b["alpha_index"]: b["alpha_bin"] for b in bins}
    b_label = {b["beta_index"]: b["beta_bin"] for b in bins}
    lines = ["| beta \\ alpha | " + " | ".join(a_label[i] for i in a_idx) + " |"]
    lines.append("|---|" + "---|" * len(a_idx))
    for bi in b_idx:
        row = []
        for ai in a_idx:
            c = lookup.get((ai, bi))
            row.append(f"{fmt_subset(c['modal'])} ({c['frequency']:.0%})" if c else "")
        lines.append(f"| {b_label[bi]} | " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def _markdown_final(table: dict) -> str:
    lines = ["| seed | alpha_hat | beta_hat | selected set | hold-out risk |", "|---|---|---|---|---|"]
    for r in table["per_seed"]:
        lines.append(
            f"| {r['seed']} | {r['alpha_hat']:g} | {r['beta_hat']:g} | "
            f"{fmt_subset(r['subset'])} | {r['holdout_risk']:.6g} |"
        )
    lines.append("")
    lines.append(f"Modal final set: {fmt_subset(table['modal_subset'])} ({table['frequency']:.0%})")
    return "\n".join(lines) + "\n"


def write_report(report: ExperimentReport, outdir: str | Path, formats: Sequence[str] = ("json", "csv", "md")) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    written = []

    def dump(name: str, payload) -> None:
        path = outdir / name
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(path)

    dump("report.json", doc)
    tables = {"vi_table": doc["vi_table"], "grid_table": doc["grid_table"], "final_table": doc["final_table"]}
    if "json" in formats:
        for name, table in tables.items():
            dump(f"{name}.json", table)
    if "csv" in formats:
        with open(outdir / "vi_table.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            p = len(report.rows[0]["ranking"])
            w.writerow(["seed", *[f"rank{i + 1}" for i in range(p)]])
            for r in report.rows:
                w.writerow([r["seed"], *[f"X{j + 1}" for j in r["ranking"]]])
        with open(outdir / "grid_table.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed", "alpha", "beta", "subset"])
            for r in report.rows:
                for a, b, s in r["grid"]:
                    w.writerow([r["seed"], a, b, fmt_subset(s)])
        with open(outdir / "final_table.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed", "alpha_hat", "beta_hat", "subset", "holdout_risk", "K"])
            for r in report.rows:
                w.writerow([r["seed"], r["alpha_hat"], r["beta_hat"], fmt_subset(r["subset"]),
                            repr(r["holdout_risk"]), r["K"]])
        written += [outdir / f"{n}.csv" for n in tables]
    if "md" in formats:
        (outdir / "vi_table.md").write_text(_markdown_vi(doc["vi_table"]), encoding="utf-8")
        (outdir / "grid_table.md").write_text(_markdown_grid(doc["grid_table"]), encoding="utf-8")
        (outdir / "final_table.md").write_text(_markdown_final(doc["final_table"]), encoding="utf-8")
        written += [outdir / f"{n}.md" for n in tables]
    return written
