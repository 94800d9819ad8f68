"""Benchmark score normalization, VA/LCA aggregation, deltas, and run variance.

Scores are normalized per benchmark by the maximum over a configured model
set (by default every model in the table), then averaged over the benchmark
lists that define the visual aggregate (VA) and the long-context aggregate
(LCA). Normalizing before averaging keeps benchmarks with different score
ranges from dominating the mean.
"""

from __future__ import annotations

import csv
import re
import statistics
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    AxisMismatch,
    EmptyColumn,
    MissingScore,
    NonPositiveMax,
    UnknownBase,
)

_THINK_SPAN_RE = re.compile(r"<think>.*?</think>", re.DOTALL)


@dataclass(frozen=True)
class ScoreTable:
    """Models x benchmarks score matrix on a 0-100 scale; None marks a missing entry."""

    models: tuple[str, ...]
    benchmarks: tuple[str, ...]
    scores: tuple[tuple[float | None, ...], ...]

    def __post_init__(self):
        if len(self.scores) != len(self.models):
            raise AxisMismatch(
                f"{len(self.scores)} score rows for {len(self.models)} models"
            )
        for model, row in zip(self.models, self.scores):
            if len(row) != len(self.benchmarks):
                raise AxisMismatch(
                    f"row {model!r} has {len(row)} entries for "
                    f"{len(self.benchmarks)} benchmarks"
                )
            for value in row:
                if value is not None and not np.isfinite(value):
                    raise ValueError(f"non-finite score for {model!r}: {value}")
        if len(set(self.models)) != len(self.models):
            raise AxisMismatch("duplicate model names")
        if len(set(self.benchmarks)) != len(self.benchmarks):
            raise AxisMismatch("duplicate benchmark names")

    def score(self, model: str, benchmark: str) -> float | None:
        return self.scores[self.models.index(model)][self.benchmarks.index(benchmark)]

    @classmethod
    def from_csv(cls, path: str | Path) -> "ScoreTable":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            benchmarks = tuple(name.strip() for name in header[1:])
            models = []
            rows = []
            for row in reader:
                if not row or not row[0].strip():
                    continue
                models.append(row[0].strip())
                values = [
                    float(cell) if cell.strip() else None for cell in row[1 : len(header)]
                ]
                values += [None] * (len(benchmarks) - len(values))
                rows.append(tuple(values))
        return cls(models=tuple(models), benchmarks=benchmarks, scores=tuple(rows))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", *self.benchmarks])
            for model, row in zip(self.models, self.scores):
                writer.writerow(
                    [model, *("" if v is None else f"{v:g}" for v in row)]
                )


class MmlbCombine(str, Enum):
    SEPARATE = "separate"
    AVERAGED = "averaged"


@dataclass(frozen=True)
class AggregateConfig:
    """Benchmark lists and normalization convention for the VA/LCA aggregates.

    The frozen default convention keeps the two MMLongBench context lengths as
    separate columns and takes per-benchmark maxima over every model in the
    table; this is the convention that reproduces the reference aggregates.
    """

    va_benchmarks: tuple[str, ...]
    lca_benchmarks: tuple[str, ...]
    normalization_models: tuple[str, ...] | None = None  # None = all models
    mmlb_combine: MmlbCombine = MmlbCombine.SEPARATE
    mmlb_columns: tuple[str, str] = ("MMLB 32K", "MMLB 128K")
    mmlb_combined_name: str = "MMLongBench"

    def __post_init__(self):
        missing = set(self.va_benchmarks) - set(self.lca_benchmarks)
        if missing:
            raise ValueError(f"VA benchmarks must be a subset of LCA: {sorted(missing)}")

    @classmethod
    def from_json(cls, raw: dict) -> "AggregateConfig":
        kwargs = dict(
            va_benchmarks=tuple(raw["va_benchmarks"]),
            lca_benchmarks=tuple(raw["lca_benchmarks"]),
        )
        if raw.get("normalization_models") is not None:
            kwargs["normalization_models"] = tuple(raw["normalization_models"])
        if "mmlb_combine" in raw:
            kwargs["mmlb_combine"] = MmlbCombine(raw["mmlb_combine"])
        if "mmlb_columns" in raw:
            kwargs["mmlb_columns"] = tuple(raw["mmlb_columns"])
        if "mmlb_combined_name" in raw:
            kwargs["mmlb_combined_name"] = raw["mmlb_combined_name"]
        return cls(**kwargs)


DEFAULT_VA_BENCHMARKS = ("MMLBD", "MMLBD-C", "MMLB 32K", "MMLB 128K", "SlideVQA", "DUDE")
DEFAULT_LCA_BENCHMARKS = DEFAULT_VA_BENCHMARKS + ("Helmet", "LongBench v2")

DEFAULT_AGGREGATE_CONFIG = AggregateConfig(
    va_benchmarks=DEFAULT_VA_BENCHMARKS,
    lca_benchmarks=DEFAULT_LCA_BENCHMARKS,
)


def _norm_models(table: ScoreTable, cfg: AggregateConfig) -> tuple[str, ...]:
    if cfg.normalization_models is None:
        return table.models
    unknown = sorted(set(cfg.normalization_models) - set(table.models))
    if unknown:
        raise AxisMismatch(f"normalization models not in table: {unknown}")
    return cfg.normalization_models


def combine_mmlb(table: ScoreTable, cfg: AggregateConfig) -> ScoreTable:
    """Average the two MMLongBench context-length columns into one raw column."""
    col_a, col_b = cfg.mmlb_columns
    if col_a not in table.benchmarks or col_b not in table.benchmarks:
        raise AxisMismatch(f"table lacks MMLB columns {cfg.mmlb_columns}")
    index_a = table.benchmarks.index(col_a)
    index_b = table.benchmarks.index(col_b)
    benchmarks = []
    for i, name in enumerate(table.benchmarks):
        if i == index_b:
            continue
        benchmarks.append(cfg.mmlb_combined_name if i == index_a else name)
    rows = []
    for row in table.scores:
        a, b = row[index_a], row[index_b]
        combined = (a + b) / 2.0 if a is not None and b is not None else None
        new_row = [
            combined if i == index_a else value
            for i, value in enumerate(row)
            if i != index_b
        ]
        rows.append(tuple(new_row))
    return ScoreTable(
        models=table.models, benchmarks=tuple(benchmarks), scores=tuple(rows)
    )


def normalize_scores(table: ScoreTable, cfg: AggregateConfig) -> ScoreTable:
    """Scale every column so the best normalization-set model scores 100."""
    norm_models = _norm_models(table, cfg)
    maxima: list[float] = []
    for benchmark in table.benchmarks:
        values = [
            table.score(model, benchmark)
            for model in norm_models
            if table.score(model, benchmark) is not None
        ]
        if not values:
            raise EmptyColumn(f"no normalization score present for {benchmark!r}")
        peak = max(values)
        if peak <= 0:
            raise NonPositiveMax(f"benchmark {benchmark!r} has max {peak}")
        maxima.append(peak)
    rows = tuple(
        tuple(
            None if value is None else 100.0 * value / peak
            for value, peak in zip(row, maxima)
        )
        for row in table.scores
    )
    return ScoreTable(models=table.models, benchmarks=table.benchmarks, scores=rows)


@dataclass(frozen=True)
class AggregateScores:
    va: float
    lca: float


def aggregate(table: ScoreTable, cfg: AggregateConfig) -> dict[str, AggregateScores]:
    """Per-model VA and LCA from a raw score table.

    Applies the configured MMLB combination, normalizes, then averages over
    the VA / LCA benchmark lists. A model missing any required benchmark is a
    hard error.
    """
    working = (
        combine_mmlb(table, cfg) if cfg.mmlb_combine is MmlbCombine.AVERAGED else table
    )
    for name in set(cfg.lca_benchmarks) | set(cfg.va_benchmarks):
        if name not in working.benchmarks:
            raise AxisMismatch(f"aggregate benchmark {name!r} not in table")
    normalized = normalize_scores(working, cfg)

    def mean_over(model: str, names: Sequence[str]) -> float:
        values = []
        for name in names:
            value = normalized.score(model, name)
            if value is None:
                raise MissingScore(f"model {model!r} lacks a score for {name!r}")
            values.append(value)
        return statistics.fmean(values)

    return {
        model: AggregateScores(
            va=mean_over(model, cfg.va_benchmarks),
            lca=mean_over(model, cfg.lca_benchmarks),
        )
        for model in table.models
    }


def deltas(
    table: ScoreTable, base_model: str, cfg: AggregateConfig | None = None
) -> dict[str, dict[str, float | None]]:
    """Signed differences against a base model, per benchmark and per aggregate."""
    if base_model not in table.models:
        raise UnknownBase(base_model)
    out: dict[str, dict[str, float | None]] = {}
    for model in table.models:
        row: dict[str, float | None] = {}
        for benchmark in table.benchmarks:
            ours = table.score(model, benchmark)
            base = table.score(base_model, benchmark)
            row[benchmark] = None if ours is None or base is None else ours - base
        out[model] = row
    if cfg is not None:
        aggregates = aggregate(table, cfg)
        for model in table.models:
            out[model]["VA"] = aggregates[model].va - aggregates[base_model].va
            out[model]["LCA"] = aggregates[model].lca - aggregates[base_model].lca
    return out


@dataclass(frozen=True)
class VarianceReport:
    per_aggregate: dict[str, dict[str, float]]  # model -> {"VA": s, "LCA": s}
    per_benchmark: dict[str, dict[str, float | None]]


def run_variance(tables: Sequence[ScoreTable], cfg: AggregateConfig) -> VarianceReport:
    """Population standard deviation across repeated evaluation runs."""
    if len(tables) < 2:
        raise ValueError(f"need at least 2 runs, got {len(tables)}")
    first = tables[0]
    for table in tables[1:]:
        if table.models != first.models or table.benchmarks != first.benchmarks:
            raise AxisMismatch("run tables do not share identical model/benchmark axes")

    run_aggregates = [aggregate(table, cfg) for table in tables]
    per_aggregate = {
        model: {
            "VA": statistics.pstdev([agg[model].va for agg in run_aggregates]),
            "LCA": statistics.pstdev([agg[model].lca for agg in run_aggregates]),
        }
        for model in first.models
    }
    per_benchmark: dict[str, dict[str, float | None]] = {}
    for model in first.models:
        row: dict[str, float | None] = {}
        for benchmark in first.benchmarks:
            values = [table.score(model, benchmark) for table in tables]
            row[benchmark] = None if any(v is None for v in values) else statistics.pstdev(values)
        per_benchmark[model] = row
    return VarianceReport(per_aggregate=per_aggregate, per_benchmark=per_benchmark)


# --------------------------------------------------------------------------- #
# Response length statistics
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class LengthStats:
    mean_tokens: float
    median: float
    bin_edges: tuple[float, ...]
    bin_counts: tuple[int, ...]
    think_fraction: float

    def to_dict(self) -> dict:
        return {
            "mean_tokens": self.mean_tokens,
            "median": self.median,
            "histogram": {
                "bin_edges": list(self.bin_edges),
                "counts": list(self.bin_counts),
            },
            "think_fraction": self.think_fraction,
        }


def has_think_block(text: str) -> bool:
    """True when the text contains a well-formed <think>...</think> span."""
    return _THINK_SPAN_RE.search(text) is not None


def length_stats(responses: Sequence[tuple[str, int]], *, bins: int = 10) -> LengthStats:
    """Token-count distribution and think-block usage over model responses.

    Token counts are supplied by the caller; tokenization is out of scope here.
    """
    if not responses:
        return LengthStats(0.0, 0.0, (0.0, 0.0), (0,), 0.0)
    counts = [tokens for _, tokens in responses]
    thinkers = sum(1 for text, _ in responses if has_think_block(text))
    hist, edges = np.histogram(counts, bins=bins)
    return LengthStats(
        mean_tokens=statistics.fmean(counts),
        median=float(statistics.median(counts)),
        bin_edges=tuple(float(e) for e in edges),
        bin_counts=tuple(int(c) for c in hist),
        think_fraction=thinkers / len(responses),
    )
