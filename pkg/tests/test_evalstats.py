from __future__ import annotations

import json
import random
from pathlib import Path

import pytest

from doctrace.errors import (
    AxisMismatch,
    EmptyColumn,
    MissingScore,
    NonPositiveMax,
    UnknownBase,
)
from doctrace.evalstats import (
    AggregateConfig,
    MmlbCombine,
    ScoreTable,
    aggregate,
    combine_mmlb,
    deltas,
    has_think_block,
    length_stats,
    normalize_scores,
    run_variance,
)

FIXTURES = Path(__file__).parent / "fixtures"


def load_agg_config() -> AggregateConfig:
    return AggregateConfig.from_json(
        json.loads((FIXTURES / "aggregate_config.json").read_text())
    )


def two_by_two() -> ScoreTable:
    return ScoreTable(
        models=("A", "B"),
        benchmarks=("bench1", "bench2"),
        scores=((50.0, 80.0), (40.0, 100.0)),
    )


def simple_cfg(**kwargs) -> AggregateConfig:
    defaults = dict(
        va_benchmarks=("bench1", "bench2"), lca_benchmarks=("bench1", "bench2")
    )
    defaults.update(kwargs)
    return AggregateConfig(**defaults)


# --- normalization ---


def test_normalize_scores_arithmetic():
    normalized = normalize_scores(two_by_two(), simple_cfg())
    assert normalized.scores == ((100.0, 80.0), (80.0, 100.0))


def test_normalize_single_model_all_100():
    table = ScoreTable(models=("only",), benchmarks=("x", "y"), scores=((12.0, 99.0),))
    normalized = normalize_scores(table, AggregateConfig(va_benchmarks=("x",), lca_benchmarks=("x",)))
    assert normalized.scores == ((100.0, 100.0),)


def test_normalize_rejects_zero_column():
    table = ScoreTable(models=("A", "B"), benchmarks=("x",), scores=((0.0,), (0.0,)))
    with pytest.raises(NonPositiveMax):
        normalize_scores(table, AggregateConfig(va_benchmarks=("x",), lca_benchmarks=("x",)))


def test_normalize_rejects_empty_column():
    table = ScoreTable(models=("A", "B"), benchmarks=("x",), scores=((None,), (5.0,)))
    cfg = AggregateConfig(
        va_benchmarks=("x",), lca_benchmarks=("x",), normalization_models=("A",)
    )
    with pytest.raises(EmptyColumn):
        normalize_scores(table, cfg)


def test_normalizer_max_model_scores_exactly_100():
    rng = random.Random(5)
    for _ in range(20):
        models = tuple(f"m{i}" for i in range(4))
        scores = tuple(
            tuple(round(rng.uniform(10, 90), 1) for _ in range(3)) for _ in models
        )
        table = ScoreTable(models=models, benchmarks=("a", "b", "c"), scores=scores)
        cfg = AggregateConfig(va_benchmarks=("a",), lca_benchmarks=("a",))
        normalized = normalize_scores(table, cfg)
        for j in range(3):
            assert max(normalized.scores[i][j] for i in range(4)) == 100.0


def test_scale_invariance():
    # Scaling any benchmark column for every model leaves normalized scores alone.
    table = two_by_two()
    cfg = simple_cfg()
    scaled = ScoreTable(
        models=table.models,
        benchmarks=table.benchmarks,
        scores=tuple((row[0] * 3.5, row[1]) for row in table.scores),
    )
    assert normalize_scores(table, cfg) == normalize_scores(scaled, cfg)
    before = aggregate(table, cfg)
    after = aggregate(scaled, cfg)
    assert before == after


# --- aggregation ---


def test_aggregate_two_by_two():
    result = aggregate(two_by_two(), simple_cfg())
    assert result["A"].va == 90.0
    assert result["B"].va == 90.0


def test_aggregate_reproduces_reference_va_values():
    table = ScoreTable.from_csv(FIXTURES / "benchmark_scores.csv")
    cfg = load_agg_config()
    result = aggregate(table, cfg)
    assert abs(result["Qwen3 VL 235B A22B Instruct"].va - 98.4) <= 0.2
    assert abs(result["Synthetic Reasoning Qwen"].va - 95.0) <= 0.2
    assert abs(result["Qwen3 VL 32B Instruct"].va - 93.7) <= 0.2


def test_averaged_convention_differs():
    # The frozen separate-columns convention is the one matching the reference
    # values; averaging MMLB first shifts the top aggregate by ~0.3.
    table = ScoreTable.from_csv(FIXTURES / "benchmark_scores.csv")
    averaged_cfg = AggregateConfig(
        va_benchmarks=("MMLBD", "MMLBD-C", "MMLongBench", "SlideVQA", "DUDE"),
        lca_benchmarks=("MMLBD", "MMLBD-C", "MMLongBench", "SlideVQA", "DUDE",
                        "Helmet", "LongBench v2"),
        mmlb_combine=MmlbCombine.AVERAGED,
        mmlb_columns=("MMLB 32K", "MMLB 128K"),
    )
    result = aggregate(table, averaged_cfg)
    assert abs(result["Qwen3 VL 235B A22B Instruct"].va - 98.4) > 0.2


def test_lca_reproduced_with_extended_normalization_row():
    # The published LCA values imply a normalization set that spans ablation
    # rows too (a no-think variant peaks the Helmet column at 69.3).
    table = ScoreTable.from_csv(FIXTURES / "benchmark_scores.csv")
    extended = ScoreTable(
        models=table.models + ("Qwen3 VL CoT-on No-think",),
        benchmarks=table.benchmarks,
        scores=table.scores + ((51.4, 53.2, 72.3, 77.3, 74.0, 69.3, 42.0, 55.0, 80.0),),
    )
    result = aggregate(extended, load_agg_config())
    assert abs(result["Qwen3 VL 235B A22B Instruct"].lca - 98.5) <= 0.1
    assert abs(result["Synthetic Reasoning Qwen"].lca - 94.4) <= 0.1
    assert abs(result["Qwen3 VL 32B Instruct"].lca - 92.1) <= 0.1


def test_aggregate_benchmark_order_invariant():
    table = two_by_two()
    reordered = ScoreTable(
        models=table.models,
        benchmarks=("bench2", "bench1"),
        scores=tuple((row[1], row[0]) for row in table.scores),
    )
    assert aggregate(table, simple_cfg()) == aggregate(reordered, simple_cfg())


def test_aggregate_missing_score_is_hard_error():
    table = ScoreTable(
        models=("A", "B"), benchmarks=("x", "DUDE"), scores=((1.0, 2.0), (3.0, None))
    )
    cfg = AggregateConfig(va_benchmarks=("x", "DUDE"), lca_benchmarks=("x", "DUDE"))
    with pytest.raises(MissingScore):
        aggregate(table, cfg)


def test_va_must_be_subset_of_lca():
    with pytest.raises(ValueError):
        AggregateConfig(va_benchmarks=("a", "b"), lca_benchmarks=("a",))


def test_combine_mmlb_averages_columns():
    table = ScoreTable(
        models=("A",),
        benchmarks=("MMLB 32K", "MMLB 128K", "other"),
        scores=((80.0, 70.0, 10.0),),
    )
    cfg = AggregateConfig(
        va_benchmarks=("MMLongBench",), lca_benchmarks=("MMLongBench",),
        mmlb_combine=MmlbCombine.AVERAGED,
    )
    combined = combine_mmlb(table, cfg)
    assert combined.benchmarks == ("MMLongBench", "other")
    assert combined.scores == ((75.0, 10.0),)


# --- deltas ---


def test_delta_example_from_reference_table():
    table = ScoreTable.from_csv(FIXTURES / "benchmark_scores.csv")
    result = deltas(table, "Mistral 3.1 Small 24B")
    assert round(result["Synthetic Reasoning Mistral"]["MMLBD-C"], 1) == 7.9


def test_delta_base_against_itself_is_zero():
    table = two_by_two()
    result = deltas(table, "A")
    assert all(v == 0.0 for v in result["A"].values())


def test_delta_unknown_base():
    with pytest.raises(UnknownBase):
        deltas(two_by_two(), "nope")


def test_delta_antisymmetry():
    table = two_by_two()
    from_a = deltas(table, "A")
    from_b = deltas(table, "B")
    for benchmark in table.benchmarks:
        assert from_a["B"][benchmark] == -from_b["A"][benchmark]


def test_delta_includes_aggregates_when_config_given():
    table = two_by_two()
    result = deltas(table, "A", simple_cfg())
    assert result["B"]["VA"] == pytest.approx(0.0)
    assert "LCA" in result["B"]


# --- run variance ---


def _run_tables() -> list[ScoreTable]:
    return [
        ScoreTable.from_csv(FIXTURES / f"run_eval{i}.csv") for i in (1, 2, 3)
    ]


def test_run_variance_reproduces_reference_sigma():
    report = run_variance(_run_tables(), load_agg_config())
    assert report.per_aggregate["Qwen3 VL LongPO"]["VA"] == pytest.approx(0.33, abs=0.01)
    # Recomputing LCA from the raw columns lands near 0.28; the published
    # rounded value is lower, so only the recomputed reality is asserted.
    assert report.per_aggregate["Qwen3 VL LongPO"]["LCA"] == pytest.approx(0.278, abs=0.01)
    for model in ("Qwen3 VL 235B A22B Instruct", "Synthetic Reasoning Qwen"):
        assert report.per_aggregate[model]["VA"] == 0.0


def test_run_variance_identical_runs_zero():
    table = two_by_two()
    report = run_variance([table, table, table], simple_cfg())
    assert report.per_aggregate["A"]["VA"] == 0.0
    assert report.per_benchmark["A"]["bench1"] == 0.0


def test_run_variance_requires_matching_axes():
    other = ScoreTable(models=("A",), benchmarks=("bench1",), scores=((1.0,),))
    with pytest.raises(AxisMismatch):
        run_variance([two_by_two(), other], simple_cfg())
    with pytest.raises(ValueError):
        run_variance([two_by_two()], simple_cfg())


# --- CSV round trip ---


def test_csv_round_trip(tmp_path):
    table = ScoreTable(
        models=("A", "B"),
        benchmarks=("x", "y"),
        scores=((1.5, None), (None, 80.0)),
    )
    path = tmp_path / "scores.csv"
    table.to_csv(path)
    assert ScoreTable.from_csv(path) == table


# --- length statistics ---


def test_length_stats_mean():
    stats = length_stats([("a", 10), ("b", 20), ("c", 30)])
    assert stats.mean_tokens == 20.0
    assert stats.median == 20.0
    assert sum(stats.bin_counts) == 3


def test_length_ratio_matches_published_compression():
    explicit = length_stats([("<think>...</think> long", 1637)])
    implicit = length_stats([("short", 132)])
    ratio = explicit.mean_tokens / implicit.mean_tokens
    assert abs(ratio - 12.4) <= 0.05


def test_think_fraction_counts_well_formed_blocks():
    responses = [(f"<think>r{i}</think> answer", 50) for i in range(77)]
    responses += [(f"answer {i}", 20) for i in range(23)]
    stats = length_stats(responses)
    assert stats.think_fraction == 0.77


def test_think_detection_requires_closed_span():
    assert has_think_block("<think>reasoning</think> done")
    assert not has_think_block("<think> unclosed")
    assert not has_think_block("plain answer")
    assert has_think_block("prefix <think>\nmulti\nline\n</think> suffix")


def test_score_table_validation():
    with pytest.raises(AxisMismatch):
        ScoreTable(models=("A",), benchmarks=("x",), scores=())
    with pytest.raises(AxisMismatch):
        ScoreTable(models=("A", "A"), benchmarks=("x",), scores=((1.0,), (2.0,)))
    with pytest.raises(ValueError):
        ScoreTable(models=("A",), benchmarks=("x",), scores=((float("nan"),),))
