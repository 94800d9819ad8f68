"""Command-line entry point: generate, build-dataset, merge, eval-agg, stats.

Exit codes follow one convention across subcommands: 0 success, 1 usage or
configuration error, 2 runtime failure (including a generation run whose
failure rate exceeded the configured ceiling).
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from pathlib import Path

from .errors import ConfigError, DoctraceError
from .evalstats import (
    DEFAULT_AGGREGATE_CONFIG,
    AggregateConfig,
    ScoreTable,
    aggregate,
    deltas,
    length_stats,
    run_variance,
)
from .merge import MergePlan, TensorStore, apply_merge_plan
from .mixing import mix_datasets, mix_spec_from_json
from .pipeline import RunConfig, run_generate
from .tracegen import dataset_report, read_jsonl_dicts

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 on usage errors, matching the documented contract."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class _JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps(
            {
                "level": record.levelname,
                "logger": record.name,
                "message": record.getMessage(),
                "time": self.formatTime(record, "%Y-%m-%dT%H:%M:%S%z"),
            }
        )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="doctrace", description=__doc__)
    parser.add_argument(
        "--log-format", choices=["text", "json"], default="text",
        help="runtime log style on stderr (json = one JSON object per line)",
    )
    parser.add_argument("--log-file", default=None, help="send logs to a file instead of stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="run the full synthetic-example pipeline")
    p_gen.add_argument("--config", required=True, help="JSON run config (pipeline/backend/generate sections)")

    p_mix = sub.add_parser("build-dataset", help="mix sources per a mix spec and emit JSONL")
    p_mix.add_argument("--mix", required=True, help="JSON mix spec")
    p_mix.add_argument("--out", required=True, help="output JSONL path")
    p_mix.add_argument("--report", action="store_true", help="print a dataset report for the output")
    p_mix.add_argument("--report-out", default=None, help="also write the report JSON to this path")
    p_mix.add_argument("--json", action="store_true", help="machine-readable output")

    p_merge = sub.add_parser("merge", help="task-arithmetic merge of safetensors checkpoints")
    p_merge.add_argument("--base", required=True, help="base checkpoint (dir or file)")
    p_merge.add_argument("--tuned", action="append", required=True,
                         help="tuned checkpoint; repeat for a chained plan")
    p_merge.add_argument("--alpha", action="append", type=float, required=True,
                         help="merge strength; one per --tuned")
    p_merge.add_argument("--out", required=True, help="output checkpoint directory")
    p_merge.add_argument("--accum-dtype", choices=["float32", "float64"], default=None,
                         help="override the accumulation dtype (default: auto by input width)")
    p_merge.add_argument("--json", action="store_true")

    p_agg = sub.add_parser("eval-agg", help="normalize scores and report VA/LCA aggregates")
    p_agg.add_argument("--scores", required=True, help="CSV score table (or repeated for variance)",
                       action="append")
    p_agg.add_argument("--agg-config", default=None, help="JSON aggregate config")
    p_agg.add_argument("--base-model", default=None, help="also report deltas against this model")
    p_agg.add_argument("--json", action="store_true")

    p_stats = sub.add_parser("stats", help="response length and think-usage statistics")
    p_stats.add_argument("--responses", required=True,
                         help="JSONL with {text, token_count} per line")
    p_stats.add_argument("--bins", type=int, default=10)
    p_stats.add_argument("--histogram-csv", default=None,
                         help="write the token histogram bins to this CSV")
    p_stats.add_argument("--json", action="store_true")

    return parser


def _write_failure_manifest(config_path: str, error: str) -> None:
    """Best-effort manifest for config errors, when the output path is knowable."""
    from .pipeline import RunManifest, manifest_path_for

    try:
        with open(config_path, encoding="utf-8") as fh:
            raw = json.load(fh)
        output_path = raw.get("generate", {}).get("output_path")
    except Exception:
        return
    if not output_path:
        return
    try:
        Path(output_path).parent.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(output_path=str(output_path), exit_code=1, error=error)
        manifest.write(manifest_path_for(output_path))
    except OSError:
        pass


def cmd_generate(args: argparse.Namespace) -> int:
    try:
        config = RunConfig.from_file(args.config)
    except (ConfigError, json.JSONDecodeError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        _write_failure_manifest(args.config, f"{type(exc).__name__}: {exc}")
        return 1
    manifest = run_generate(config)
    print(manifest.to_json())
    return manifest.exit_code


def cmd_build_dataset(args: argparse.Namespace) -> int:
    with open(args.mix, encoding="utf-8") as fh:
        raw = json.load(fh)
    spec = mix_spec_from_json(raw, base_dir=Path(args.mix).parent)
    lines = mix_datasets(spec, random.Random(spec.rng_seed))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
    payload: dict = {"output": str(out), "count": len(lines)}
    if args.report or args.report_out:
        payload["report"] = dataset_report(read_jsonl_dicts(out))
    if args.report_out:
        Path(args.report_out).write_text(json.dumps(payload["report"], indent=2) + "\n")
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        print(f"wrote {len(lines)} examples to {out}")
        if args.report:
            print(json.dumps(payload["report"], indent=2))
    return 0


def cmd_merge(args: argparse.Namespace) -> int:
    if len(args.tuned) != len(args.alpha):
        print(f"need one --alpha per --tuned ({len(args.tuned)} vs {len(args.alpha)})",
              file=sys.stderr)
        return 1
    base = TensorStore.open(args.base)
    steps = tuple(
        (TensorStore.open(tuned), alpha) for tuned, alpha in zip(args.tuned, args.alpha)
    )
    merged = apply_merge_plan(base, MergePlan(steps), args.out, accum_dtype=args.accum_dtype)
    payload = {
        "output": str(Path(args.out)),
        "tensors": merged.total_tensors,
        "bytes": merged.total_bytes,
        "steps": [{"tuned": t, "alpha": a} for t, a in zip(args.tuned, args.alpha)],
    }
    print(json.dumps(payload, indent=2) if args.json else
          f"merged {merged.total_tensors} tensors ({merged.total_bytes} bytes) into {args.out}")
    return 0


def _load_agg_config(path: str | None) -> AggregateConfig:
    if path is None:
        return DEFAULT_AGGREGATE_CONFIG
    with open(path, encoding="utf-8") as fh:
        return AggregateConfig.from_json(json.load(fh))


def cmd_eval_agg(args: argparse.Namespace) -> int:
    cfg = _load_agg_config(args.agg_config)
    tables = [ScoreTable.from_csv(p) for p in args.scores]
    table = tables[0]
    aggregates = aggregate(table, cfg)
    payload: dict = {
        "aggregates": {
            model: {"VA": round(scores.va, 4), "LCA": round(scores.lca, 4)}
            for model, scores in aggregates.items()
        }
    }
    if args.base_model:
        payload["deltas"] = {
            model: {k: (None if v is None else round(v, 4)) for k, v in row.items()}
            for model, row in deltas(table, args.base_model, cfg).items()
        }
    if len(tables) > 1:
        variance = run_variance(tables, cfg)
        payload["run_variance"] = {
            "per_aggregate": {
                m: {k: round(v, 4) for k, v in row.items()}
                for m, row in variance.per_aggregate.items()
            },
            "per_benchmark": {
                m: {k: (None if v is None else round(v, 4)) for k, v in row.items()}
                for m, row in variance.per_benchmark.items()
            },
        }
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        width = max(len(m) for m in table.models)
        print(f"{'model'.ljust(width)}  {'VA':>7}  {'LCA':>7}")
        for model, scores in aggregates.items():
            print(f"{model.ljust(width)}  {scores.va:7.1f}  {scores.lca:7.1f}")
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    responses = []
    for record in read_jsonl_dicts(args.responses):
        responses.append((record.get("text", ""), int(record.get("token_count", 0))))
    stats = length_stats(responses, bins=args.bins)
    if args.histogram_csv:
        import csv

        with open(args.histogram_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_start", "bin_end", "count"])
            for start, end, count in zip(
                stats.bin_edges, stats.bin_edges[1:], stats.bin_counts
            ):
                writer.writerow([f"{start:g}", f"{end:g}", count])
    if args.json:
        print(json.dumps(stats.to_dict(), indent=2))
    else:
        print(f"responses:      {len(responses)}")
        print(f"mean tokens:    {stats.mean_tokens:.2f}")
        print(f"median tokens:  {stats.median:.1f}")
        print(f"think fraction: {stats.think_fraction:.2f}")
    return 0


_HANDLERS = {
    "generate": cmd_generate,
    "build-dataset": cmd_build_dataset,
    "merge": cmd_merge,
    "eval-agg": cmd_eval_agg,
    "stats": cmd_stats,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    log_handler: logging.Handler = (
        logging.FileHandler(args.log_file) if args.log_file else logging.StreamHandler(sys.stderr)
    )
    if args.log_format == "json":
        log_handler.setFormatter(_JsonLineFormatter())
    else:
        log_handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.basicConfig(level=logging.INFO, handlers=[log_handler], force=True)
    handler = _HANDLERS[args.command]
    try:
        return handler(args)
    except DoctraceError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
