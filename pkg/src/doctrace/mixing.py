"""Dataset mixing: draw fixed counts per source and shuffle globally.

Sources are JSONL files (or multi-part sources with a proportion table over
part files). Lines pass through untouched so externally-produced records keep
their exact bytes; only membership and order are decided here.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

from .errors import MalformedLine, SourceTooSmall

_PROPORTION_TOL = 1e-9


@dataclass(frozen=True)
class MixPart:
    name: str
    path: str
    proportion: float

    def __post_init__(self):
        if not 0.0 < self.proportion <= 1.0:
            raise ValueError(f"part {self.name!r}: proportion must be in (0, 1]")


@dataclass(frozen=True)
class MixSource:
    """One mix source: either a single JSONL file or a set of proportioned parts."""

    name: str
    count: int | None = None
    proportion: float | None = None
    path: str | None = None
    parts: tuple[MixPart, ...] = ()

    def __post_init__(self):
        if (self.count is None) == (self.proportion is None):
            raise ValueError(f"source {self.name!r}: give exactly one of count/proportion")
        if bool(self.path) == bool(self.parts):
            raise ValueError(f"source {self.name!r}: give exactly one of path/parts")
        if self.parts:
            total = sum(p.proportion for p in self.parts)
            if abs(total - 1.0) > _PROPORTION_TOL:
                raise ValueError(
                    f"source {self.name!r}: part proportions sum to {total!r}, not 1.0"
                )


@dataclass(frozen=True)
class MixSpec:
    sources: tuple[MixSource, ...]
    total: int
    rng_seed: int = 0

    def __post_init__(self):
        if not self.sources:
            raise ValueError("mix spec has no sources")
        if self.total < 1:
            raise ValueError(f"total must be positive, got {self.total}")
        proportional = [s for s in self.sources if s.proportion is not None]
        if proportional and len(proportional) == len(self.sources):
            psum = sum(s.proportion for s in self.sources)
            if abs(psum - 1.0) > _PROPORTION_TOL:
                raise ValueError(f"source proportions sum to {psum!r}, not 1.0")

    def resolved_counts(self) -> dict[str, int]:
        """Per-source example counts; proportional sources use largest-remainder."""
        counts: dict[str, int] = {}
        fixed = sum(s.count for s in self.sources if s.count is not None)
        remaining = self.total - fixed
        if remaining < 0:
            raise ValueError(f"fixed counts {fixed} exceed total {self.total}")
        proportional = [s for s in self.sources if s.proportion is not None]
        for source in self.sources:
            if source.count is not None:
                counts[source.name] = source.count
        if proportional:
            counts.update(
                _apportion(remaining, [(s.name, s.proportion) for s in proportional])
            )
        elif remaining:
            raise ValueError(
                f"fixed counts {fixed} do not reach total {self.total} "
                "and no proportional source absorbs the remainder"
            )
        return counts


def _apportion(total: int, shares: list[tuple[str, float]]) -> dict[str, int]:
    """Largest-remainder apportionment of ``total`` over fractional shares."""
    raw = [(name, total * share) for name, share in shares]
    counts = {name: int(value) for name, value in raw}
    leftover = total - sum(counts.values())
    remainders = sorted(raw, key=lambda item: (-(item[1] - int(item[1])), item[0]))
    for name, _ in remainders[:leftover]:
        counts[name] += 1
    return counts


def mix_spec_from_json(raw: dict, *, base_dir: str | Path | None = None) -> MixSpec:
    """Parse a mix spec mapping; relative paths resolve against ``base_dir``."""

    def resolve(path: str) -> str:
        if base_dir is not None and not Path(path).is_absolute():
            return str(Path(base_dir) / path)
        return path

    sources = []
    for entry in raw["sources"]:
        parts = tuple(
            MixPart(name=p["name"], path=resolve(p["path"]), proportion=float(p["proportion"]))
            for p in entry.get("parts", [])
        )
        sources.append(
            MixSource(
                name=entry["name"],
                count=entry.get("count"),
                proportion=entry.get("proportion"),
                path=resolve(entry["path"]) if entry.get("path") else None,
                parts=parts,
            )
        )
    return MixSpec(
        sources=tuple(sources),
        total=int(raw["total"]),
        rng_seed=int(raw.get("rng_seed", 0)),
    )


def _read_lines(path: str) -> list[str]:
    lines: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            stripped = line.rstrip("\n")
            if not stripped.strip():
                continue
            try:
                json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise MalformedLine(number, f"{path}: {exc}")
            lines.append(stripped)
    return lines


def _draw(path: str, wanted: int, rng: random.Random, label: str) -> list[str]:
    lines = _read_lines(path)
    if len(lines) < wanted:
        raise SourceTooSmall(f"{label}: need {wanted} examples, {path} holds {len(lines)}")
    if wanted == len(lines):
        return list(lines)
    return rng.sample(lines, wanted)


def mix_datasets(spec: MixSpec, rng: random.Random | None = None) -> list[str]:
    """Draw the requested counts per source and return globally shuffled lines.

    Sampling is without replacement within each part; all randomness flows
    from ``spec.rng_seed`` unless an explicit generator is supplied.
    """
    rng = rng if rng is not None else random.Random(spec.rng_seed)
    counts = spec.resolved_counts()
    drawn: list[str] = []
    for source in spec.sources:
        wanted = counts[source.name]
        if source.parts:
            part_counts = _apportion(
                wanted, [(p.name, p.proportion) for p in source.parts]
            )
            for part in source.parts:
                drawn.extend(
                    _draw(part.path, part_counts[part.name], rng, f"{source.name}/{part.name}")
                )
        else:
            drawn.extend(_draw(source.path, wanted, rng, source.name))
    rng.shuffle(drawn)
    return drawn


def part_counts_for(spec: MixSpec, source_name: str) -> dict[str, int]:
    """The per-part apportionment a mix run will use for one source."""
    for source in spec.sources:
        if source.name == source_name:
            if not source.parts:
                return {source.name: spec.resolved_counts()[source.name]}
            return _apportion(
                spec.resolved_counts()[source.name],
                [(p.name, p.proportion) for p in source.parts],
            )
    raise KeyError(source_name)
