"""Task-arithmetic merging over sharded safetensors checkpoints.

Every floating-point tensor is interpolated element-wise along the tuned
model's weight delta: merged = base + alpha * (tuned - base). Arithmetic runs
in a wider accumulation dtype and casts back, tensors stream through fixed
size chunks, and the output mirrors the base checkpoint's shard layout so
downstream loaders see a familiar file set. Integer buffers copy from base
verbatim: arithmetic on index tensors is meaningless.
"""

from __future__ import annotations

import logging
import math
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import IncompatibleStores, IoFailure
from .tensorio import (
    INDEX_FILE_NAME,
    ShardWriter,
    TensorMeta,
    accum_to_bytes,
    bytes_to_accum,
    is_mergeable,
    iter_file_chunks,
    itemsize,
    read_shard_header,
)

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_BYTES = 8 << 20  # 8 MiB per read; peak memory stays a few chunks


@dataclass(frozen=True)
class TensorStore:
    """A named-tensor map over one safetensors file or a sharded checkpoint dir."""

    root: Path
    manifest: dict[str, TensorMeta]
    shard_files: tuple[str, ...]
    sharded: bool

    @property
    def total_tensors(self) -> int:
        return len(self.manifest)

    @property
    def total_bytes(self) -> int:
        return sum(m.nbytes for m in self.manifest.values())

    @classmethod
    def open(cls, path: str | Path) -> "TensorStore":
        path = Path(path)
        if path.is_file():
            metas, _ = read_shard_header(path)
            if not metas:
                raise IoFailure(f"{path}: no tensors in file")
            return cls(
                root=path.parent,
                manifest=metas,
                shard_files=(path.name,),
                sharded=False,
            )
        if not path.is_dir():
            raise IoFailure(f"{path}: no such file or directory")

        index_path = path / INDEX_FILE_NAME
        if index_path.is_file():
            import json

            index = json.loads(index_path.read_text(encoding="utf-8"))
            weight_map: dict[str, str] = index["weight_map"]
            shard_files = tuple(sorted(set(weight_map.values())))
            manifest: dict[str, TensorMeta] = {}
            for shard in shard_files:
                metas, _ = read_shard_header(path / shard)
                manifest.update(metas)
            missing = sorted(set(weight_map) - set(manifest))
            if missing:
                raise IoFailure(f"{path}: index names tensors absent from shards: {missing[:5]}")
            for name, shard in weight_map.items():
                if manifest[name].shard != shard:
                    raise IoFailure(
                        f"{path}: index places {name!r} in {shard}, "
                        f"found in {manifest[name].shard}"
                    )
            return cls(root=path, manifest=manifest, shard_files=shard_files, sharded=True)

        single = sorted(path.glob("*.safetensors"))
        if len(single) == 1:
            store = cls.open(single[0])
            return cls(
                root=path,
                manifest=store.manifest,
                shard_files=store.shard_files,
                sharded=False,
            )
        raise IoFailure(
            f"{path}: expected {INDEX_FILE_NAME} or exactly one .safetensors file, "
            f"found {len(single)}"
        )

    def shard_tensors(self, shard: str) -> list[TensorMeta]:
        """Tensors living in one shard, in data order."""
        metas = [m for m in self.manifest.values() if m.shard == shard]
        metas.sort(key=lambda m: m.start)
        return metas

    def iter_tensor_chunks(self, name: str, chunk_bytes: int = DEFAULT_CHUNK_BYTES) -> Iterator[bytes]:
        meta = self.manifest[name]
        # Align chunk boundaries to whole elements so chunks decode cleanly.
        step = max(itemsize(meta.dtype), chunk_bytes - chunk_bytes % itemsize(meta.dtype))
        return iter_file_chunks(self.root / meta.shard, meta.start, meta.end, step)

    def read_tensor_bytes(self, name: str) -> bytes:
        return b"".join(self.iter_tensor_chunks(name))


@dataclass(frozen=True)
class MergeSpec:
    base: TensorStore
    tuned: TensorStore
    alpha: float

    def __post_init__(self):
        if not math.isfinite(self.alpha):
            raise ValueError(f"alpha must be finite, got {self.alpha}")
        report = validate_compatibility(self.base, self.tuned)
        if not report.ok:
            raise IncompatibleStores("\n".join(report.issues()))
        if not 0.0 <= self.alpha <= 1.0:
            logger.warning(
                "merge strength %s is outside [0, 1]; extrapolating along the weight delta",
                self.alpha,
            )


@dataclass(frozen=True)
class MergePlan:
    """Tuned stores with per-step strengths, folded onto a base left to right."""

    steps: tuple[tuple[TensorStore, float], ...]

    def __post_init__(self):
        if not self.steps:
            raise ValueError("merge plan has no steps")


@dataclass
class CompatibilityReport:
    missing_in_tuned: list[str] = field(default_factory=list)
    extra_in_tuned: list[str] = field(default_factory=list)
    shape_mismatches: list[tuple[str, tuple[int, ...], tuple[int, ...]]] = field(default_factory=list)
    dtype_mismatches: list[tuple[str, str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (
            self.missing_in_tuned
            or self.extra_in_tuned
            or self.shape_mismatches
            or self.dtype_mismatches
        )

    def issues(self) -> list[str]:
        out = []
        for name in self.missing_in_tuned:
            out.append(f"MissingKey: {name!r} absent from tuned store")
        for name in self.extra_in_tuned:
            out.append(f"ExtraKey: {name!r} absent from base store")
        for name, base_shape, tuned_shape in self.shape_mismatches:
            out.append(f"ShapeMismatch: {name!r} base {base_shape} vs tuned {tuned_shape}")
        for name, base_dtype, tuned_dtype in self.dtype_mismatches:
            out.append(f"DtypeMismatch: {name!r} base {base_dtype} vs tuned {tuned_dtype}")
        return out


def validate_compatibility(base: TensorStore, tuned: TensorStore) -> CompatibilityReport:
    """Compare key sets, shapes, and dtypes; the report lists every mismatch."""
    report = CompatibilityReport()
    report.missing_in_tuned = sorted(set(base.manifest) - set(tuned.manifest))
    report.extra_in_tuned = sorted(set(tuned.manifest) - set(base.manifest))
    for name in sorted(set(base.manifest) & set(tuned.manifest)):
        b, t = base.manifest[name], tuned.manifest[name]
        if b.shape != t.shape:
            report.shape_mismatches.append((name, b.shape, t.shape))
        elif b.dtype != t.dtype:
            report.dtype_mismatches.append((name, b.dtype, t.dtype))
    return report


def _accum_dtype_for(dtype_tag: str, override: str | None) -> np.dtype:
    if override is not None:
        return np.dtype(override)
    # 16-bit inputs accumulate in float32, wider inputs in float64.
    return np.dtype(np.float32) if itemsize(dtype_tag) <= 2 else np.dtype(np.float64)


def _merged_chunks(
    base: TensorStore,
    tuned: TensorStore,
    meta: TensorMeta,
    alpha: float,
    accum: np.dtype,
    chunk_bytes: int,
) -> Iterator[bytes]:
    alpha_value = accum.type(alpha)
    base_chunks = base.iter_tensor_chunks(meta.name, chunk_bytes)
    tuned_chunks = tuned.iter_tensor_chunks(meta.name, chunk_bytes)
    for base_buf, tuned_buf in zip(base_chunks, tuned_chunks):
        base_values = bytes_to_accum(base_buf, meta.dtype, accum)
        tuned_values = bytes_to_accum(tuned_buf, meta.dtype, accum)
        merged = base_values + alpha_value * (tuned_values - base_values)
        yield accum_to_bytes(merged, meta.dtype)


def task_arithmetic_merge(
    spec: MergeSpec,
    out: str | Path,
    *,
    accum_dtype: str | None = None,
    chunk_bytes: int = DEFAULT_CHUNK_BYTES,
) -> TensorStore:
    """Merge tuned into base at strength alpha, streaming shard by shard.

    The output directory mirrors the base checkpoint's shard layout. Exact
    alpha 0.0 and 1.0 copy source bytes directly, which keeps those identities
    bit-exact even for NaN payloads.
    """
    base, tuned, alpha = spec.base, spec.tuned, spec.alpha
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"{out}: {exc}")

    weight_map: dict[str, str] = {}
    total_size = 0
    for shard in base.shard_files:
        metas = base.shard_tensors(shard)
        with ShardWriter(out / shard, [(m.name, m.dtype, m.shape) for m in metas]) as writer:
            for meta in metas:
                weight_map[meta.name] = shard
                total_size += meta.nbytes
                if not is_mergeable(meta.dtype):
                    chunks = base.iter_tensor_chunks(meta.name, chunk_bytes)
                elif alpha == 0.0:
                    chunks = base.iter_tensor_chunks(meta.name, chunk_bytes)
                elif alpha == 1.0:
                    chunks = tuned.iter_tensor_chunks(meta.name, chunk_bytes)
                else:
                    accum = _accum_dtype_for(meta.dtype, accum_dtype)
                    chunks = _merged_chunks(base, tuned, meta, alpha, accum, chunk_bytes)
                writer.write_tensor(meta.name, chunks)

    if base.sharded:
        from .tensorio import write_index

        write_index(out, weight_map, total_size)
    return TensorStore.open(out)


def apply_merge_plan(
    base: TensorStore,
    plan: MergePlan,
    out: str | Path,
    *,
    accum_dtype: str | None = None,
    chunk_bytes: int = DEFAULT_CHUNK_BYTES,
) -> TensorStore:
    """Fold the plan's (tuned, alpha) steps onto the base, left to right.

    Intermediate checkpoints live in temporary directories and are removed as
    soon as the next step has consumed them.
    """
    out = Path(out)
    current = base
    scratch: Path | None = None
    for step_index, (tuned, alpha) in enumerate(plan.steps, start=1):
        last = step_index == len(plan.steps)
        target = out if last else Path(tempfile.mkdtemp(prefix=f"merge_step{step_index}_"))
        try:
            spec = MergeSpec(base=current, tuned=tuned, alpha=alpha)
            current = task_arithmetic_merge(
                spec, target, accum_dtype=accum_dtype, chunk_bytes=chunk_bytes
            )
        except (IncompatibleStores, IoFailure) as exc:
            if not last:
                shutil.rmtree(target, ignore_errors=True)
            if scratch is not None:
                shutil.rmtree(scratch, ignore_errors=True)
            raise type(exc)(f"step {step_index}: {exc}")
        if scratch is not None:
            shutil.rmtree(scratch, ignore_errors=True)
        scratch = None if last else target
    return current
