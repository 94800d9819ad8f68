from __future__ import annotations

import json
from pathlib import Path

import ml_dtypes
import numpy as np
import pytest
from safetensors.numpy import load_file

from doctrace.errors import IncompatibleStores, IoFailure
from doctrace.merge import (
    MergePlan,
    MergeSpec,
    TensorStore,
    apply_merge_plan,
    task_arithmetic_merge,
    validate_compatibility,
)
from doctrace.tensorio import ShardWriter, bf16_to_f32, f32_to_bf16

from conftest import random_tensors, save_sharded_checkpoint, save_single_checkpoint


def scalar_merge_oracle(base: np.ndarray, tuned: np.ndarray, alpha: float, accum=np.float32):
    """Element-by-element reference loop, independent of the streaming path."""
    flat_base = base.reshape(-1)
    flat_tuned = tuned.reshape(-1)
    out = np.empty_like(flat_base)
    alpha_scalar = accum(alpha)
    for i in range(flat_base.size):
        b = accum(flat_base[i])
        t = accum(flat_tuned[i])
        out[i] = b + alpha_scalar * (t - b)
    return out.reshape(base.shape)


def open_pair(tmp_path: Path, base_tensors, tuned_tensors, *, sharded=True):
    if sharded:
        half = len(base_tensors) // 2 or 1
        names = list(base_tensors)

        def split(tensors):
            return {
                "model-00001-of-00002.safetensors": {n: tensors[n] for n in names[:half]},
                "model-00002-of-00002.safetensors": {n: tensors[n] for n in names[half:]},
            }

        base = TensorStore.open(save_sharded_checkpoint(tmp_path / "base", split(base_tensors)))
        tuned = TensorStore.open(save_sharded_checkpoint(tmp_path / "tuned", split(tuned_tensors)))
    else:
        base = TensorStore.open(
            save_single_checkpoint(tmp_path / "base" / "model.safetensors", base_tensors)
        )
        tuned = TensorStore.open(
            save_single_checkpoint(tmp_path / "tuned" / "model.safetensors", tuned_tensors)
        )
    return base, tuned


# --- container reader/writer ---


def test_reader_matches_official_library(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "w1": rng.standard_normal((8, 4)).astype(np.float32),
        "w2": rng.standard_normal(16).astype(np.float16),
        "ids": np.arange(10, dtype=np.int64),
    }
    path = save_single_checkpoint(tmp_path / "m.safetensors", tensors)
    store = TensorStore.open(path)
    assert store.total_tensors == 3
    for name, arr in tensors.items():
        assert store.manifest[name].shape == arr.shape
        assert store.read_tensor_bytes(name) == arr.tobytes()


def test_writer_output_loads_with_official_library(tmp_path):
    rng = np.random.default_rng(1)
    w1 = rng.standard_normal((4, 4)).astype(np.float32)
    w2 = rng.standard_normal(6).astype(np.float16)
    path = tmp_path / "out.safetensors"
    with ShardWriter(path, [("w1", "F32", (4, 4)), ("w2", "F16", (6,))]) as writer:
        writer.write_tensor("w1", iter([w1.tobytes()]))
        writer.write_tensor("w2", iter([w2.tobytes()[:4], w2.tobytes()[4:]]))
    loaded = load_file(path)
    np.testing.assert_array_equal(loaded["w1"], w1)
    np.testing.assert_array_equal(loaded["w2"], w2)


def test_writer_enforces_sizes_and_order(tmp_path):
    with pytest.raises(IoFailure):
        with ShardWriter(tmp_path / "bad.safetensors", [("w", "F32", (2,))]) as writer:
            writer.write_tensor("w", iter([b"\x00" * 4]))  # 4 bytes, needs 8
    writer = ShardWriter(tmp_path / "bad2.safetensors", [("a", "F32", (1,)), ("b", "F32", (1,))])
    with pytest.raises(IoFailure):
        writer.write_tensor("b", iter([b"\x00" * 4]))


def test_bf16_conversion_matches_ml_dtypes():
    rng = np.random.default_rng(2)
    values = np.concatenate([
        rng.standard_normal(4096).astype(np.float32) * 1e3,
        np.array([0.0, -0.0, np.inf, -np.inf, np.nan, 1e-40, 65504.0, 3.39e38], dtype=np.float32),
        # Exact ties exercise round-to-nearest-even.
        np.array([1.00390625, 1.01171875, -1.00390625], dtype=np.float32),
    ])
    ours = f32_to_bf16(values)
    ref = values.astype(ml_dtypes.bfloat16)
    ref_words = ref.view(np.uint16)
    nan_mask = np.isnan(values)
    np.testing.assert_array_equal(ours[~nan_mask], ref_words[~nan_mask])
    # NaNs stay NaNs (payload may differ).
    assert np.isnan(bf16_to_f32(ours[nan_mask])).all()
    # Widening is exact.
    np.testing.assert_array_equal(
        bf16_to_f32(ref_words), ref.astype(np.float32)
    )


# --- compatibility ---


def test_compatibility_identical_ok(tmp_path):
    rng = np.random.default_rng(3)
    tensors = random_tensors(rng, ["a", "b", "c"])
    base, tuned = open_pair(tmp_path, tensors, tensors)
    report = validate_compatibility(base, tuned)
    assert report.ok
    assert report.issues() == []


def test_compatibility_lists_every_mismatch(tmp_path):
    rng = np.random.default_rng(4)
    base_tensors = {
        "layer.7.w": rng.standard_normal((8, 8)).astype(np.float16),
        "shape_diff": rng.standard_normal((4, 4)).astype(np.float16),
        "dtype_diff": rng.standard_normal(4).astype(np.float16),
        "shared": rng.standard_normal(4).astype(np.float16),
    }
    tuned_tensors = {
        "shape_diff": rng.standard_normal((4, 2)).astype(np.float16),
        "dtype_diff": rng.standard_normal(4).astype(np.float32),
        "shared": rng.standard_normal(4).astype(np.float16),
        "only_tuned": rng.standard_normal(4).astype(np.float16),
    }
    base, tuned = open_pair(tmp_path, base_tensors, tuned_tensors, sharded=False)
    report = validate_compatibility(base, tuned)
    assert not report.ok
    assert report.missing_in_tuned == ["layer.7.w"]
    assert report.extra_in_tuned == ["only_tuned"]
    assert [m[0] for m in report.shape_mismatches] == ["shape_diff"]
    assert [m[0] for m in report.dtype_mismatches] == ["dtype_diff"]
    with pytest.raises(IncompatibleStores):
        MergeSpec(base=base, tuned=tuned, alpha=0.5)


# --- merge arithmetic ---

ALPHA_QUARTER = 0.25


def test_alpha_zero_reproduces_base_bit_exactly(tmp_path):
    rng = np.random.default_rng(5)
    base_tensors = random_tensors(rng, ["a", "b", "c", "d"])
    tuned_tensors = random_tensors(rng, ["a", "b", "c", "d"])
    base, tuned = open_pair(tmp_path, base_tensors, tuned_tensors)
    merged = task_arithmetic_merge(MergeSpec(base, tuned, 0.0), tmp_path / "out")
    for name in base.manifest:
        assert merged.read_tensor_bytes(name) == base.read_tensor_bytes(name)


def test_alpha_one_reproduces_tuned_bit_exactly(tmp_path):
    rng = np.random.default_rng(6)
    base_tensors = random_tensors(rng, ["a", "b"])
    tuned_tensors = random_tensors(rng, ["a", "b"])
    base, tuned = open_pair(tmp_path, base_tensors, tuned_tensors)
    merged = task_arithmetic_merge(MergeSpec(base, tuned, 1.0), tmp_path / "out")
    for name in tuned.manifest:
        assert merged.read_tensor_bytes(name) == tuned.read_tensor_bytes(name)


def test_direct_arithmetic_example(tmp_path):
    base, tuned = open_pair(
        tmp_path,
        {"w": np.array([1.0, 2.0], dtype=np.float32)},
        {"w": np.array([5.0, 6.0], dtype=np.float32)},
        sharded=False,
    )
    merged = task_arithmetic_merge(MergeSpec(base, tuned, ALPHA_QUARTER), tmp_path / "out")
    values = np.frombuffer(merged.read_tensor_bytes("w"), dtype=np.float32)
    np.testing.assert_array_equal(values, np.array([2.0, 3.0], dtype=np.float32))


def test_streaming_merge_matches_scalar_oracle_f16(tmp_path):
    rng = np.random.default_rng(7)
    base_tensors = {
        "big": rng.standard_normal(5000).astype(np.float16),
        "mat": rng.standard_normal((40, 30)).astype(np.float16),
    }
    tuned_tensors = {
        "big": rng.standard_normal(5000).astype(np.float16),
        "mat": rng.standard_normal((40, 30)).astype(np.float16),
    }
    base, tuned = open_pair(tmp_path, base_tensors, tuned_tensors)
    # Tiny chunks force multiple chunk boundaries through the streaming path.
    merged = task_arithmetic_merge(
        MergeSpec(base, tuned, ALPHA_QUARTER), tmp_path / "out", chunk_bytes=256
    )
    for name in base_tensors:
        got = np.frombuffer(merged.read_tensor_bytes(name), dtype=np.float16)
        want = scalar_merge_oracle(
            base_tensors[name].reshape(-1), tuned_tensors[name].reshape(-1), ALPHA_QUARTER
        )
        np.testing.assert_array_equal(got, want)


def test_streaming_merge_matches_oracle_f64_exactly(tmp_path):
    rng = np.random.default_rng(8)
    base_tensors = {"w": rng.standard_normal(2000)}
    tuned_tensors = {"w": rng.standard_normal(2000)}
    base, tuned = open_pair(tmp_path, base_tensors, tuned_tensors, sharded=False)
    merged = task_arithmetic_merge(MergeSpec(base, tuned, 0.37), tmp_path / "out")
    got = np.frombuffer(merged.read_tensor_bytes("w"), dtype=np.float64)
    want = scalar_merge_oracle(base_tensors["w"], tuned_tensors["w"], 0.37, accum=np.float64)
    np.testing.assert_array_equal(got, want)


def test_bf16_merge_matches_ml_dtypes_oracle(tmp_path):
    rng = np.random.default_rng(9)
    base_arr = rng.standard_normal(4096).astype(ml_dtypes.bfloat16)
    tuned_arr = rng.standard_normal(4096).astype(ml_dtypes.bfloat16)

    def write_bf16(path: Path, arr):
        path.parent.mkdir(parents=True, exist_ok=True)
        with ShardWriter(path, [("w", "BF16", arr.shape)]) as writer:
            writer.write_tensor("w", iter([arr.tobytes()]))

    write_bf16(tmp_path / "base" / "model.safetensors", base_arr)
    write_bf16(tmp_path / "tuned" / "model.safetensors", tuned_arr)
    base = TensorStore.open(tmp_path / "base")
    tuned = TensorStore.open(tmp_path / "tuned")
    merged = task_arithmetic_merge(MergeSpec(base, tuned, ALPHA_QUARTER), tmp_path / "out")

    wide_base = base_arr.astype(np.float32)
    wide_tuned = tuned_arr.astype(np.float32)
    want = (wide_base + np.float32(ALPHA_QUARTER) * (wide_tuned - wide_base)).astype(
        ml_dtypes.bfloat16
    )
    got = np.frombuffer(merged.read_tensor_bytes("w"), dtype=np.uint16)
    np.testing.assert_array_equal(got, want.view(np.uint16))


def test_integer_tensors_copied_from_base(tmp_path):
    base_tensors = {
        "w": np.array([0.0, 0.0], dtype=np.float32),
        "positions": np.arange(8, dtype=np.int64),
    }
    tuned_tensors = {
        "w": np.array([4.0, 8.0], dtype=np.float32),
        "positions": np.arange(8, dtype=np.int64) + 100,
    }
    base, tuned = open_pair(tmp_path, base_tensors, tuned_tensors, sharded=False)
    merged = task_arithmetic_merge(MergeSpec(base, tuned, 0.5), tmp_path / "out")
    got = np.frombuffer(merged.read_tensor_bytes("positions"), dtype=np.int64)
    np.testing.assert_array_equal(got, base_tensors["positions"])
    got_w = np.frombuffer(merged.read_tensor_bytes("w"), dtype=np.float32)
    np.testing.assert_array_equal(got_w, np.array([2.0, 4.0], dtype=np.float32))


def test_merge_with_identical_stores_is_identity_for_any_alpha(tmp_path):
    rng = np.random.default_rng(10)
    tensors = random_tensors(rng, ["a", "b"], dtype=np.float32)
    for i, alpha in enumerate([0.0, 0.25, 1.0, 1.7, -0.5]):
        base, tuned = open_pair(tmp_path / f"case{i}", tensors, tensors)
        merged = task_arithmetic_merge(MergeSpec(base, tuned, alpha), tmp_path / f"out{i}")
        for name in tensors:
            assert merged.read_tensor_bytes(name) == base.read_tensor_bytes(name)


def test_composition_closed_form(tmp_path):
    # merge(merge(b, t, a), t, b2) == b + (a + b2*(1-a)) * (t - b)
    rng = np.random.default_rng(11)
    base_tensors = {"w": rng.standard_normal(3000).astype(np.float32)}
    tuned_tensors = {"w": rng.standard_normal(3000).astype(np.float32)}
    alpha, beta = 0.25, 0.4
    base, tuned = open_pair(tmp_path, base_tensors, tuned_tensors, sharded=False)
    step1 = task_arithmetic_merge(MergeSpec(base, tuned, alpha), tmp_path / "s1")
    step2 = task_arithmetic_merge(MergeSpec(step1, tuned, beta), tmp_path / "s2")
    got = np.frombuffer(step2.read_tensor_bytes("w"), dtype=np.float32).astype(np.float64)
    b = base_tensors["w"].astype(np.float64)
    t = tuned_tensors["w"].astype(np.float64)
    want = b + (alpha + beta * (1 - alpha)) * (t - b)
    # Relative to operand magnitude: the closed form can land arbitrarily
    # close to zero, where a result-relative ratio is meaningless.
    scale = np.maximum(np.maximum(np.abs(b), np.abs(t)), 1e-12)
    assert np.max(np.abs(got - want) / scale) < 1e-6


def test_output_mirrors_base_layout(tmp_path):
    rng = np.random.default_rng(12)
    base_tensors = random_tensors(rng, ["a", "b", "c", "d", "e"])
    tuned_tensors = random_tensors(rng, ["a", "b", "c", "d", "e"])
    base, tuned = open_pair(tmp_path, base_tensors, tuned_tensors)
    merged = task_arithmetic_merge(MergeSpec(base, tuned, 0.25), tmp_path / "out")
    assert merged.shard_files == base.shard_files
    assert set(merged.manifest) == set(base.manifest)
    for name in base.manifest:
        assert merged.manifest[name].shape == base.manifest[name].shape
        assert merged.manifest[name].dtype == base.manifest[name].dtype
        assert merged.manifest[name].shard == base.manifest[name].shard
    index = json.loads((tmp_path / "out" / "model.safetensors.index.json").read_text())
    assert set(index["weight_map"]) == set(base.manifest)


def test_single_file_checkpoint_stays_single(tmp_path):
    base, tuned = open_pair(
        tmp_path,
        {"w": np.zeros(4, dtype=np.float32)},
        {"w": np.ones(4, dtype=np.float32)},
        sharded=False,
    )
    task_arithmetic_merge(MergeSpec(base, tuned, 0.5), tmp_path / "out")
    assert (tmp_path / "out" / "model.safetensors").is_file()
    assert not (tmp_path / "out" / "model.safetensors.index.json").exists()


def test_alpha_outside_unit_interval_warns_but_merges(tmp_path, caplog):
    base, tuned = open_pair(
        tmp_path,
        {"w": np.array([1.0], dtype=np.float32)},
        {"w": np.array([2.0], dtype=np.float32)},
        sharded=False,
    )
    import logging

    with caplog.at_level(logging.WARNING, logger="doctrace.merge"):
        merged = task_arithmetic_merge(MergeSpec(base, tuned, 1.5), tmp_path / "out")
    assert "outside [0, 1]" in caplog.text
    values = np.frombuffer(merged.read_tensor_bytes("w"), dtype=np.float32)
    np.testing.assert_array_equal(values, np.array([2.5], dtype=np.float32))


def test_alpha_must_be_finite(tmp_path):
    base, tuned = open_pair(
        tmp_path,
        {"w": np.zeros(1, dtype=np.float32)},
        {"w": np.ones(1, dtype=np.float32)},
        sharded=False,
    )
    with pytest.raises(ValueError):
        MergeSpec(base, tuned, float("nan"))


# --- merge plans ---


def test_two_step_plan_folds_left_to_right(tmp_path):
    base, cpt = open_pair(
        tmp_path / "p1",
        {"w": np.array([0.0], dtype=np.float32)},
        {"w": np.array([4.0], dtype=np.float32)},
        sharded=False,
    )
    _, sft = open_pair(
        tmp_path / "p2",
        {"w": np.array([0.0], dtype=np.float32)},
        {"w": np.array([8.0], dtype=np.float32)},
        sharded=False,
    )
    plan = MergePlan(steps=((cpt, 0.25), (sft, 0.25)))
    merged = apply_merge_plan(base, plan, tmp_path / "out")
    values = np.frombuffer(merged.read_tensor_bytes("w"), dtype=np.float32)
    # step1: 0 + .25*(4-0) = 1; step2: 1 + .25*(8-1) = 2.75
    np.testing.assert_array_equal(values, np.array([2.75], dtype=np.float32))


def test_single_step_plan_equals_direct_merge(tmp_path):
    rng = np.random.default_rng(13)
    base_tensors = random_tensors(rng, ["a", "b"], dtype=np.float32)
    tuned_tensors = random_tensors(rng, ["a", "b"], dtype=np.float32)
    base, tuned = open_pair(tmp_path, base_tensors, tuned_tensors)
    via_plan = apply_merge_plan(base, MergePlan(steps=((tuned, 0.3),)), tmp_path / "o1")
    direct = task_arithmetic_merge(MergeSpec(base, tuned, 0.3), tmp_path / "o2")
    for name in base.manifest:
        assert via_plan.read_tensor_bytes(name) == direct.read_tensor_bytes(name)


def test_empty_plan_rejected():
    with pytest.raises(ValueError):
        MergePlan(steps=())


def test_plan_errors_tagged_with_step(tmp_path):
    base, good = open_pair(
        tmp_path / "ok",
        {"w": np.zeros(2, dtype=np.float32)},
        {"w": np.ones(2, dtype=np.float32)},
        sharded=False,
    )
    _, bad = open_pair(
        tmp_path / "bad",
        {"w": np.zeros(2, dtype=np.float32)},
        {"other": np.ones(2, dtype=np.float32)},
        sharded=False,
    )
    plan = MergePlan(steps=((good, 0.5), (bad, 0.5)))
    with pytest.raises(IncompatibleStores, match="step 2"):
        apply_merge_plan(base, plan, tmp_path / "out")


def test_open_rejects_garbage(tmp_path):
    with pytest.raises(IoFailure):
        TensorStore.open(tmp_path / "missing")
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(IoFailure):
        TensorStore.open(empty)
    bad = tmp_path / "bad.safetensors"
    bad.write_bytes(b"\x00")
    with pytest.raises(IoFailure):
        TensorStore.open(bad)
