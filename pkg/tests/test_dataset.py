import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mycoclip import dataset as ds
from mycoclip.captions import CaptionConstraints, generate_set, PromptTemplate
from mycoclip.dataset import (
    MANIFEST_NAME,
    SPLITS,
    DatasetConfig,
    assign_splits,
    attach_captions,
    build_dataset,
    epoch_batches,
    load_dataset,
    sample_batch,
    split_sizes,
)
from mycoclip.errors import ConfigError, IntegrityError, SizeError
from mycoclip.morphology import StageClass
from mycoclip.raster import stage_for_temperature
from mycoclip.rng import make_rng

SMALL_CAPTIONS = CaptionConstraints(total=20, batch_size=10)


def test_split_sizes_full_scale():
    per_class = split_sizes(2000, (0.8, 0.1, 0.1))
    assert per_class == [1600, 200, 200]
    assert [3 * n for n in per_class] == [4800, 600, 600]


def test_split_sizes_thirty_images():
    assert split_sizes(10, (0.8, 0.1, 0.1)) == [8, 1, 1]


@settings(max_examples=200, deadline=None)
@given(count=st.integers(1, 5000), a=st.integers(1, 100), b=st.integers(1, 100), c=st.integers(1, 100))
def test_largest_remainder_stays_within_one(count, a, b, c):
    total = a + b + c
    fr = (a / total, b / total, c / total)
    sizes = split_sizes(count, fr)
    assert sum(sizes) == count
    for n, f in zip(sizes, fr):
        assert abs(n - count * f) < 1.0 + 1e-9


@settings(max_examples=50, deadline=None)
@given(count=st.integers(1, 400), seed=st.integers(0, 2**32))
def test_assign_splits_disjoint_and_exhaustive(count, seed):
    labels = assign_splits(count, (0.8, 0.1, 0.1), seed)
    assert len(labels) == count
    assert Counter(labels) == Counter({s: n for s, n in zip(SPLITS, split_sizes(count, (0.8, 0.1, 0.1))) if n})
    assert assign_splits(count, (0.8, 0.1, 0.1), seed) == labels


def test_stratified_splits_on_disk(small_view):
    counts = small_view.manifest.class_split_counts()
    for stage in StageClass:
        assert [counts[(stage.label, s)] for s in SPLITS] == [8, 1, 1]
    paths = [r.path for r in small_view.records]
    assert len(set(paths)) == 30
    for r in small_view.records:
        assert r.path == f"{r.split}/{r.stage.label}/{r.index:05}.png"


def test_records_carry_stage_consistent_time(small_view):
    for r in small_view.records:
        assert stage_for_temperature(r.temperature_K) == r.stage
        assert math.isclose(r.temperature_K, 300 + r.time_s, abs_tol=1e-5)


def test_every_image_has_own_class_captions(small_view):
    for r in small_view.records:
        texts = small_view.caption_texts(r.stage)
        assert r.n_captions == len(texts) >= 1
        assert all(r.stage.label in t.lower() for t in texts)


def test_rebuild_is_byte_identical(small_dataset, tmp_path):
    cfg = DatasetConfig(count_per_class=10, master_seed=1, captions=SMALL_CAPTIONS)
    m = build_dataset(cfg, out_dir=tmp_path)
    assert m.checksum == ds.sha256_file(small_dataset / MANIFEST_NAME)
    other = build_dataset(DatasetConfig(count_per_class=10, master_seed=2, captions=SMALL_CAPTIONS),
                          out_dir=tmp_path / "other")
    assert other.checksum != m.checksum


def test_parallel_build_matches_serial(small_dataset, tmp_path):
    cfg = DatasetConfig(count_per_class=10, master_seed=1, captions=SMALL_CAPTIONS, workers=2)
    assert build_dataset(cfg, out_dir=tmp_path).checksum == ds.sha256_file(small_dataset / MANIFEST_NAME)


def test_manifest_line_kinds(small_dataset):
    rows = [json.loads(l) for l in (small_dataset / MANIFEST_NAME).read_text().splitlines()]
    assert [r["kind"] for r in rows[:4]] == ["config", "captions", "captions", "captions"]
    assert sum(r["kind"] == "image" for r in rows) == 30
    img = next(r for r in rows if r["kind"] == "image")
    assert img["caption_ids"] == f"{img['class']}:0-19"


def test_load_filters_split(small_view):
    assert len(small_view.split("val")) == 3
    assert len(small_view.split("train")) == 24
    with pytest.raises(ConfigError):
        small_view.split("holdout")


def test_load_accepts_directory_or_file(small_dataset):
    assert len(load_dataset(small_dataset)) == len(load_dataset(small_dataset / MANIFEST_NAME)) == 30


def test_corrupted_image_is_detected(tmp_path):
    cfg = DatasetConfig(count_per_class=10, master_seed=3, captions=SMALL_CAPTIONS)
    m = build_dataset(cfg, out_dir=tmp_path)
    victim = tmp_path / m.records[7].path
    data = bytearray(victim.read_bytes())
    data[len(data) // 2] ^= 0x01
    victim.write_bytes(bytes(data))
    with pytest.raises(IntegrityError) as err:
        load_dataset(tmp_path)
    assert str(victim) in str(err.value)
    assert len(load_dataset(tmp_path, verify=False)) == 30


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)


@pytest.mark.parametrize("fractions", [(0.8, 0.1, 0.05), (0.8, 0.2, 0.0), (0.5, 0.5), (1.2, -0.1, -0.1)])
def test_invalid_fractions(fractions, tmp_path):
    with pytest.raises(ConfigError):
        build_dataset(DatasetConfig(count_per_class=10, split_fractions=fractions), out_dir=tmp_path)


def test_too_few_images_for_splits(tmp_path):
    with pytest.raises(ConfigError):
        build_dataset(DatasetConfig(count_per_class=2, captions=SMALL_CAPTIONS), out_dir=tmp_path)


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    with pytest.raises(OSError):
        build_dataset(DatasetConfig(count_per_class=10, captions=SMALL_CAPTIONS), out_dir=blocker / "data")


def test_failed_build_cleans_up(tmp_path, monkeypatch):
    real = ds._render_one
    calls = []

    def flaky(job):
        calls.append(1)
        if len(calls) > 12:
            raise OSError(28, "No space left on device")
        return real(job)

    monkeypatch.setattr(ds, "_render_one", flaky)
    with pytest.raises(OSError):
        build_dataset(DatasetConfig(count_per_class=10, captions=SMALL_CAPTIONS), out_dir=tmp_path)
    assert not (tmp_path / MANIFEST_NAME).exists()
    assert [p for p in tmp_path.rglob("*") if p.is_file()] == []


def test_sample_batch_full_split_is_permutation(small_view):
    val = small_view.split("val")
    batch = sample_batch(small_view, "val", len(val), make_rng(0))
    got = sorted(int(s[2]) for s in batch)
    assert got == sorted(int(r.stage) for r in val)
    for pixels, caption, stage in batch:
        assert pixels.shape == (64, 64, 3)
        assert caption in small_view.caption_texts(stage)


def test_sample_batch_deterministic(small_view):
    a = sample_batch(small_view, "train", 8, make_rng(11))
    b = sample_batch(small_view, "train", 8, make_rng(11))
    assert [(s[1], s[2]) for s in a] == [(s[1], s[2]) for s in b]
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a, b))


def test_sample_batch_size_error(small_view):
    with pytest.raises(SizeError):
        sample_batch(small_view, "val", 4, make_rng(0))
    with pytest.raises(SizeError):
        list(epoch_batches(small_view, "val", 4, make_rng(0)))


def test_sample_batch_class_histogram(small_view):
    # 100 batches of 12 from a balanced 24-record split; binomial 3-sigma bound per class
    rng = make_rng(5)
    counts = Counter()
    for _ in range(100):
        counts.update(int(s[2]) for s in sample_batch(small_view, "train", 12, rng))
    n = 1200
    sigma = math.sqrt(n * (1 / 3) * (2 / 3))
    for stage in StageClass:
        assert abs(counts[stage] - n / 3) <= 3 * sigma


def test_epoch_batches_cover_split_once(small_view):
    batches = list(epoch_batches(small_view, "train", 10, make_rng(2)))
    assert [len(b) for b in batches] == [10, 10, 4]
    assert Counter(int(s[2]) for b in batches for s in b) == Counter({0: 8, 1: 8, 2: 8})
    assert [len(b) for b in epoch_batches(small_view, "train", 23, make_rng(2))] == [23]


def test_attach_captions(tmp_path):
    cfg = DatasetConfig(count_per_class=10, master_seed=4, captions=SMALL_CAPTIONS)
    build_dataset(cfg, out_dir=tmp_path)
    new = {s: generate_set(s, PromptTemplate(), CaptionConstraints(total=5, batch_size=5), 99) for s in StageClass}
    attach_captions(tmp_path, new)
    view = load_dataset(tmp_path)
    for s in StageClass:
        assert view.caption_texts(s) == new[s].captions
    assert all(r.n_captions == 5 for r in view.records)
