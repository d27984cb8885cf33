"""Dataset assembly: images per class, caption tables, stratified splits.

On-disk layout, all paths relative to the manifest::

    {out}/manifest.jsonl
    {out}/captions/{class}.txt
    {out}/{split}/{class}/{index:05}.png

The manifest is JSON lines: one ``config`` record, one ``captions`` record
per class, then one ``image`` record per image sorted by (class, index).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .captions import CaptionConstraints, CaptionSet, PromptTemplate, generate_set
from .errors import ConfigError, IntegrityError, SizeError
from .morphology import StageClass, StageParams, default_stage_params, generate_stage
from .raster import TimelineSpec, encode_png, encode_ppm, read_image, render, sample_time, temperature_at
from .rng import derive_seed, make_rng

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.jsonl"

# stream tags mixed into derived seeds
_TIME_STREAM = 1
_SPLIT_STREAM = 0x5EED
_CAPTION_STREAM = 0xCA9


@dataclass
class DatasetConfig:
    count_per_class: int = 300
    canvas: int = 64
    master_seed: int = 0
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    stage_params: dict[StageClass, StageParams] = field(default_factory=default_stage_params)
    captions: CaptionConstraints = field(default_factory=CaptionConstraints)
    image_ext: str = "png"
    out_dir: str = "data"
    workers: int = 1

    def validate(self) -> None:
        fr = self.split_fractions
        if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be three positive numbers summing to 1, got {fr}")
        if self.count_per_class < 1:
            raise ConfigError("count_per_class must be positive")
        if min(split_sizes(self.count_per_class, fr)) < 1:
            raise ConfigError(f"{self.count_per_class} images per class leave an empty split")
        if self.image_ext not in ("png", "ppm"):
            raise ConfigError(f"unsupported image format {self.image_ext!r}")
        missing = [s.label for s in StageClass if s not in self.stage_params]
        if missing:
            raise ConfigError(f"no stage parameters for {', '.join(missing)}")

    def snapshot(self) -> dict:
        """Content-determining settings (output location and worker count excluded)."""
        return {
            "count_per_class": self.count_per_class,
            "canvas": self.canvas,
            "master_seed": self.master_seed,
            "split_fractions": list(self.split_fractions),
            "stage_params": {s.label: p.to_dict() for s, p in sorted(self.stage_params.items())},
            "captions": {k: getattr(self.captions, k) for k in self.captions.__dataclass_fields__},
            "image_ext": self.image_ext,
        }


def split_sizes(count: int, fractions) -> list[int]:
    """Largest-remainder apportionment of ``count`` records over the splits."""
    quotas = [count * f for f in fractions]
    sizes = [math.floor(round(q, 9)) for q in quotas]
    rema = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in rema[: count - sum(sizes)]:
        sizes[i] += 1
    return sizes


def assign_splits(count: int, fractions, seed: int) -> list[str]:
    """Seeded shuffle of one class's indices into train/val/test."""
    perm = make_rng(seed).permutation(count)
    labels = [""] * count
    pos = 0
    for name, size in zip(SPLITS, split_sizes(count, fractions)):
        for i in perm[pos:pos + size]:
            labels[int(i)] = name
        pos += size
    return labels


@dataclass(frozen=True)
class ImageRecord:
    path: str
    stage: StageClass
    split: str
    index: int
    seed: int
    time_s: float
    temperature_K: float
    sha256: str
    n_captions: int = 0

    def to_json(self) -> dict:
        return {
            "kind": "image",
            "path": self.path,
            "class": self.stage.label,
            "split": self.split,
            "index": self.index,
            "seed": self.seed,
            "time_s": round(self.time_s, 6),
            "temperature_K": round(self.temperature_K, 6),
            "caption_ids": f"{self.stage.label}:0-{self.n_captions - 1}",
            "sha256": self.sha256,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "ImageRecord":
        n = int(rec["caption_ids"].rsplit("-", 1)[1]) + 1
        return cls(
            rec["path"], StageClass.parse(rec["class"]), rec["split"], rec["index"], rec["seed"],
            rec["time_s"], rec["temperature_K"], rec["sha256"], n,
        )


@dataclass
class DatasetManifest:
    root: Path
    config: dict
    records: list[ImageRecord]
    captions: dict[StageClass, CaptionSet]
    caption_checksums: dict[StageClass, str]

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME

    @property
    def checksum(self) -> str:
        return sha256_file(self.path)

    def split_counts(self) -> dict[str, int]:
        counts = dict.fromkeys(SPLITS, 0)
        for r in self.records:
            counts[r.split] += 1
        return counts

    def class_split_counts(self) -> dict[tuple[str, str], int]:
        out: dict[tuple[str, str], int] = {}
        for r in self.records:
            key = (r.stage.label, r.split)
            out[key] = out.get(key, 0) + 1
        return out

    def lines(self) -> list[str]:
        rows = [{"kind": "config", "version": 1, "config": self.config}]
        for stage in StageClass:
            cs = self.captions[stage]
            rows.append({
                "kind": "captions",
                "class": stage.label,
                "path": caption_path(stage),
                "count": len(cs),
                "provider": cs.provider,
                "deduplicated": cs.deduplicated,
                "sha256": self.caption_checksums[stage],
            })
        rows.extend(r.to_json() for r in self.records)
        return [json.dumps(r, sort_keys=True) for r in rows]

    def write(self) -> None:
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text("\n".join(self.lines()) + "\n", encoding="utf-8")
        os.replace(tmp, self.path)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def caption_path(stage: StageClass) -> str:
    return f"captions/{stage.label}.txt"


def image_path(split: str, stage: StageClass, index: int, ext: str) -> str:
    return f"{split}/{stage.label}/{index:05}.{ext}"


def _render_one(job) -> tuple[bytes, float, float]:
    stage, index, seed, time_seed, params, canvas, ext = job
    graph = generate_stage(stage, params, seed, canvas)
    t = sample_time(stage, make_rng(time_seed))
    pixels = render(graph).pixels
    data = encode_ppm(pixels) if ext == "ppm" else encode_png(pixels)
    return data, t, temperature_at(t)


def make_caption_sets(
    config: DatasetConfig, template: PromptTemplate | None = None
) -> dict[StageClass, CaptionSet]:
    template = template or PromptTemplate()
    seed = derive_seed(config.master_seed, _CAPTION_STREAM)
    return {s: generate_set(s, template, config.captions, seed) for s in StageClass}


def build_dataset(
    config: DatasetConfig,
    caption_sets: Mapping[StageClass, CaptionSet] | None = None,
    out_dir=None,
) -> DatasetManifest:
    """Generate every image and caption file, then write the manifest last.

    Files created by a failed build are removed and no manifest is left
    behind.
    """
    config.validate()
    root = Path(out_dir if out_dir is not None else config.out_dir)
    if caption_sets is None:
        caption_sets = make_caption_sets(config)
    for stage in StageClass:
        if not caption_sets.get(stage) or not len(caption_sets[stage]):
            raise ConfigError(f"every class needs at least one caption; {stage.label} has none")

    jobs, meta = [], []
    for stage in StageClass:
        splits = assign_splits(config.count_per_class, config.split_fractions,
                               derive_seed(config.master_seed, _SPLIT_STREAM, stage))
        for index in range(config.count_per_class):
            seed = derive_seed(config.master_seed, stage, index)
            time_seed = derive_seed(config.master_seed, stage, index, _TIME_STREAM)
            jobs.append((stage, index, seed, time_seed, config.stage_params, config.canvas, config.image_ext))
            meta.append((stage, index, seed, splits[index]))

    created: list[Path] = []
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / MANIFEST_NAME).unlink(missing_ok=True)
        for split in SPLITS:
            for stage in StageClass:
                (root / split / stage.label).mkdir(parents=True, exist_ok=True)
        (root / "captions").mkdir(exist_ok=True)

        caption_sums = {}
        for stage in StageClass:
            p = root / caption_path(stage)
            caption_sets[stage].write(p)
            created.append(p)
            caption_sums[stage] = sha256_file(p)

        if config.workers > 1:
            with ProcessPoolExecutor(max_workers=config.workers) as pool:
                results = pool.map(_render_one, jobs, chunksize=32)
                records = _write_images(root, meta, results, config, caption_sets, created)
        else:
            records = _write_images(root, meta, map(_render_one, jobs), config, caption_sets, created)

        manifest = DatasetManifest(root, config.snapshot(), records, dict(caption_sets), caption_sums)
        manifest.write()
    except BaseException:
        for p in created:
            try:
                p.unlink()
            except OSError:
                pass
        raise
    log.info("built %d images under %s", len(records), root)
    return manifest


def _write_images(root, meta, results, config, caption_sets, created) -> list[ImageRecord]:
    records = []
    for (stage, index, seed, split), (data, t, temp) in zip(meta, results):
        rel = image_path(split, stage, index, config.image_ext)
        p = root / rel
        p.write_bytes(data)
        created.append(p)
        records.append(ImageRecord(
            rel, stage, split, index, seed, t, temp, hashlib.sha256(data).hexdigest(), len(caption_sets[stage]),
        ))
    return records


def _read_manifest(path: Path) -> DatasetManifest:
    root = path.parent
    config: dict = {}
    records, captions, sums = [], {}, {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec["kind"]
        if kind == "config":
            config = rec["config"]
        elif kind == "captions":
            stage = StageClass.parse(rec["class"])
            cs = CaptionSet.read(root / rec["path"], stage, rec["provider"])
            cs.deduplicated = rec["deduplicated"]
            captions[stage] = cs
            sums[stage] = rec["sha256"]
        elif kind == "image":
            records.append(ImageRecord.from_json(rec))
    return DatasetManifest(root, config, records, captions, sums)


class DatasetView:
    """In-memory index over a built dataset; pixels are read on first use."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.root = manifest.root
        self.records = manifest.records
        self.captions = manifest.captions
        self._cache: dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self.records)

    def split(self, name: str) -> list[ImageRecord]:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}; expected one of {', '.join(SPLITS)}")
        return [r for r in self.records if r.split == name]

    def image(self, record: ImageRecord) -> np.ndarray:
        pixels = self._cache.get(record.path)
        if pixels is None:
            pixels = self._cache[record.path] = read_image(self.root / record.path)
        return pixels

    def caption_texts(self, stage: StageClass) -> list[str]:
        return self.captions[stage].captions


def load_dataset(manifest_path, verify: bool = True) -> DatasetView:
    """Open a manifest (file or its directory) and verify every checksum."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    manifest = _read_manifest(path)
    if verify:
        for stage, expected in manifest.caption_checksums.items():
            p = manifest.root / caption_path(stage)
            actual = sha256_file(p)
            if actual != expected:
                raise IntegrityError(p, expected, actual)
        for r in manifest.records:
            p = manifest.root / r.path
            actual = sha256_file(p)
            if actual != r.sha256:
                raise IntegrityError(p, r.sha256, actual)
    return DatasetView(manifest)


def attach_captions(manifest_path, caption_sets: Mapping[StageClass, CaptionSet]) -> DatasetManifest:
    """Replace the caption tables of a built dataset and rewrite its manifest."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    manifest = _read_manifest(path)
    for stage, cs in caption_sets.items():
        if not len(cs):
            raise ConfigError(f"{stage.label} caption set is empty")
        p = manifest.root / caption_path(stage)
        cs.write(p)
        manifest.captions[stage] = cs
        manifest.caption_checksums[stage] = sha256_file(p)
    manifest.records = [
        ImageRecord(r.path, r.stage, r.split, r.index, r.seed, r.time_s, r.temperature_K, r.sha256,
                    len(manifest.captions[r.stage]))
        for r in manifest.records
    ]
    manifest.write()
    return manifest


Sample = tuple[np.ndarray, str, StageClass]


def _pair(view: DatasetView, records, idx, rng: np.random.Generator) -> list[Sample]:
    out = []
    for i in idx:
        r = records[int(i)]
        texts = view.caption_texts(r.stage)
        out.append((view.image(r), texts[int(rng.integers(len(texts)))], r.stage))
    return out


def sample_batch(view: DatasetView, split: str, batch_size: int, rng: np.random.Generator) -> list[Sample]:
    """Draw ``batch_size`` distinct records, each with a random caption of its class."""
    records = view.split(split)
    if not records:
        raise SizeError(f"split {split!r} is empty")
    if batch_size > len(records):
        raise SizeError(f"batch of {batch_size} exceeds the {len(records)} records in {split!r}")
    return _pair(view, records, rng.choice(len(records), size=batch_size, replace=False), rng)


def epoch_batches(
    view: DatasetView, split: str, batch_size: int, rng: np.random.Generator, min_size: int = 2
) -> Iterator[list[Sample]]:
    """One pass over a split in random order; a short final batch is kept if it has ``min_size`` items."""
    records = view.split(split)
    if batch_size > len(records):
        raise SizeError(f"batch of {batch_size} exceeds the {len(records)} records in {split!r}")
    perm = rng.permutation(len(records))
    for start in range(0, len(perm), batch_size):
        idx = perm[start:start + batch_size]
        if len(idx) >= min_size:
            yield _pair(view, records, idx, rng)
