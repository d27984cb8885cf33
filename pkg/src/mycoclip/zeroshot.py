"""Zero-shot stage classification by cosine similarity to class captions."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .captions import CaptionSet
from .dataset import DatasetView
from .embed import EncoderPair, encode_image, encode_images, encode_texts
from .errors import ConfigError, ContractError
from .morphology import StageClass

MODES = ("mean", "max")
NORM_TOLERANCE = 1e-3


def similarity(image_emb: np.ndarray, text_emb: np.ndarray) -> float:
    """Dot product of two unit vectors, i.e. their cosine similarity."""
    a = np.asarray(image_emb, float)
    b = np.asarray(text_emb, float)
    for v in (a, b):
        if abs(np.linalg.norm(v) - 1.0) > NORM_TOLERANCE:
            raise ContractError(f"expected a unit vector, got norm {np.linalg.norm(v):.6f}")
    return float(np.clip(a @ b, -1.0, 1.0))


@dataclass
class ClassPrototypeSet:
    mode: str
    # mean mode: (d,) unit vector per class; max mode: (k, d) caption embeddings
    vectors: dict[StageClass, np.ndarray]

    def scores(self, embeddings: np.ndarray) -> np.ndarray:
        """(B, n_classes) similarity of each embedding to each class, ordered by stage."""
        emb = np.atleast_2d(embeddings)
        missing = [s.label for s in StageClass if s not in self.vectors]
        if missing:
            raise ConfigError(f"no prototype for {', '.join(missing)}")
        cols = []
        for stage in StageClass:
            v = self.vectors[stage]
            cols.append(emb @ v if self.mode == "mean" else (emb @ v.T).max(axis=1))
        return np.stack(cols, axis=1)


def build_prototypes(
    pair: EncoderPair,
    caption_sets: Mapping[StageClass, CaptionSet | Sequence[str]],
    mode: str = "mean",
) -> ClassPrototypeSet:
    if mode not in MODES:
        raise ConfigError(f"prototype mode must be one of {MODES}, got {mode!r}")
    vectors = {}
    for stage in StageClass:
        texts = caption_sets.get(stage)
        texts = texts.captions if isinstance(texts, CaptionSet) else texts
        if not texts:
            raise ConfigError(f"no captions for class {stage.label}")
        emb = encode_texts(pair, list(texts))
        if mode == "mean":
            m = emb.mean(axis=0)
            vectors[stage] = m / np.linalg.norm(m)
        else:
            vectors[stage] = emb
    return ClassPrototypeSet(mode, vectors)


def predict(scores: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class ordinal on ties
    return np.argmax(scores, axis=-1)


def classify(image, pair: EncoderPair, prototypes: ClassPrototypeSet) -> tuple[StageClass, np.ndarray]:
    scores = prototypes.scores(encode_image(pair, image))[0]
    return StageClass(int(predict(scores))), scores


def softmax(x: np.ndarray, temperature: float) -> np.ndarray:
    z = x / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class SampleResult:
    path: str
    true: StageClass
    predicted: StageClass
    confidence: float
    scores: list[float]


@dataclass
class EvalReport:
    split: str
    samples: list[SampleResult]
    confusion: np.ndarray  # rows: true class, columns: predicted class
    extra: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def recall_at_1(self) -> float:
        return float(np.trace(self.confusion) / self.total) if self.total else 0.0

    @property
    def per_class_accuracy(self) -> dict[str, float]:
        out = {}
        for s in StageClass:
            n = self.confusion[s].sum()
            out[s.label] = float(self.confusion[s, s] / n) if n else 0.0
        return out

    @property
    def errors(self) -> int:
        return self.total - int(np.trace(self.confusion))

    def adjacent_error_fraction(self) -> float:
        """Share of misclassifications between neighbouring stages (1.0 when there are none)."""
        if not self.errors:
            return 1.0
        adjacent = sum(
            int(self.confusion[i, j]) for i in range(3) for j in range(3) if abs(i - j) == 1
        )
        return adjacent / self.errors

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "total": self.total,
            "recall_at_1": self.recall_at_1,
            "per_class_accuracy": self.per_class_accuracy,
            "confusion": {
                "labels": [s.label for s in StageClass],
                "matrix": self.confusion.tolist(),
            },
            "adjacent_error_fraction": self.adjacent_error_fraction(),
            **self.extra,
        }

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "report": out / f"report_{self.split}.json",
            "confusion": out / f"confusion_{self.split}.csv",
            "scores": out / f"scores_{self.split}.csv",
        }
        paths["report"].write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        with paths["confusion"].open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\predicted", *(s.label for s in StageClass)])
            for s in StageClass:
                w.writerow([s.label, *self.confusion[s].tolist()])
        with paths["scores"].open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "true", "predicted", "confidence", *(f"score_{s.label}" for s in StageClass)])
            for r in self.samples:
                w.writerow([r.path, r.true.label, r.predicted.label, f"{r.confidence:.6f}",
                            *(f"{x:.6f}" for x in r.scores)])
        return paths


def confusion_matrix(true: Sequence[int], predicted: Sequence[int], n: int = 3) -> np.ndarray:
    cm = np.zeros((n, n), dtype=np.int64)
    for t, p in zip(true, predicted):
        cm[int(t), int(p)] += 1
    return cm


def evaluate(
    view: DatasetView,
    split: str,
    pair: EncoderPair,
    prototypes: ClassPrototypeSet,
    out_dir=None,
    batch_size: int = 256,
) -> EvalReport:
    records = view.split(split)
    if not records:
        raise ConfigError(f"split {split!r} is empty")
    scores = []
    for i in range(0, len(records), batch_size):
        chunk = records[i:i + batch_size]
        emb = encode_images(pair, np.stack([view.image(r) for r in chunk]))
        scores.append(prototypes.scores(emb))
    scores = np.concatenate(scores)
    pred = predict(scores)
    probs = softmax(scores, pair.tau)
    samples = [
        SampleResult(r.path, r.stage, StageClass(int(p)), float(pr[p]), s.tolist())
        for r, p, pr, s in zip(records, pred, probs, scores)
    ]
    report = EvalReport(split, samples, confusion_matrix([r.stage for r in records], pred),
                        {"prototype_mode": prototypes.mode, "tau": pair.tau})
    if out_dir is not None:
        report.write(out_dir)
    return report
