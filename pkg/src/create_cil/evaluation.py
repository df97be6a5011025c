"""Accuracy metrics, confusion diagnostics and embedding export."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .datasets import LabeledDataset, write_table
from .losses import confusion_scores
from .memory import ExemplarMemory
from .model import AutoEncoderBank, FeatureExtractor, extract
from .numerics import Tensor, no_grad

THREADS_ENV = "CREATE_NUM_THREADS"
EVAL_BATCH = 512


class EvaluationError(ValueError):
    pass


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _batched(fn, x: np.ndarray) -> np.ndarray:
    """Apply ``fn`` over row blocks and stack; block order is preserved."""
    chunks = [x[i : i + EVAL_BATCH] for i in range(0, len(x), EVAL_BATCH)]
    workers = min(_threads(), len(chunks))
    if workers <= 1:
        parts = [fn(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(fn, chunks))
    return np.concatenate(parts)


def features(extractor: FeatureExtractor, x: np.ndarray) -> np.ndarray:
    def run(block):
        with no_grad():
            return extract(extractor, Tensor(block)).data

    return _batched(run, np.asarray(x, dtype=np.float64))


class AEClassifier:
    """Predicts the class whose auto-encoder reconstructs the feature best."""

    kind = "ae"

    def __init__(self, extractor: FeatureExtractor, bank: AutoEncoderBank, alpha: float = 0.1):
        self.extractor = extractor
        self.bank = bank
        self.alpha = alpha

    @property
    def num_classes(self) -> int:
        return self.bank.num_classes

    def scores(self, x: np.ndarray) -> np.ndarray:
        """Reconstruction errors, shape (n, C); smaller is better."""

        def run(block):
            with no_grad():
                h = extract(self.extractor, Tensor(block))
                return self.bank.forward(h)[0].data

        return _batched(run, np.asarray(x, dtype=np.float64))

    def latents(self, x: np.ndarray, class_id: int) -> np.ndarray:
        if not 0 <= class_id < self.bank.num_classes:
            raise EvaluationError(f"class id {class_id} outside 0..{self.bank.num_classes - 1}")
        ae = self.bank.autoencoders[class_id]

        def run(block):
            with no_grad():
                return ae.encode(extract(self.extractor, Tensor(block))).data

        return _batched(run, np.asarray(x, dtype=np.float64))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmin(self.scores(x), axis=1)


class NMEClassifier:
    """Nearest mean of exemplars, prototypes taken on the current extractor."""

    kind = "nme"

    def __init__(self, extractor: FeatureExtractor, memory: ExemplarMemory, num_classes: int | None = None):
        self.extractor = extractor
        n = num_classes if num_classes is not None else (max(memory.classes) + 1 if memory.classes else 0)
        if n == 0:
            raise EvaluationError("nme: memory is empty")
        protos = []
        for c in range(n):
            ex = memory.per_class.get(c)
            if ex is None or len(ex) == 0:
                raise EvaluationError(f"nme: class {c} has no exemplars")
            protos.append(features(extractor, ex.samples).mean(axis=0))
        self.prototypes = np.stack(protos)

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    def scores(self, x: np.ndarray) -> np.ndarray:
        """Euclidean distances to the prototypes, shape (n, C)."""
        h = features(self.extractor, x)
        diff = h[:, None, :] - self.prototypes[None, :, :]
        return np.sqrt(np.sum(diff * diff, axis=2))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmin(self.scores(x), axis=1)


def phase_accuracy(model, test: LabeledDataset) -> float:
    if len(test) == 0:
        raise EvaluationError("phase_accuracy: empty test set")
    return float(np.mean(model.predict(test.samples) == test.labels) * 100.0)


class OldNew(NamedTuple):
    old: float | None
    new: float | None
    total: float


def old_new_accuracy(model, test: LabeledDataset, boundary: int) -> OldNew:
    """Accuracy on labels < boundary (old) and >= boundary (new)."""
    if len(test) == 0:
        raise EvaluationError("old_new_accuracy: empty test set")
    hit = model.predict(test.samples) == test.labels
    old = test.labels < boundary
    old_acc = float(hit[old].mean() * 100.0) if old.any() else None
    new_acc = float(hit[~old].mean() * 100.0) if (~old).any() else None
    return OldNew(old_acc, new_acc, float(hit.mean() * 100.0))


def nme_baseline(extractor: FeatureExtractor, memory: ExemplarMemory, test: LabeledDataset) -> float:
    return phase_accuracy(NMEClassifier(extractor, memory), test)


@dataclass
class ConfusionSummary:
    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean: float
    n: int


def summarize(values: np.ndarray) -> ConfusionSummary:
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return ConfusionSummary(float(v.min()), float(q1), float(med), float(q3), float(v.max()), float(v.mean()), int(v.size))


def confusion_stats(model, test: LabeledDataset, alpha: float = 0.1) -> ConfusionSummary:
    """Distribution of per-sample confusion scores.

    For the prototype baseline the distance row stands in for the error row;
    the score is a ratio of differences, so ``alpha`` and any positive
    rescaling of the rows leave it unchanged.
    """
    if model.num_classes < 2:
        raise EvaluationError("confusion_stats needs at least 2 seen classes")
    return summarize(confusion_scores(model.scores(test.samples)))


@dataclass
class MisclassifiedRecord:
    index: int
    true_class: int
    predicted_class: int
    true_error: float
    predicted_error: float
    margin: float


def misclassified_error_report(model, test: LabeledDataset, alpha: float = 0.1) -> list[MisclassifiedRecord]:
    eps = model.scores(test.samples)
    pred = np.argmin(eps, axis=1)
    out = []
    for i in np.flatnonzero(pred != test.labels):
        t, p = int(test.labels[i]), int(pred[i])
        out.append(
            MisclassifiedRecord(int(test.indices[i]), t, p, float(eps[i, t]), float(eps[i, p]), float(eps[i, t] - eps[i, p]))
        )
    return out


def non_target_error(model: AEClassifier, test: LabeledDataset) -> float:
    """Mean reconstruction error of samples on the auto-encoders of other classes."""
    eps = model.scores(test.samples)
    mask = np.ones_like(eps, dtype=bool)
    mask[np.arange(len(test)), test.labels] = False
    return float(eps[mask].mean())


def parse_space(space) -> tuple[str, int | None]:
    """``"feature"``, ``"latent:<class>"`` or ``("latent", class)``."""
    if isinstance(space, tuple):
        kind, cid = space
        return kind, int(cid)
    if space == "feature":
        return "feature", None
    if isinstance(space, str) and space.startswith("latent:"):
        try:
            return "latent", int(space.split(":", 1)[1])
        except ValueError:
            pass
    raise EvaluationError(f"unknown embedding space {space!r}; use 'feature' or 'latent:<class id>'")


def export_embeddings(model, dataset: LabeledDataset, target, space="feature") -> int:
    """Write (label, vector) rows in the textual table format; returns row count."""
    kind, cid = parse_space(space)
    if kind == "feature":
        rows = features(model.extractor, dataset.samples)
    else:
        if not isinstance(model, AEClassifier):
            raise EvaluationError("latent export needs an auto-encoder model")
        rows = model.latents(dataset.samples, cid)
    write_table(target, dataset.labels, rows, dataset.num_classes)
    return rows.shape[0]


# -- run record -----------------------------------------------------------------------

CSV_HEADER = "phase,classes_seen,accuracy,old_acc,new_acc,mean_confusion"


@dataclass
class PhaseResult:
    phase: int
    classes_seen: int
    accuracy: float
    old_acc: float | None
    new_acc: float | None
    confusion: ConfusionSummary | None
    param_counts: dict
    non_target_error: float | None = None
    wall_clock: float = 0.0


@dataclass
class RunRecord:
    phases: list[PhaseResult] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    ablation: str = "full"

    @property
    def phase_accuracies(self) -> list[float]:
        return [p.accuracy for p in self.phases]

    @property
    def avg_incremental(self) -> float:
        accs = self.phase_accuracies
        return float(sum(accs) / len(accs)) if accs else float("nan")

    @property
    def final_accuracy(self) -> float:
        return self.phases[-1].accuracy

    def to_dict(self) -> dict:
        return {
            "format": "create-run-record/1",
            "ablation": self.ablation,
            "phase_accuracies": self.phase_accuracies,
            "avg_incremental": self.avg_incremental,
            "phases": [asdict(p) for p in self.phases],
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def accuracy_csv(self) -> str:
        def fmt(v):
            return "" if v is None else f"{v:.2f}"

        lines = [CSV_HEADER]
        for p in self.phases:
            conf = p.confusion.mean if p.confusion is not None else None
            lines.append(
                f"{p.phase},{p.classes_seen},{fmt(p.accuracy)},{fmt(p.old_acc)},{fmt(p.new_acc)},"
                + ("" if conf is None else f"{conf:.4f}")
            )
        return "\n".join(lines) + "\n"


def read_accuracy_csv(text: str) -> list[dict]:
    lines = text.strip().splitlines()
    if lines[0] != CSV_HEADER:
        raise EvaluationError(f"unexpected accuracy table header {lines[0]!r}")
    keys = CSV_HEADER.split(",")
    return [dict(zip(keys, line.split(","))) for line in lines[1:]]
