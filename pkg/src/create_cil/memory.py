"""Exemplar memory: herding/random selection under a storage budget."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datasets import FixedTotal, LabeledDataset, PerClass
from .model import FeatureExtractor, extract
from .numerics import Tensor, no_grad

SELECTIONS = ("herding", "random")


@dataclass
class ClassExemplars:
    samples: np.ndarray
    indices: np.ndarray  # rows of the source training set

    def __len__(self) -> int:
        return len(self.indices)

    def head(self, q: int) -> "ClassExemplars":
        return ClassExemplars(self.samples[:q], self.indices[:q])


@dataclass
class ExemplarMemory:
    policy: FixedTotal | PerClass
    selection: str = "herding"
    seed: int = 0
    per_class: dict[int, ClassExemplars] = field(default_factory=dict)

    def __post_init__(self):
        if self.selection not in SELECTIONS:
            raise ValueError(f"selection must be one of {SELECTIONS}, got {self.selection!r}")

    def __len__(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    @property
    def classes(self) -> list[int]:
        return sorted(self.per_class)

    def quota(self, num_classes: int) -> int:
        if isinstance(self.policy, PerClass):
            return self.policy.count
        return self.policy.budget // max(num_classes, 1)

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked samples and labels, classes in ascending order."""
        if not self.per_class:
            return np.empty((0, 0)), np.empty(0, dtype=np.int64)
        xs, ys = [], []
        for c in self.classes:
            ex = self.per_class[c]
            xs.append(ex.samples)
            ys.append(np.full(len(ex), c, dtype=np.int64))
        return np.concatenate(xs), np.concatenate(ys)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for c in self.classes:
            out[f"memory/{c}/samples"] = self.per_class[c].samples
            out[f"memory/{c}/indices"] = self.per_class[c].indices.astype(np.float64)
        return out

    @classmethod
    def from_state_tensors(cls, tensors: dict[str, np.ndarray], policy, selection="herding", seed=0) -> "ExemplarMemory":
        mem = cls(policy, selection, seed)
        for key in tensors:
            parts = key.split("/")
            if parts[0] == "memory" and parts[2] == "samples":
                c = int(parts[1])
                mem.per_class[c] = ClassExemplars(
                    tensors[key], tensors[f"memory/{c}/indices"].astype(np.int64)
                )
        return mem


def herding_order(features: np.ndarray, m: int) -> np.ndarray:
    """Greedy picks whose running mean tracks the feature mean.

    Returns row positions in selection order; ties go to the lower row.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    m = min(m, n)
    mu = features.mean(axis=0)
    running = np.zeros(features.shape[1])
    taken = np.zeros(n, dtype=bool)
    picks = []
    for k in range(1, m + 1):
        dist = np.linalg.norm(mu - (running + features) / k, axis=1)
        dist[taken] = np.inf
        i = int(np.argmin(dist))
        picks.append(i)
        taken[i] = True
        running += features[i]
    return np.asarray(picks, dtype=np.intp)


def _select(memory: ExemplarMemory, class_id: int, samples: np.ndarray, indices: np.ndarray, q: int,
            extractor: FeatureExtractor | None) -> ClassExemplars:
    order = np.argsort(indices, kind="stable")
    samples, indices = samples[order], indices[order]
    if memory.selection == "random":
        rng = np.random.default_rng([memory.seed, class_id])
        pick = rng.permutation(len(indices))[: min(q, len(indices))]
    else:
        if extractor is None:
            raise ValueError("herding selection needs a feature extractor")
        with no_grad():
            feats = extract(extractor, Tensor(samples)).data
        pick = herding_order(feats, q)
    return ClassExemplars(samples[pick].copy(), indices[pick].copy())


def update_memory(
    memory: ExemplarMemory,
    new_classes: Sequence[tuple[int, np.ndarray, np.ndarray]],
    extractor: FeatureExtractor | None,
) -> ExemplarMemory:
    """Add exemplars for ``(class_id, samples, source_indices)`` entries.

    Under a fixed total budget the per-class quota is recomputed and
    existing classes keep the prefix of their selection order.
    """
    total_classes = len(set(memory.per_class) | {c for c, _, _ in new_classes})
    q = memory.quota(total_classes)
    if isinstance(memory.policy, FixedTotal):
        for c in memory.classes:
            memory.per_class[c] = memory.per_class[c].head(q)
    for class_id, samples, indices in new_classes:
        memory.per_class[int(class_id)] = _select(
            memory, int(class_id), np.asarray(samples), np.asarray(indices, dtype=np.int64), q, extractor
        )
    return memory


def balanced_subset(
    memory: ExemplarMemory, current: LabeledDataset, per_class: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Up to ``per_class`` samples for every seen class.

    Old classes draw from memory, classes of the current task from ``current``.
    """
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    rng = np.random.default_rng([seed, 0xBA1])
    pools: dict[int, np.ndarray] = {c: memory.per_class[c].samples for c in memory.classes}
    for c in np.unique(current.labels):
        pools[int(c)] = current.samples[current.labels == c]
    xs, ys = [], []
    for c in sorted(pools):
        pool = pools[c]
        k = min(per_class, len(pool))
        rows = np.sort(rng.choice(len(pool), size=k, replace=False))
        xs.append(pool[rows])
        ys.append(np.full(k, c, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)
