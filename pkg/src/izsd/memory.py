"""Bounded exemplar memory of per-class representative features."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class ExemplarRecord:
    class_id: int
    feature: np.ndarray = field(repr=False)
    distance_to_mean: float
    source_id: str

    def __post_init__(self):
        f = np.array(self.feature, dtype=float)
        f.setflags(write=False)
        object.__setattr__(self, "feature", f)
        if self.distance_to_mean < 0:
            raise ValueError("distance_to_mean must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "source_id": self.source_id,
            "feature": [float(v) for v in self.feature],
            "distance": self.distance_to_mean,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ExemplarRecord":
        return cls(int(obj["class_id"]), np.array(obj["feature"], dtype=float), float(obj["distance"]), str(obj["source_id"]))


def _sort_key(rec: ExemplarRecord):
    return (rec.distance_to_mean, rec.source_id)


@dataclass(frozen=True)
class ExemplarMemory:
    capacity: int
    per_class: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("memory capacity must be positive")
        ordered = {int(c): tuple(sorted(recs, key=_sort_key)) for c, recs in sorted(self.per_class.items())}
        object.__setattr__(self, "per_class", ordered)
        if self.total > self.capacity:
            raise ValueError(f"{self.total} records exceed capacity {self.capacity}")

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    def records(self) -> list[ExemplarRecord]:
        return [r for recs in self.per_class.values() for r in recs]

    def with_class(self, class_id: int, records: Sequence[ExemplarRecord]) -> "ExemplarMemory":
        merged = dict(self.per_class)
        merged[int(class_id)] = tuple(records)
        return ExemplarMemory(self.capacity, merged)

    def features(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked features and labels of every stored record."""
        recs = self.records()
        if not recs:
            return np.empty((0, 0)), np.empty(0, dtype=int)
        return np.vstack([r.feature for r in recs]), np.array([r.class_id for r in recs], dtype=int)

    def dumps(self) -> str:
        return "".join(json.dumps(r.to_dict()) + "\n" for r in self.records())

    @classmethod
    def loads(cls, text: str, capacity: int) -> "ExemplarMemory":
        per_class: dict = {}
        for line in text.splitlines():
            if line.strip():
                rec = ExemplarRecord.from_dict(json.loads(line))
                per_class.setdefault(rec.class_id, []).append(rec)
        return cls(capacity, per_class)


def select_exemplars(
    class_id: int,
    candidates: Iterable[tuple[np.ndarray, str]],
    quota: int,
    embed: Callable[[np.ndarray], np.ndarray] | None = None,
) -> list[ExemplarRecord]:
    """The ``quota`` candidates nearest the class mean, ascending by distance.

    Distances are measured in ``embed(feature)`` space (identity by default);
    stored features are the raw candidate features. Ties go to the
    lexicographically smaller source id. A short class returns everything.
    """
    cands = list(candidates)
    if not cands:
        raise ValueError(f"class {class_id} has no exemplar candidates")
    if quota < 1:
        raise ValueError("quota must be at least 1")
    raw = np.vstack([np.asarray(f, dtype=float) for f, _ in cands])
    space = raw if embed is None else np.atleast_2d(embed(raw))
    mean = space.mean(axis=0)
    dist = np.linalg.norm(space - mean, axis=1)
    recs = [ExemplarRecord(int(class_id), raw[i], float(dist[i]), str(sid)) for i, (_, sid) in enumerate(cands)]
    recs.sort(key=_sort_key)
    return recs[:quota]


def rebalance(memory: ExemplarMemory, seen_class_ids: Iterable[int], capacity: int | None = None) -> ExemplarMemory:
    """Truncate every class to ``floor(K / |seen|)`` records, dropping the
    farthest from the mean first. ``capacity`` replaces K when given."""
    seen = set(int(c) for c in seen_class_ids)
    if not seen:
        raise ValueError("rebalancing needs at least one seen class")
    K = memory.capacity if capacity is None else int(capacity)
    quota = K // len(seen)
    kept = {c: recs[:quota] for c, recs in memory.per_class.items() if c in seen}
    return ExemplarMemory(K, kept)
