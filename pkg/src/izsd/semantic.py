"""Semantic embedding table, class registry, projection and the cosine-softmax
zero-shot classifier.

Row 0 of every table is the background class, derived as the mean of the
class rows; class ids ``1..C`` index the remaining rows.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

BACKGROUND = 0


class DegenerateEmbeddingError(ValueError):
    pass


def l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Normalize ``x`` to unit ℓ2 norm along ``axis``; zero vectors raise."""
    x = np.asarray(x, dtype=float)
    norms = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateEmbeddingError("cannot normalize a zero vector")
    return x / norms


@dataclass(frozen=True)
class SemanticTable:
    embeddings: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        emb = np.array(self.embeddings, dtype=float)
        if emb.ndim != 2 or emb.shape[0] != len(self.class_names) + 1:
            raise ValueError(
                f"embeddings must have C+1 rows for {len(self.class_names)} classes, got {emb.shape}"
            )
        emb.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def normalize(self) -> "SemanticTable":
        return SemanticTable(l2_normalize(self.embeddings), self.class_names)

    def rows(self, ids: Sequence[int]) -> np.ndarray:
        return self.embeddings[np.asarray(list(ids), dtype=int)]


def build_table(class_embeddings, names: Sequence[str]) -> SemanticTable:
    """Prepend the background row (column mean of the class rows) and ℓ2-normalize."""
    emb = np.asarray(class_embeddings, dtype=float)
    if emb.ndim != 2:
        raise ValueError("class embeddings must be a C x d matrix")
    C, d = emb.shape
    if C < 2 or d < 1:
        raise ValueError(f"need at least 2 classes and 1 dimension, got {emb.shape}")
    if len(names) != C:
        raise ValueError(f"{len(names)} names for {C} embedding rows")
    if not np.all(np.isfinite(emb)):
        raise ValueError("embeddings must be finite")
    full = np.vstack([emb.mean(axis=0, keepdims=True), emb])
    if np.any(np.linalg.norm(full, axis=1) == 0):
        raise DegenerateEmbeddingError("an embedding row (or the background mean) is all zeros")
    return SemanticTable(l2_normalize(full), tuple(names))


def load_embeddings_csv(path) -> tuple[list[str], np.ndarray]:
    """Read ``name,e_1,...,e_d`` rows (header optional)."""
    names, rows = [], []
    with open(path, newline="") as fh:
        for i, rec in enumerate(csv.reader(fh)):
            if not rec:
                continue
            try:
                vals = [float(v) for v in rec[1:]]
            except ValueError:
                if i == 0:
                    continue  # header
                raise
            names.append(rec[0])
            rows.append(vals)
    if not rows:
        raise ValueError(f"no embeddings in {path}")
    return names, np.asarray(rows, dtype=float)


def write_embeddings_csv(dest, names: Sequence[str], embeddings) -> None:
    """Write a header and one ``name,e_1,...`` row per class to a path or text stream."""
    emb = np.asarray(embeddings, dtype=float)
    if hasattr(dest, "write"):
        _write_embeddings(dest, names, emb)
        return
    with open(dest, "w", newline="") as fh:
        _write_embeddings(fh, names, emb)


def _write_embeddings(fh, names, emb) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["name"] + [f"e_{k + 1}" for k in range(emb.shape[1])])
    for name, row in zip(names, emb):
        w.writerow([name] + [repr(float(v)) for v in row])


@dataclass(frozen=True)
class Registry:
    """Old, new and unseen class ids for one incremental step."""

    old_classes: frozenset
    new_classes: frozenset
    unseen_classes: frozenset

    def __post_init__(self):
        for name in ("old_classes", "new_classes", "unseen_classes"):
            object.__setattr__(self, name, frozenset(int(c) for c in getattr(self, name)))
        o, n, u = self.old_classes, self.new_classes, self.unseen_classes
        if (o & n) or (o & u) or (n & u):
            raise ValueError("old, new and unseen class sets must be pairwise disjoint")
        if BACKGROUND in (o | n | u):
            raise ValueError("class id 0 is reserved for background")

    @property
    def seen_classes(self) -> frozenset:
        return self.old_classes | self.new_classes

    @property
    def all_classes(self) -> frozenset:
        return self.seen_classes | self.unseen_classes

    @property
    def n_old(self) -> int:
        return len(self.old_classes)

    @property
    def n_new(self) -> int:
        return len(self.new_classes)

    @property
    def n_unseen(self) -> int:
        return len(self.unseen_classes)

    @property
    def n_seen(self) -> int:
        return self.n_old + self.n_new

    @property
    def n_all(self) -> int:
        return self.n_seen + self.n_unseen


def project(f, W) -> np.ndarray:
    """Map visual features into semantic space: ``s = W f`` (rows of ``f`` for 2-D input)."""
    f = np.asarray(f, dtype=float)
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or f.shape[-1] != W.shape[1]:
        raise ValueError(f"projection of shape {W.shape} cannot act on features of shape {f.shape}")
    return f @ W.T


def softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def zsc_probs(s, table: SemanticTable, class_subset: Iterable[int]) -> np.ndarray:
    """Softmax over cosine similarities between ``s`` and the selected table rows.

    Output order follows ``class_subset``.
    """
    s = np.asarray(s, dtype=float)
    if not np.any(s):
        raise DegenerateEmbeddingError("projected vector is zero")
    ids = list(class_subset)
    if not ids:
        raise ValueError("class subset is empty")
    cos = table.rows(ids) @ (s / np.linalg.norm(s))
    return softmax(cos)


def class_means(projected: Mapping[int, Sequence]) -> dict[int, np.ndarray]:
    """Unit mean direction of each class's ℓ2-normalized projected vectors."""
    out = {}
    for cid, vecs in projected.items():
        v = np.asarray(vecs, dtype=float)
        if v.size == 0:
            raise ValueError(f"class {cid} has no projected vectors")
        v = np.atleast_2d(v)
        mean = l2_normalize(v).mean(axis=0)
        if np.linalg.norm(mean) < 1e-12:
            raise DegenerateEmbeddingError(f"mean direction of class {cid} vanishes")
        out[cid] = mean / np.linalg.norm(mean)
    return out
