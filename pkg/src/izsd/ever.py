"""Extreme value analyzer: per-class tail models over distances to the class
mean in semantic space, and the seen/unseen routing rule built on them."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .gpd import GpdParams, fit_gpd_mle, gpd_cdf, select_threshold
from .semantic import Registry, SemanticTable, class_means, l2_normalize, zsc_probs
from .trainer import ModelState, ic_probs

MIN_CLASS_VECTORS = 25
SEEN, UNSEEN = "seen", "unseen"


class EvtFitError(ValueError):
    pass


@dataclass(frozen=True)
class ClassEvtModel:
    class_id: int
    mean_vector: np.ndarray = field(repr=False)
    threshold_u: float
    params: GpdParams
    n_excess: int

    def __post_init__(self):
        mean = np.array(self.mean_vector, dtype=float)
        if abs(np.linalg.norm(mean) - 1.0) > 1e-9:
            raise ValueError("class mean must be a unit vector")
        if self.threshold_u < 0:
            raise ValueError("threshold must be nonnegative")
        mean.setflags(write=False)
        object.__setattr__(self, "mean_vector", mean)

    def extreme_prob(self, s_hat: np.ndarray) -> float:
        """GPD probability that a unit vector is extreme for this class; 0 below threshold."""
        excess = float(np.linalg.norm(s_hat - self.mean_vector)) - self.threshold_u
        if excess <= 0:
            return 0.0
        return gpd_cdf(excess, self.params)

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "mean": [float(v) for v in self.mean_vector],
            "u": self.threshold_u,
            "sigma": self.params.sigma,
            "xi": self.params.xi,
            "n_excess": self.n_excess,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ClassEvtModel":
        return cls(
            int(obj["class_id"]),
            np.array(obj["mean"], dtype=float),
            float(obj["u"]),
            GpdParams(float(obj["sigma"]), float(obj["xi"])),
            int(obj["n_excess"]),
        )


@dataclass(frozen=True)
class EvtBank:
    models: Mapping[int, ClassEvtModel] = field(default_factory=dict)
    delta: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "models", dict(sorted(self.models.items())))

    def with_models(self, new_models) -> "EvtBank":
        """A bank extended by ``new_models``; existing classes cannot be refit."""
        merged = dict(self.models)
        for m in new_models:
            if m.class_id in merged:
                raise ValueError(f"class {m.class_id} already has a frozen tail model")
            merged[m.class_id] = m
        return EvtBank(merged, self.delta)

    def dumps(self) -> str:
        return json.dumps(
            {"delta": self.delta, "models": [m.to_dict() for m in self.models.values()]},
            indent=1,
        )

    @classmethod
    def loads(cls, text: str) -> "EvtBank":
        obj = json.loads(text)
        models = [ClassEvtModel.from_dict(o) for o in obj["models"]]
        return cls({m.class_id: m for m in models}, float(obj["delta"]))


def distances_to_mean(vectors, mean: np.ndarray) -> np.ndarray:
    return np.linalg.norm(l2_normalize(np.atleast_2d(vectors)) - mean, axis=1)


def fit_class_model(class_id: int, projected_vectors, eta: float = 0.2) -> ClassEvtModel:
    """Fit the tail model of one class from its projected semantic vectors."""
    vecs = np.atleast_2d(np.asarray(projected_vectors, dtype=float))
    if vecs.shape[0] < MIN_CLASS_VECTORS:
        raise EvtFitError(f"class {class_id}: need {MIN_CLASS_VECTORS} vectors, got {vecs.shape[0]}")
    mean = class_means({class_id: vecs})[class_id]
    d = distances_to_mean(vecs, mean)
    sample = select_threshold(d, eta)
    params = fit_gpd_mle(sample)
    return ClassEvtModel(int(class_id), mean, sample.threshold_u, params, sample.n_excess)


def p_min(s, bank: EvtBank) -> float:
    """Smallest extreme-value probability of ``s`` over all class models."""
    if not bank.models:
        raise ValueError("empty tail-model bank")
    s = np.asarray(s, dtype=float)
    s_hat = s / np.linalg.norm(s)
    return min(m.extreme_prob(s_hat) for m in bank.models.values())


def _argmax_lowest_id(ids, probs) -> tuple[int, float]:
    pairs = sorted(zip(ids, probs))
    best = max(range(len(pairs)), key=lambda i: (pairs[i][1], -i))
    return pairs[best][0], float(pairs[best][1])


def classify(s, f, bank: EvtBank, state: ModelState, table: SemanticTable, registry: Registry):
    """Label one proposal; returns ``(class_id, route, score)``.

    Proposals with ``p_min < delta`` (or any proposal when no unseen classes
    exist) take the incremental classifier's choice among seen classes; the
    rest take the zero-shot choice among unseen classes. Ties go to the
    lowest class id.
    """
    if not registry.seen_classes:
        raise ValueError("registry has no seen classes")
    pm = p_min(s, bank)
    if pm < bank.delta or not registry.unseen_classes:
        probs = ic_probs(state, f)
        rows = state.row_of(sorted(registry.seen_classes))
        cid, score = _argmax_lowest_id(sorted(registry.seen_classes), probs[rows])
        return cid, SEEN, score
    unseen = sorted(registry.unseen_classes)
    cid, score = _argmax_lowest_id(unseen, zsc_probs(s, table, unseen))
    return cid, UNSEEN, score


def p_min_batch(S, bank: EvtBank) -> np.ndarray:
    """Row-wise :func:`p_min` for a matrix of projected vectors."""
    if not bank.models:
        raise ValueError("empty tail-model bank")
    S_hat = l2_normalize(np.atleast_2d(np.asarray(S, dtype=float)))
    out = np.full(S_hat.shape[0], np.inf)
    for m in bank.models.values():
        excess = np.linalg.norm(S_hat - m.mean_vector, axis=1) - m.threshold_u
        probs = np.zeros_like(excess)
        over = excess > 0
        if over.any():
            probs[over] = gpd_cdf(excess[over], m.params)
        out = np.minimum(out, probs)
    return out


def classify_batch(S, Fv, bank: EvtBank, state: ModelState, table: SemanticTable, registry: Registry):
    """Vectorized :func:`classify`; returns arrays (class_ids, is_seen_route, scores)."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    seen = sorted(registry.seen_classes)
    unseen = sorted(registry.unseen_classes)
    pm = p_min_batch(S, bank)
    route_seen = (pm < bank.delta) if unseen else np.ones(S.shape[0], dtype=bool)
    # argmax over sorted ids picks the lowest id on ties
    ic = ic_probs(state, Fv)[:, state.row_of(seen)]
    k_seen = np.argmax(ic, axis=1)
    labels = np.asarray(seen)[k_seen]
    scores = ic[np.arange(S.shape[0]), k_seen]
    if unseen and not route_seen.all():
        rows = ~route_seen
        S_hat = l2_normalize(S[rows])
        cos = S_hat @ table.rows(unseen).T
        cos = cos - cos.max(axis=1, keepdims=True)
        p = np.exp(cos)
        p /= p.sum(axis=1, keepdims=True)
        k = np.argmax(p, axis=1)
        labels = labels.copy()
        labels[rows] = np.asarray(unseen)[k]
        scores[rows] = p[np.arange(p.shape[0]), k]
    return labels, route_seen, scores
