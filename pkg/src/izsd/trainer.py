"""Mini-batch gradient descent for the linear desk-scale model.

The model maps raw proposal features ``x`` (length r) to visual features
``f = B x`` (length v), projects them into semantic space ``s = W f``
(length d) and scores seen classes with the incremental classifier
``logits = ic_weights f``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .losses import (
    HyperParams,
    LossValueGrad,
    ProposalBatch,
    compose_bone,
    compose_il,
    cross_entropy,
    distillation,
    feature_distance,
    projection_distance,
)
from .semantic import BACKGROUND, Registry, SemanticTable, softmax

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "izsd-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    lr_decay: float = 0.2
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    replay_fraction: float = 0.5

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0 <= self.replay_fraction < 1:
            raise ValueError("replay_fraction must lie in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a zero-based epoch; decayed for the second half."""
        if epoch >= self.epochs // 2 and self.epochs > 1:
            return self.learning_rate * self.lr_decay
        return self.learning_rate


@dataclass(frozen=True)
class LabeledFeatures:
    """Raw proposal features with labels (0 = background)."""

    x: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.asarray(self.labels, dtype=int).ravel()
        if x.shape[0] != y.size:
            raise ValueError(f"{x.shape[0]} feature rows for {y.size} labels")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return int(self.labels.size)

    def subset(self, idx) -> "LabeledFeatures":
        return LabeledFeatures(self.x[idx], self.labels[idx])

    @staticmethod
    def concat(parts: Sequence["LabeledFeatures"]) -> "LabeledFeatures":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return LabeledFeatures(np.vstack([p.x for p in parts]), np.concatenate([p.labels for p in parts]))


@dataclass
class ModelState:
    B: np.ndarray
    W: np.ndarray
    ic_weights: np.ndarray
    class_ids: tuple = ()
    step_index: int = 0

    def __post_init__(self):
        self.B = np.array(self.B, dtype=float)
        self.W = np.array(self.W, dtype=float)
        self.ic_weights = np.array(self.ic_weights, dtype=float).reshape(-1, self.B.shape[0])
        self.class_ids = tuple(int(c) for c in self.class_ids)
        if self.W.shape[1] != self.B.shape[0]:
            raise ValueError(f"W {self.W.shape} incompatible with B {self.B.shape}")
        if self.ic_weights.shape[0] != len(self.class_ids):
            raise ValueError("one classifier row per seen class required")

    @property
    def v(self) -> int:
        return self.B.shape[0]

    @property
    def r(self) -> int:
        return self.B.shape[1]

    @property
    def d(self) -> int:
        return self.W.shape[0]

    def copy(self) -> "ModelState":
        return ModelState(self.B.copy(), self.W.copy(), self.ic_weights.copy(), self.class_ids, self.step_index)

    def features(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.B.T

    def project(self, x) -> np.ndarray:
        return self.features(x) @ self.W.T

    def logits(self, f) -> np.ndarray:
        return np.asarray(f, dtype=float) @ self.ic_weights.T

    def row_of(self, labels) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        try:
            return np.array([lookup[int(c)] for c in np.atleast_1d(labels)], dtype=int)
        except KeyError as exc:
            raise ValueError(f"class {exc.args[0]} has no classifier row") from None

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.B, self.W, self.ic_weights):
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        h.update(repr((self.class_ids, self.step_index)).encode())
        return h.hexdigest()

    def to_dict(self) -> dict:
        def pack(a):
            return {"shape": list(a.shape), "data": [float(v) for v in a.ravel(order="C")]}

        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "step_index": self.step_index,
            "class_ids": list(self.class_ids),
            "B": pack(self.B),
            "W": pack(self.W),
            "ic_weights": pack(self.ic_weights),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelState":
        if obj.get("format") != CHECKPOINT_FORMAT or obj.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a supported checkpoint")

        def unpack(p):
            shape = tuple(p["shape"])
            return np.array(p["data"], dtype=float).reshape(shape)

        return cls(unpack(obj["B"]), unpack(obj["W"]), unpack(obj["ic_weights"]), tuple(obj["class_ids"]), int(obj["step_index"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def loads(cls, text: str) -> "ModelState":
        return cls.from_dict(json.loads(text))


def init_state(r: int, v: int, d: int, seed: int = 0) -> ModelState:
    """Random Gaussian B and W, empty classifier."""
    rng = np.random.default_rng(seed)
    B = rng.normal(0.0, 1.0 / math.sqrt(r), size=(v, r))
    W = rng.normal(0.0, 1.0 / math.sqrt(v), size=(d, v))
    return ModelState(B, W, np.zeros((0, v)), (), 0)


def expand_classifier(state: ModelState, new_class_ids: Sequence[int]) -> ModelState:
    """Append zero rows for ``new_class_ids``; existing rows are copied unchanged."""
    new_ids = [int(c) for c in new_class_ids]
    if set(new_ids) & set(state.class_ids):
        raise ValueError("classes already present in the classifier")
    out = state.copy()
    if new_ids:
        out.ic_weights = np.vstack([state.ic_weights, np.zeros((len(new_ids), state.v))])
        out.class_ids = state.class_ids + tuple(new_ids)
    return out


def ic_probs(state: ModelState, f) -> np.ndarray:
    """Softmax of the incremental classifier over seen classes (``state.class_ids`` order)."""
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != state.v:
        raise ValueError(f"feature length {f.shape[-1]} != {state.v}")
    return softmax(state.logits(f))


def sgd_step(state: ModelState, grads: dict, lr: float) -> ModelState:
    """Plain gradient-descent update of B, W and the classifier."""
    out = state.copy()
    out.B = state.B - lr * grads["B"]
    out.W = state.W - lr * grads["W"]
    out.ic_weights = state.ic_weights - lr * grads["ic"]
    return out


def _classification_terms(state: ModelState, F: np.ndarray, labels: np.ndarray):
    """Cross-entropy on foreground proposals; returns (loss, grad_F, grad_ic)."""
    fg = labels != BACKGROUND
    grad_F = np.zeros_like(F)
    grad_ic = np.zeros_like(state.ic_weights)
    if not fg.any():
        return LossValueGrad.zero(), grad_F, grad_ic
    Ffg = F[fg]
    ce = cross_entropy(state.logits(Ffg), state.row_of(labels[fg]))
    G = ce["logits"]
    grad_F[fg] = G @ state.ic_weights
    grad_ic = G.T @ Ffg
    return ce, grad_F, grad_ic


def first_step_objective(state: ModelState, data: LabeledFeatures, table: SemanticTable, hp: HyperParams):
    """Semantic-head loss plus classifier cross-entropy, with parameter gradients."""
    X, y = data.x, data.labels
    F = state.features(X)
    bone = compose_bone(ProposalBatch(F, y), state.W, table, state.class_ids, hp)
    ce, gF_ce, g_ic = _classification_terms(state, F, y)
    gF = bone["features"] + gF_ce
    grads = {"B": gF.T @ X, "W": bone["W"], "ic": g_ic}
    return bone.value + ce.value, grads


def incremental_objective(
    state: ModelState,
    old: ModelState,
    data: LabeledFeatures,
    table: SemanticTable,
    registry: Registry,
    hp: HyperParams,
):
    """Semantic-head loss plus the class-ratio weighted incremental loss."""
    X, y = data.x, data.labels
    n = len(data)
    F = state.features(X)
    F_old = old.features(X)
    bone = compose_bone(ProposalBatch(F, y), state.W, table, state.class_ids, hp)
    gF = bone["features"].copy()
    gW = bone["W"].copy()
    g_ic = np.zeros_like(state.ic_weights)

    n_old_rows = len(old.class_ids)
    if hp.distillation and n_old_rows:
        dist = distillation(old.logits(F_old), F @ state.ic_weights[:n_old_rows].T, hp.temperature)
    else:
        dist = LossValueGrad.zero()
    if hp.projection_distance:
        pd = projection_distance(F_old @ old.W.T, F @ state.W.T)
    else:
        pd = LossValueGrad.zero()
    ce, gF_ce, g_ic_ce = _classification_terms(state, F, y)
    ce_v = LossValueGrad(ce.value, {"ce_features": gF_ce, "ce_ic": g_ic_ce})
    # intermediate features compared per proposal
    fd = feature_distance(F_old, F).scaled(1.0 / n)

    il = compose_il(dist, pd, ce_v, fd, registry, hp.gamma)
    if "logits_old" in il.grads:
        G = il["logits_old"]
        g_ic[:n_old_rows] += G.T @ F
        gF += G @ state.ic_weights[:n_old_rows]
    if "s_new" in il.grads:
        G = il["s_new"]
        gW += G.T @ F
        gF += G @ state.W
    if "ce_features" in il.grads:
        gF += il["ce_features"]
        g_ic += il["ce_ic"]
    gF += il["new_features"]
    grads = {"B": gF.T @ X, "W": gW, "ic": g_ic}
    return bone.value + il.value, grads


def _check_finite(value: float, state: ModelState, epoch: int):
    if not math.isfinite(value) or not all(np.all(np.isfinite(a)) for a in (state.B, state.W, state.ic_weights)):
        raise TrainingError(
            f"training diverged in epoch {epoch}: loss={value!r}, "
            f"|B|={np.linalg.norm(state.B):.3g}, |W|={np.linalg.norm(state.W):.3g}, "
            f"|ic|={np.linalg.norm(state.ic_weights):.3g}"
        )


def train_first_step(
    data: LabeledFeatures,
    state: ModelState,
    table: SemanticTable,
    registry: Registry,
    hp: HyperParams,
    cfg: TrainConfig,
    trace: list | None = None,
) -> ModelState:
    """Train on the first group's data; ``state`` must already hold classifier
    rows for the new classes. Full-set losses (initial, then one per epoch)
    are appended to ``trace`` when given."""
    if registry.n_old:
        raise ValueError("first step expects no old classes")
    _require_rows(state, registry.seen_classes)
    rng = np.random.default_rng(cfg.seed)
    cur = state.copy()
    if trace is not None:
        trace.append(first_step_objective(cur, data, table, hp)[0])
    n = len(data)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = data.subset(order[start:start + cfg.batch_size])
            value, grads = first_step_objective(cur, batch, table, hp)
            cur = sgd_step(cur, grads, lr)
            _check_finite(value, cur, epoch)
        if trace is not None:
            full = first_step_objective(cur, data, table, hp)[0]
            _check_finite(full, cur, epoch)
            trace.append(full)
    return cur


def _require_rows(state: ModelState, classes):
    missing = set(classes) - set(state.class_ids)
    if missing:
        raise ValueError(f"classifier lacks rows for classes {sorted(missing)}")


def train_incremental_step(
    new_data: LabeledFeatures,
    memory_data: LabeledFeatures | None,
    old_state: ModelState,
    new_state: ModelState,
    table: SemanticTable,
    registry: Registry,
    hp: HyperParams,
    cfg: TrainConfig,
    trace: list | None = None,
) -> ModelState:
    """Train the new model against the frozen ``old_state``.

    Each mini-batch takes ``cfg.replay_fraction`` of its rows from memory
    when memory is nonempty. With no old classes this reduces to
    :func:`train_first_step`.
    """
    if registry.n_old == 0:
        return train_first_step(new_data, new_state, table, registry, hp, cfg, trace)
    _require_rows(new_state, registry.seen_classes)
    if memory_data is None or len(memory_data) == 0:
        log.warning("exemplar memory is empty with %d old classes; replay skipped", registry.n_old)
        memory_data = None
    old = old_state.copy()  # reads only; the caller's object is never touched
    rng = np.random.default_rng(cfg.seed)
    cur = new_state.copy()
    full_set = new_data if memory_data is None else LabeledFeatures.concat([new_data, memory_data])

    def objective(s, d):
        return incremental_objective(s, old, d, table, registry, hp)

    if trace is not None:
        trace.append(objective(cur, full_set)[0])

    n_mem_per_batch = 0 if memory_data is None else int(round(cfg.replay_fraction * cfg.batch_size))
    n_new_per_batch = max(1, cfg.batch_size - n_mem_per_batch)
    n = len(new_data)
    mem_order = np.empty(0, dtype=int)
    mem_pos = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        for start in range(0, n, n_new_per_batch):
            batch = new_data.subset(order[start:start + n_new_per_batch])
            if n_mem_per_batch:
                if mem_pos + n_mem_per_batch > mem_order.size:
                    mem_order = np.concatenate([mem_order[mem_pos:], rng.permutation(len(memory_data))])
                    while mem_order.size < n_mem_per_batch:
                        mem_order = np.concatenate([mem_order, rng.permutation(len(memory_data))])
                    mem_pos = 0
                idx = mem_order[mem_pos:mem_pos + n_mem_per_batch]
                mem_pos += n_mem_per_batch
                batch = LabeledFeatures.concat([batch, memory_data.subset(idx)])
            value, grads = objective(cur, batch)
            cur = sgd_step(cur, grads, lr)
            _check_finite(value, cur, epoch)
        if trace is not None:
            full = objective(cur, full_set)[0]
            _check_finite(full, cur, epoch)
            trace.append(full)
    return cur
