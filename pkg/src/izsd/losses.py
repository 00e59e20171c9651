"""Loss functions for the semantic head and the old-new incremental model.

Every loss returns a :class:`LossValueGrad` carrying the value and its
analytic gradients keyed by argument name:

* ``"W"``            projection matrix
* ``"features"``     visual features of the batch (rows)
* ``"logits"``       incremental-classifier logits
* ``"logits_old"``   new-model logits restricted to old classes (distillation)
* ``"s_new"``        new-model projected vectors (projection distance)
* ``"new_features"`` new-model intermediate features (feature distance)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .semantic import BACKGROUND, Registry, SemanticTable, softmax


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 5.0
    beta: float = 0.001
    gamma: float = 2.0
    temperature: float = 2.0
    margin: float = 1.0
    eta: float = 0.2
    delta: float = 0.02
    memory_size: int = 150
    # ablation switches
    balanced_mse: bool = True
    distillation: bool = True
    projection_distance: bool = True

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        for name in ("eta", "delta"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.memory_size < 1:
            raise ValueError("memory_size must be positive")


@dataclass
class LossValueGrad:
    value: float
    grads: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.grads[key]

    @property
    def grad_W(self):
        return self.grads.get("W")

    def scaled(self, c: float) -> "LossValueGrad":
        return LossValueGrad(c * self.value, {k: c * g for k, g in self.grads.items()})

    def __add__(self, other: "LossValueGrad") -> "LossValueGrad":
        grads = dict(self.grads)
        for k, g in other.grads.items():
            grads[k] = grads[k] + g if k in grads else g
        return LossValueGrad(self.value + other.value, grads)

    @staticmethod
    def zero() -> "LossValueGrad":
        return LossValueGrad(0.0, {})


@dataclass(frozen=True)
class ProposalBatch:
    """Visual features of region proposals with labels (0 = background)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        f = np.atleast_2d(np.asarray(self.features, dtype=float))
        y = np.asarray(self.labels, dtype=int).ravel()
        if f.shape[0] != y.size:
            raise ValueError(f"{f.shape[0]} features for {y.size} labels")
        if np.any(y < 0):
            raise ValueError("labels must be nonnegative class ids")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    @property
    def is_background(self) -> np.ndarray:
        return self.labels == BACKGROUND

    @property
    def n_bg(self) -> int:
        return int(self.is_background.sum())

    @property
    def n_obj(self) -> int:
        return self.n_p - self.n_bg

    @property
    def n_p(self) -> int:
        return int(self.labels.size)


def _check_labels(batch: ProposalBatch, table: SemanticTable):
    if batch.n_p == 0:
        raise ValueError("empty proposal batch")
    if batch.labels.max() > table.num_classes:
        raise ValueError(f"label {batch.labels.max()} outside the embedding table")


def _chain_projection(G: np.ndarray, F: np.ndarray, W: np.ndarray) -> dict:
    """Gradients w.r.t. W and the features given dL/ds rows ``G``."""
    return {"W": G.T @ F, "features": G @ W}


def bfmse(batch: ProposalBatch, W, table: SemanticTable, alpha: float = 5.0) -> LossValueGrad:
    """Background-foreground MSE; each partition is averaged separately and the
    foreground average is weighted by ``alpha``. An empty partition contributes 0.
    """
    _check_labels(batch, table)
    W = np.asarray(W, dtype=float)
    F = batch.features
    S = F @ W.T
    R = S - table.embeddings[batch.labels]
    sq = np.einsum("ij,ij->i", R, R)
    bg = batch.is_background
    weights = np.zeros(batch.n_p)
    if batch.n_bg:
        weights[bg] = 1.0 / batch.n_bg
    if batch.n_obj:
        weights[~bg] = alpha / batch.n_obj
    value = math.fsum(weights * sq)
    G = 2.0 * weights[:, None] * R
    return LossValueGrad(value, _chain_projection(G, F, W))


def plain_mse(batch: ProposalBatch, W, table: SemanticTable) -> LossValueGrad:
    """Unweighted MSE to target rows averaged over all proposals."""
    _check_labels(batch, table)
    W = np.asarray(W, dtype=float)
    F = batch.features
    R = F @ W.T - table.embeddings[batch.labels]
    value = math.fsum(np.einsum("ij,ij->i", R, R)) / batch.n_p
    G = 2.0 * R / batch.n_p
    return LossValueGrad(value, _chain_projection(G, F, W))


def reconstruction(batch: ProposalBatch, W) -> LossValueGrad:
    """Mean squared error of reconstructing features through ``W^T W``."""
    if batch.n_p == 0:
        raise ValueError("empty proposal batch")
    W = np.asarray(W, dtype=float)
    F = batch.features
    if F.shape[1] != W.shape[1]:
        raise ValueError(f"features of width {F.shape[1]} do not match W {W.shape}")
    n = batch.n_p
    S = F @ W.T
    Rr = F - S @ W  # residuals f - W^T W f
    value = math.fsum(np.einsum("ij,ij->i", Rr, Rr)) / n
    WR = Rr @ W.T  # rows: W r_i
    grad_W = -2.0 / n * (S.T @ Rr + WR.T @ F)
    # d/df ||(I - W^T W) f||^2 = 2 (I - W^T W) r
    grad_F = 2.0 / n * (Rr - WR @ W)
    return LossValueGrad(value, {"W": grad_W, "features": grad_F})


def triplet(batch: ProposalBatch, W, table: SemanticTable, seen_ids: Iterable[int], m: float = 1.0) -> LossValueGrad:
    """Cosine hinge loss: each proposal's own-row cosine must beat every other
    seen row by ``m``. Background proposals use row 0 as their own row.
    """
    seen = np.array(sorted(set(int(c) for c in seen_ids)), dtype=int)
    if seen.size == 0:
        raise ValueError("seen class set is empty")
    _check_labels(batch, table)
    W = np.asarray(W, dtype=float)
    F = batch.features
    S = F @ W.T
    norms = np.linalg.norm(S, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero projected vector in triplet loss")
    Sh = S / norms
    E_seen = table.embeddings[seen]
    E_own = table.embeddings[batch.labels]
    C = Sh @ E_seen.T  # (n, |seen|)
    c_own = np.einsum("ij,ij->i", Sh, E_own)
    hinge = m + C - c_own[:, None]
    active = (hinge > 0) & (seen[None, :] != batch.labels[:, None])
    n = batch.n_p
    value = math.fsum(np.where(active, hinge, 0.0).ravel()) / n
    A = active.astype(float)
    # d/d s_hat of sum_j active_ij (C_ij - C_iy)
    D = A @ E_seen - A.sum(axis=1, keepdims=True) * E_own
    # through normalization: (I - s_hat s_hat^T) / ||s||
    radial = np.einsum("ij,ij->i", D, Sh)[:, None]
    G = (D - radial * Sh) / norms / n
    return LossValueGrad(value, _chain_projection(G, F, W))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, label) -> LossValueGrad:
    """``-log softmax(logits)[label]``. 2-D logits with a label array are
    averaged over rows."""
    z = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    single = z.ndim == 1
    Z = np.atleast_2d(z)
    y = np.atleast_1d(np.asarray(label, dtype=int))
    if y.size != Z.shape[0]:
        raise ValueError("one label per logit row required")
    if np.any((y < 0) | (y >= Z.shape[1])):
        raise ValueError("label outside logit range")
    n = Z.shape[0]
    logp = _log_softmax(Z)
    value = -math.fsum(logp[np.arange(n), y]) / n
    G = np.exp(logp)
    G[np.arange(n), y] -= 1.0
    G /= n
    return LossValueGrad(value, {"logits": G[0] if single else G})


def distillation(old_logits, new_logits_old_slice, T: float = 2.0) -> LossValueGrad:
    """Soft-target cross-entropy between tempered softmaxes (no T^2 rescale).
    Gradient is w.r.t. the new-model logits; 2-D inputs are averaged over rows.
    """
    zo = np.asarray(old_logits, dtype=float)
    zn = np.asarray(new_logits_old_slice, dtype=float)
    if zo.shape != zn.shape:
        raise ValueError(f"logit shapes differ: {zo.shape} vs {zn.shape}")
    single = zn.ndim == 1
    Zo, Zn = np.atleast_2d(zo), np.atleast_2d(zn)
    n = Zn.shape[0]
    q = softmax(Zo / T)
    logp = _log_softmax(Zn / T)
    value = -math.fsum((q * logp).ravel()) / n
    G = (np.exp(logp) - q) / (T * n)
    return LossValueGrad(value, {"logits_old": G[0] if single else G})


def projection_distance(s_old, s_new) -> LossValueGrad:
    """Squared ℓ2 distance between old- and new-model projections (row mean
    for 2-D input)."""
    so = np.asarray(s_old, dtype=float)
    sn = np.asarray(s_new, dtype=float)
    if so.shape != sn.shape:
        raise ValueError(f"projection shapes differ: {so.shape} vs {sn.shape}")
    n = 1 if sn.ndim == 1 else sn.shape[0]
    diff = sn - so
    value = math.fsum((diff * diff).ravel()) / n
    return LossValueGrad(value, {"s_new": 2.0 * diff / n})


def feature_distance(old_features, new_features) -> LossValueGrad:
    """Squared Frobenius norm of the feature difference."""
    fo = np.asarray(old_features, dtype=float)
    fn = np.asarray(new_features, dtype=float)
    if fo.shape != fn.shape:
        raise ValueError(f"feature shapes differ: {fo.shape} vs {fn.shape}")
    diff = fn - fo
    return LossValueGrad(math.fsum((diff * diff).ravel()), {"new_features": 2.0 * diff})


def compose_bone(batch: ProposalBatch, W, table: SemanticTable, seen_ids, hp: HyperParams) -> LossValueGrad:
    """Semantic head objective: bfMSE + beta * reconstruction + triplet.

    The detector terms (RPN and box regression) have no counterpart here.
    """
    mse = bfmse(batch, W, table, hp.alpha) if hp.balanced_mse else plain_mse(batch, W, table)
    total = mse + reconstruction(batch, W).scaled(hp.beta)
    return total + triplet(batch, W, table, seen_ids, hp.margin)


def compose_il(
    distill_v: LossValueGrad,
    pd_v: LossValueGrad,
    ce_v: LossValueGrad,
    fd_v: LossValueGrad,
    registry: Registry,
    gamma: float = 2.0,
) -> LossValueGrad:
    """Class-ratio weighted incremental objective."""
    if registry.n_all == 0:
        raise ValueError("registry has no classes")
    w_old = registry.n_old / registry.n_all
    w_new = registry.n_new / registry.n_all
    return (
        distill_v.scaled(w_old)
        + pd_v.scaled(w_old)
        + ce_v.scaled(w_new)
        + fd_v.scaled(gamma)
    )
