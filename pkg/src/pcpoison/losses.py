"""Scalar training/attack losses and their batch gradient evaluators.

Every evaluator reduces over the batch with an arithmetic mean and
returns ``(value, d_features, d_logits)`` where the unused cotangent is
None.  The feature-collision loss couples the whole batch through the
pairwise cosine-similarity matrix; its self-similarity entries are
constants (cosine of a vector with itself), so they carry no gradient.
"""

from __future__ import annotations

import numpy as np

from .core import chamfer


def _logsumexp(z: np.ndarray, axis=-1):
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def cross_entropy(logits: np.ndarray, y: int) -> float:
    """Negative log-softmax of the true class, log-sum-exp stabilized."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("non-finite logits")
    if not 0 <= int(y) < z.shape[-1]:
        raise ValueError(f"label {y} out of range for {z.shape[-1]} classes")
    return float(_logsumexp(z) - z[int(y)])


def margin_loss(logits: np.ndarray, y: int) -> float:
    """Hinge on the gap between the best wrong logit and the true logit."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ValueError("margin loss needs at least two classes")
    if not 0 <= int(y) < z.shape[-1]:
        raise ValueError(f"label {y} out of range for {z.shape[-1]} classes")
    others = np.delete(z, int(y))
    return float(max(others.max() - z[int(y)], 0.0))


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.sqrt((u**2).sum())
    nv = np.sqrt((v**2).sum())
    if nu <= 0.0 or nv <= 0.0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def feature_collision_loss(
    features: np.ndarray,
    labels: np.ndarray,
    t: float = 0.1,
    exclude_self: bool = False,
) -> float:
    """Class-wise feature similarity loss over a batch (mean reduction)."""
    value, _ = _feature_collision(features, labels, t, exclude_self, want_grad=False)
    return value


def _feature_collision(features, labels, t, exclude_self, want_grad):
    if t <= 0.0:
        raise ValueError("temperature must be positive")
    F = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    B = F.shape[0]
    if B < 2:
        raise ValueError("feature collision needs a batch of at least two samples")
    norms = np.sqrt((F**2).sum(axis=1))
    if np.any(norms <= 0.0):
        raise ValueError("zero feature vector in batch")
    U = F / norms[:, None]
    S = U @ U.T
    np.fill_diagonal(S, 1.0)
    A = S / t
    A -= A.max(axis=1, keepdims=True)  # per-row shift cancels in the ratio
    E = np.exp(A)
    same = labels[:, None] == labels[None, :]
    if exclude_self:
        np.fill_diagonal(E, 0.0)
    num = (E * same).sum(axis=1)
    den = E.sum(axis=1)
    if np.any(num <= 0.0):
        raise ValueError("a sample has no positive pair (exclude_self with a lone class)")
    value = float(np.mean(np.log(den) - np.log(num)))
    if not want_grad:
        return value, None
    P = (E / den[:, None] - (E * same) / num[:, None]) / (B * t)
    np.fill_diagonal(P, 0.0)  # self-similarity is constant; no gradient
    Q = P + P.T
    dU = Q @ U
    dF = (dU - U * (dU * U).sum(axis=1, keepdims=True)) / norms[:, None]
    return value, dF


# ---------------------------------------------------------------------------
# batch evaluators used by the gradient machinery
# ---------------------------------------------------------------------------

class CrossEntropyLoss:
    """Mean cross-entropy over the batch; gradient lands on the logits."""

    kind = "cross_entropy"

    def value_and_grads(self, features, logits, labels):
        Z = np.asarray(logits, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        B = Z.shape[0]
        m = Z.max(axis=1, keepdims=True)
        expz = np.exp(Z - m)
        p = expz / expz.sum(axis=1, keepdims=True)
        idx = np.arange(B)
        value = float(np.mean(_logsumexp(Z, axis=1) - Z[idx, labels]))
        d_logits = p.copy()
        d_logits[idx, labels] -= 1.0
        d_logits /= B
        return value, None, d_logits

    def per_sample(self, features, logits, labels):
        Z = np.asarray(logits, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        return _logsumexp(Z, axis=1) - Z[np.arange(Z.shape[0]), labels]


class MarginLoss:
    """Mean hinge margin; subgradient 0 where the sample is already correct."""

    kind = "margin"

    def value_and_grads(self, features, logits, labels):
        Z = np.asarray(logits, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        B, C = Z.shape
        if C < 2:
            raise ValueError("margin loss needs at least two classes")
        idx = np.arange(B)
        masked = Z.copy()
        masked[idx, labels] = -np.inf
        rival = masked.argmax(axis=1)
        gap = Z[idx, rival] - Z[idx, labels]
        active = gap > 0.0
        value = float(np.mean(np.maximum(gap, 0.0)))
        d_logits = np.zeros_like(Z)
        d_logits[idx[active], rival[active]] = 1.0 / B
        d_logits[idx[active], labels[active]] -= 1.0 / B
        return value, None, d_logits

    def per_sample(self, features, logits, labels):
        Z = np.asarray(logits, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        idx = np.arange(Z.shape[0])
        masked = Z.copy()
        masked[idx, labels] = -np.inf
        return np.maximum(masked.max(axis=1) - Z[idx, labels], 0.0)


class FeatureCollisionLoss:
    """Batch feature-collision loss; gradient lands on the features."""

    kind = "feature_collision"

    def __init__(self, t: float = 0.1, exclude_self: bool = False):
        if t <= 0.0:
            raise ValueError("temperature must be positive")
        self.t = t
        self.exclude_self = exclude_self

    def value_and_grads(self, features, logits, labels):
        value, dF = _feature_collision(
            features, labels, self.t, self.exclude_self, want_grad=True
        )
        return value, dF, None

    def per_sample(self, features, logits, labels):
        F = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        norms = np.sqrt((F**2).sum(axis=1))
        if np.any(norms <= 0.0):
            raise ValueError("zero feature vector in batch")
        U = F / norms[:, None]
        S = U @ U.T
        np.fill_diagonal(S, 1.0)
        A = S / self.t
        A -= A.max(axis=1, keepdims=True)
        E = np.exp(A)
        same = labels[:, None] == labels[None, :]
        if self.exclude_self:
            np.fill_diagonal(E, 0.0)
        num = (E * same).sum(axis=1)
        den = E.sum(axis=1)
        return np.log(den) - np.log(num)


LOSSES = {
    "cross_entropy": CrossEntropyLoss,
    "margin": MarginLoss,
    "feature_collision": FeatureCollisionLoss,
}


def get_loss(kind: str, **kwargs):
    if kind not in LOSSES:
        raise ValueError(f"unknown loss {kind!r} (choose from {sorted(LOSSES)})")
    return LOSSES[kind](**kwargs)


def composite(base, beta: float, model, points, deltas, labels) -> float:
    """Batch mean of base(x + delta) plus beta times chamfer(x + delta, x)."""
    if beta < 0.0:
        raise ValueError("beta must be nonnegative")
    points = np.asarray(points, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.shape != points.shape:
        raise ValueError("deltas are not aligned with the batch")
    poisoned = points + deltas
    feats, logits = model.forward_batch(poisoned)
    value, _, _ = base.value_and_grads(feats, logits, labels)
    if beta > 0.0:
        value += beta * float(
            np.mean([chamfer(poisoned[i], points[i]) for i in range(points.shape[0])])
        )
    return value
