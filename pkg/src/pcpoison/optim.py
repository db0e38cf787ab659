"""Plain-gradient-descent training loop, plateau schedule, seeded RNG streams."""

from __future__ import annotations

import zlib

import numpy as np

from .losses import CrossEntropyLoss
from .model import grad_params


def derive_rng(seed: int, *tags: str) -> np.random.Generator:
    """Independent, process-stable RNG stream named by string tags."""
    entropy = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(t.encode("utf-8")) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


class PlateauSchedule:
    """Halve the learning rate after `patience` epochs without improvement."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 10,
                 min_lr: float = 1e-6):
        self.lr = float(lr)
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> float:
        if metric < self.best - 1e-12:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr

    def constants(self) -> dict:
        return {"factor": self.factor, "patience": self.patience,
                "min_lr": self.min_lr}


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled partition of range(n) into batches of at most batch_size."""
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def fit_classifier(
    model,
    points: np.ndarray,
    labels: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    loss=None,
    plateau: PlateauSchedule | None = None,
    early_stop_acc: float | None = None,
    epoch_hook=None,
):
    """Train in place with mini-batch gradient descent on the given loss.

    `epoch_hook(epoch, mean_loss, train_acc)` runs after every epoch;
    training stops early once the training accuracy reaches
    `early_stop_acc`.  Returns the per-epoch mean losses.
    """
    loss = loss or CrossEntropyLoss()
    rng = derive_rng(seed, "fit")
    schedule = plateau or PlateauSchedule(lr)
    schedule.lr = float(lr)
    history = []
    for epoch in range(epochs):
        total = 0.0
        count = 0
        for idx in epoch_batches(len(labels), batch_size, rng):
            X = points[idx]
            y = labels[idx]
            feats, logits, cache = model.forward_batch(X, want_cache=True)
            value, d_feat, d_logits = loss.value_and_grads(feats, logits, y)
            if not np.isfinite(value):
                raise RuntimeError(f"training diverged: loss={value} at epoch {epoch}")
            pgrad, _ = model.backward_batch(cache, d_feat, d_logits)
            model.params -= schedule.lr * pgrad
            total += value * len(idx)
            count += len(idx)
        mean_loss = total / max(count, 1)
        history.append(mean_loss)
        schedule.step(mean_loss)
        train_acc = None
        if early_stop_acc is not None or epoch_hook is not None:
            _, logits = model.forward_batch(points)
            train_acc = float((logits.argmax(axis=1) == labels).mean())
        if epoch_hook is not None:
            epoch_hook(epoch, mean_loss, train_acc)
        if early_stop_acc is not None and train_acc >= early_stop_acc:
            break
    return history
