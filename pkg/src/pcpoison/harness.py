"""Victim training, evaluation and poisoned-dataset materialization.

Victim models train with mini-batch gradient descent on cross-entropy
under a reduce-on-plateau schedule driven by a held-out validation split.
Samples are put into a canonical content order before batching, so
training is invariant to shuffling of the input dataset: batches are a
function of the seed alone.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import VERSION_STRING
from .core import DistanceReport, LabeledDataset, PerturbationSet, distance_report
from .losses import CrossEntropyLoss
from .model import PointSetClassifier, init_classifier
from .optim import PlateauSchedule, derive_rng, epoch_batches


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    plateau_min_lr: float = 1e-6
    val_fraction: float = 0.1
    arch: str = "ref-small"
    seed: int = 0
    hausdorff_variant: str = "two-sided-sq"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("validation fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: list
    f1: float | None
    curves: dict = field(default_factory=dict)
    distances: DistanceReport | None = None
    config: dict = field(default_factory=dict)
    seed: int = 0
    arch: str = ""
    surrogate_arch: str = ""
    method: str = "clean"
    version: str = VERSION_STRING
    predictions: np.ndarray | None = None

    def to_json(self) -> str:
        payload = {
            "accuracy": self.accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "f1": self.f1,
            "curves": self.curves,
            "distances": self.distances.to_dict() if self.distances else None,
            "config": self.config,
            "seed": self.seed,
            "arch": self.arch,
            "surrogate_arch": self.surrogate_arch,
            "method": self.method,
            "version": self.version,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def curves_csv(self) -> str:
        out = io.StringIO()
        out.write("epoch,train_acc,val_acc,test_acc\n")
        for i in range(len(self.curves.get("train_acc", []))):
            out.write(
                f"{i},{self.curves['train_acc'][i]:.17g},"
                f"{self.curves['val_acc'][i]:.17g},{self.curves['test_acc'][i]:.17g}\n"
            )
        return out.getvalue()


def materialize(
    clean: LabeledDataset, deltas: PerturbationSet, method: str | None = None
) -> LabeledDataset:
    """Pointwise x + delta with labels unchanged and poisoned provenance.

    Coordinates are quantized to the float32 grid so the result
    round-trips bit-exactly through PCD1 files.
    """
    deltas.check_alignment(clean)
    name = method or deltas.method or "unknown"
    points = (clean.points + deltas.deltas).astype(np.float32).astype(np.float64)
    return LabeledDataset(
        points=points,
        labels=clean.labels.copy(),
        num_classes=clean.num_classes,
        seed=clean.seed,
        provenance=f"poisoned({name})",
        split=clean.split,
    )


def mix_clean(
    poisoned: LabeledDataset, clean: LabeledDataset, ratio: float, seed: int = 0
) -> LabeledDataset:
    """Keep a seeded subset of samples poisoned; the rest revert to clean."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    if poisoned.points.shape != clean.points.shape:
        raise ValueError("datasets are misaligned")
    n = len(clean)
    k = int(round(ratio * n))
    rng = derive_rng(seed, "mix-clean")
    chosen = rng.choice(n, size=k, replace=False)
    points = clean.points.copy()
    points[chosen] = poisoned.points[chosen]
    return LabeledDataset(
        points=points,
        labels=clean.labels.copy(),
        num_classes=clean.num_classes,
        seed=clean.seed,
        provenance=f"{poisoned.provenance} ratio={ratio}",
        split=clean.split,
    )


def canonical_order(dataset: LabeledDataset) -> np.ndarray:
    """Content-based sample order, independent of the stored order."""
    keys = [
        (
            int(dataset.labels[i]),
            hashlib.sha256(np.ascontiguousarray(dataset.points[i]).tobytes()).digest(),
        )
        for i in range(len(dataset))
    ]
    return np.array(sorted(range(len(dataset)), key=lambda i: keys[i]), dtype=np.int64)


def _accuracy(model, points, labels):
    _, logits = model.forward_batch(points)
    preds = logits.argmax(axis=1)
    return float((preds == labels).mean()), preds


def evaluate(model: PointSetClassifier, test: LabeledDataset) -> EvalReport:
    """Accuracy, per-class accuracy and (for binary tasks) the F1 score."""
    if len(test) == 0:
        raise ValueError("empty test set")
    acc, preds = _accuracy(model, test.points, test.labels)
    per_class = []
    for c in range(test.num_classes):
        mask = test.labels == c
        per_class.append(float((preds[mask] == c).mean()) if mask.any() else 0.0)
    f1 = None
    if test.num_classes == 2:
        tp = int(((preds == 1) & (test.labels == 1)).sum())
        fp = int(((preds == 1) & (test.labels == 0)).sum())
        fn = int(((preds == 0) & (test.labels == 1)).sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return EvalReport(
        accuracy=acc,
        per_class_accuracy=per_class,
        f1=f1,
        arch=model.arch,
        predictions=preds,
    )


def train_victim(
    train: LabeledDataset,
    test: LabeledDataset,
    config: TrainConfig,
    clean_reference: LabeledDataset | None = None,
) -> tuple[PointSetClassifier, EvalReport]:
    """Train a victim classifier and report accuracy plus full curves.

    When `clean_reference` is given, the report embeds the distance
    report of the training set against it (recomputed, never cached).
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    order = canonical_order(train)
    points = train.points[order]
    labels = train.labels[order]
    n = len(train)
    n_val = int(round(config.val_fraction * n))
    val_idx = derive_rng(config.seed, "val-split").permutation(n)[:n_val]
    val_mask = np.zeros(n, dtype=bool)
    val_mask[val_idx] = True
    fit_points, fit_labels = points[~val_mask], labels[~val_mask]
    val_points, val_labels = points[val_mask], labels[val_mask]

    model = init_classifier(
        int(derive_rng(config.seed, "victim-init").integers(2**32)),
        config.arch,
        train.num_classes,
    )
    loss = CrossEntropyLoss()
    schedule = PlateauSchedule(
        config.lr, config.plateau_factor, config.plateau_patience, config.plateau_min_lr
    )
    rng = derive_rng(config.seed, "victim-batches")
    curves = {"train_acc": [], "val_acc": [], "test_acc": [], "lr": []}
    for epoch in range(config.epochs):
        epoch_loss = 0.0
        seen = 0
        for idx in epoch_batches(len(fit_labels), config.batch_size, rng):
            feats, logits, cache = model.forward_batch(fit_points[idx], want_cache=True)
            value, d_feat, d_logits = loss.value_and_grads(feats, logits, fit_labels[idx])
            if not np.isfinite(value):
                raise RuntimeError(
                    f"victim training diverged: loss={value} at epoch {epoch}"
                )
            pgrad, _ = model.backward_batch(cache, d_feat, d_logits)
            model.params -= schedule.lr * pgrad
            epoch_loss += value * len(idx)
            seen += len(idx)
        train_acc, _ = _accuracy(model, fit_points, fit_labels)
        if len(val_labels):
            vfeats, vlogits = model.forward_batch(val_points)
            monitored, _, _ = loss.value_and_grads(vfeats, vlogits, val_labels)
            val_acc = float((vlogits.argmax(axis=1) == val_labels).mean())
        else:
            monitored, val_acc = epoch_loss / max(seen, 1), train_acc
        test_acc, _ = _accuracy(model, test.points, test.labels)
        curves["train_acc"].append(train_acc)
        curves["val_acc"].append(val_acc)
        curves["test_acc"].append(test_acc)
        curves["lr"].append(schedule.lr)
        schedule.step(monitored)

    report = evaluate(model, test)
    report.curves = curves
    report.config = config.to_dict()
    report.seed = config.seed
    report.method = (
        train.provenance.split("(", 1)[1].rstrip(")")
        if train.provenance.startswith("poisoned(")
        else "clean"
    )
    if clean_reference is not None:
        deltas = PerturbationSet(train.points - clean_reference.points)
        report.distances = distance_report(
            clean_reference, deltas, config.hausdorff_variant
        )
    return model, report


def transfer_eval(
    clean_train: LabeledDataset,
    clean_test: LabeledDataset,
    attack_config,
    victim_arch: str,
    train_config: TrainConfig,
    poison_run=None,
):
    """Craft poison with one architecture, train a victim with another."""
    from .attacks import generate_poison

    if poison_run is None:
        poison_run = generate_poison(clean_train, attack_config)
    poisoned = materialize(clean_train, poison_run.perturbations)
    victim_config = dataclasses.replace(train_config, arch=victim_arch)
    model, report = train_victim(
        poisoned, clean_test, victim_config, clean_reference=clean_train
    )
    report.surrogate_arch = poison_run.config.arch
    return model, report, poison_run
