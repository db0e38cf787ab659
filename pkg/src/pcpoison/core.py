"""Point-cloud domain types, normalization/sampling and perceptibility metrics.

Coordinates are kept in float64 model units throughout; datasets that are
meant to round-trip through the float32 PCD1 file format are quantized to
the float32 grid when they are built (see `datasets` and
`harness.materialize`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

HAUSDORFF_VARIANTS = ("two-sided-sq", "one-sided-sq", "one-sided")


def _as_points(x) -> np.ndarray:
    pts = np.asarray(getattr(x, "points", x), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError("point cloud must be a nonempty (n, k) array")
    if not np.isfinite(pts).all():
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


@dataclass
class PointCloud:
    """An ordered set of n points; the unit of attack and classification."""

    points: np.ndarray

    def __post_init__(self):
        self.points = _as_points(self.points)

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass
class LabeledDataset:
    """Point clouds plus integer labels, with provenance metadata.

    All clouds share the same point count, so coordinates are stored as a
    single (N, n, 3) array index-aligned with `labels`.
    """

    points: np.ndarray
    labels: np.ndarray
    num_classes: int
    seed: int = 0
    provenance: str = "clean"
    split: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 3:
            raise ValueError("dataset points must be (N, n, 3)")
        if self.points.shape[0] != self.labels.shape[0]:
            raise ValueError("points and labels are misaligned")
        if not np.isfinite(self.points).all():
            raise ValueError("dataset contains non-finite coordinates")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ValueError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return self.points.shape[0]

    def __getitem__(self, i: int) -> tuple[PointCloud, int]:
        return PointCloud(self.points[i]), int(self.labels[i])

    @property
    def n_points(self) -> int:
        return self.points.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class PerturbationSet:
    """Per-sample, per-point offsets index-aligned with a dataset."""

    deltas: np.ndarray
    method: str = ""

    def __post_init__(self):
        self.deltas = np.asarray(self.deltas, dtype=np.float64)
        if self.deltas.ndim != 3:
            raise ValueError("deltas must be (N, n, 3)")

    def __len__(self) -> int:
        return self.deltas.shape[0]

    def check_alignment(self, dataset: LabeledDataset) -> None:
        if self.deltas.shape != dataset.points.shape:
            raise ValueError(
                f"perturbations {self.deltas.shape} are not aligned with "
                f"dataset {dataset.points.shape}"
            )

    def check_budget(self, epsilon: float, tol: float = 1e-9) -> bool:
        return bool(np.abs(self.deltas).max() <= epsilon + tol)


@dataclass
class DistanceReport:
    """Perceptibility summary of a perturbation set against its clean data."""

    chamfer_mean: float
    hausdorff_mean: float
    linf_max: float
    l2_mean: float
    hausdorff_variant: str = "two-sided-sq"

    def to_dict(self) -> dict:
        return {
            "chamfer_mean": self.chamfer_mean,
            "hausdorff_mean": self.hausdorff_mean,
            "linf_max": self.linf_max,
            "l2_mean": self.l2_mean,
            "hausdorff_variant": self.hausdorff_variant,
        }


def normalize(pc: PointCloud | np.ndarray) -> PointCloud:
    """Center a cloud on its centroid and scale the farthest point to norm 1.

    Raises ValueError("zero extent") for degenerate clouds where every
    point coincides (including single-point clouds).
    """
    pts = _as_points(pc)
    centered = pts - pts.mean(axis=0)
    scale = np.sqrt((centered**2).sum(axis=1).max())
    if scale <= 0.0:
        raise ValueError("zero extent")
    return PointCloud(centered / scale)


def sample_points(pc: PointCloud | np.ndarray, m: int, seed: int) -> PointCloud:
    """Uniformly sample m points; without replacement when m <= n."""
    if m <= 0:
        raise ValueError("m must be >= 1")
    pts = _as_points(pc)
    rng = np.random.default_rng(seed)
    idx = rng.choice(pts.shape[0], size=m, replace=m > pts.shape[0])
    return PointCloud(pts[idx])


def chamfer(x, x2) -> float:
    """Symmetric mean of squared nearest-neighbour distances."""
    a = _as_points(x)
    b = _as_points(x2)
    if a.shape[1] != b.shape[1]:
        raise ValueError("clouds have different point dimensions")
    return float(_kernels.chamfer_pair(a, b))


def hausdorff(x, x2, variant: str = "two-sided-sq") -> float:
    """Worst-case nearest-neighbour distance between two point sets.

    The default "two-sided-sq" takes the max of both directed terms with
    squared distances so it shares units with `chamfer`; "one-sided-sq"
    keeps only the x2->x direction; "one-sided" is its square root.
    """
    if variant not in HAUSDORFF_VARIANTS:
        raise ValueError(f"unknown hausdorff variant {variant!r}")
    a = _as_points(x)
    b = _as_points(x2)
    _, worst_ba = _kernels.directed_stats(b, a)
    if variant == "one-sided":
        return float(np.sqrt(worst_ba))
    if variant == "one-sided-sq":
        return float(worst_ba)
    _, worst_ab = _kernels.directed_stats(a, b)
    return float(max(worst_ab, worst_ba))


def chamfer_with_grad(x, x2) -> tuple[float, np.ndarray]:
    """Chamfer value and its gradient with respect to the first cloud."""
    a = _as_points(x)
    b = _as_points(x2)
    return _kernels.chamfer_pair_grad(a, b)


def distance_report(
    clean: LabeledDataset,
    deltas: PerturbationSet,
    hausdorff_variant: str = "two-sided-sq",
) -> DistanceReport:
    """Mean chamfer/hausdorff over samples plus offset norm statistics."""
    if hausdorff_variant not in HAUSDORFF_VARIANTS:
        raise ValueError(f"unknown hausdorff variant {hausdorff_variant!r}")
    deltas.check_alignment(clean)
    poisoned = clean.points + deltas.deltas
    ch = _kernels.chamfer_batch(poisoned, clean.points)
    two_sided = hausdorff_variant == "two-sided-sq"
    hs = _kernels.hausdorff_batch(clean.points, poisoned, two_sided)
    if hausdorff_variant == "one-sided":
        hs = np.sqrt(hs)
    per_point = np.sqrt((deltas.deltas**2).sum(axis=2))
    return DistanceReport(
        chamfer_mean=float(np.mean(ch)),
        hausdorff_mean=float(np.mean(hs)),
        linf_max=float(np.abs(deltas.deltas).max()) if len(clean) else 0.0,
        l2_mean=float(per_point.mean()),
        hausdorff_variant=hausdorff_variant,
    )
