"""Synthetic shape benchmark generation and external-format ingestion.

The desk-scale benchmark samples four surfaces (sphere, cube, cylinder,
torus) with area-uniform parameterizations, an optional per-sample
uniform SO(3) rotation and Gaussian point jitter.  The shapes are
origin-centered by construction with every coordinate inside [-1, 1]
(jittered points are clamped to the box), and all coordinates are
quantized to the float32 grid so PCD1 round trips are bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import LabeledDataset

# fixed shape constants: cylinder height/radius and torus radii are picked
# so that the four classes stay distinct after rotation; the cube half-side
# keeps rotated corners inside the unit box (0.55 * sqrt(3) < 1).
CUBE_HALF_SIDE = 0.55
CYLINDER_HALF_HEIGHT = 0.7
CYLINDER_RADIUS = 0.5
TORUS_MAJOR = 0.7
TORUS_MINOR = 0.25

SHAPE_KINDS = ("sphere", "cube", "cylinder", "torus")


ROTATION_MODES = ("none", "uniform-z", "uniform-so3")


@dataclass
class ShapeSpec:
    kind: str
    n: int = 256
    jitter: float = 0.02
    rotation: str = "uniform-z"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.n < 8:
            raise ValueError("need at least 8 points per cloud")
        if self.jitter < 0:
            raise ValueError("jitter must be nonnegative")
        if self.rotation not in ROTATION_MODES:
            raise ValueError(f"unknown rotation mode {self.rotation!r}")


def _sample_sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.sqrt((v**2).sum(axis=1, keepdims=True))


def _sample_cube(rng, n):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for i in range(n):
        others = [c for c in range(3) if c != axis[i]]
        pts[i, axis[i]] = sign[i]
        pts[i, others[0]] = uv[i, 0]
        pts[i, others[1]] = uv[i, 1]
    return pts * CUBE_HALF_SIDE


def _sample_cylinder(rng, n):
    h, r = CYLINDER_HALF_HEIGHT, CYLINDER_RADIUS
    lateral = 2.0 * np.pi * r * (2 * h)
    caps = 2.0 * np.pi * r**2
    on_side = rng.uniform(size=n) < lateral / (lateral + caps)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = np.empty((n, 3))
    z_side = rng.uniform(-h, h, size=n)
    rad_cap = r * np.sqrt(rng.uniform(size=n))
    cap_sign = np.where(rng.uniform(size=n) < 0.5, 1.0, -1.0)
    rad = np.where(on_side, r, rad_cap)
    pts[:, 0] = rad * np.cos(theta)
    pts[:, 1] = rad * np.sin(theta)
    pts[:, 2] = np.where(on_side, z_side, cap_sign * h)
    return pts


def _sample_torus(rng, n):
    R, r = TORUS_MAJOR, TORUS_MINOR
    # area element is proportional to R + r*cos(phi); rejection-sample phi
    phi = np.empty(n)
    filled = 0
    while filled < n:
        cand = rng.uniform(0.0, 2.0 * np.pi, size=2 * (n - filled))
        accept = rng.uniform(size=cand.size) < (R + r * np.cos(cand)) / (R + r)
        take = cand[accept][: n - filled]
        phi[filled : filled + take.size] = take
        filled += take.size
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    ring = R + r * np.cos(phi)
    return np.stack(
        [ring * np.cos(theta), ring * np.sin(theta), r * np.sin(phi)], axis=1
    )


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
}


def _random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.sqrt((q**2).sum())
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _random_z_rotation(rng):
    theta = rng.uniform(0.0, 2.0 * np.pi)
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def sample_shape(spec: ShapeSpec) -> np.ndarray:
    """One seeded surface sampling of the spec's shape."""
    rng = np.random.default_rng(spec.seed)
    pts = _SAMPLERS[spec.kind](rng, spec.n)
    if spec.rotation == "uniform-so3":
        pts = pts @ _random_rotation(rng).T
    elif spec.rotation == "uniform-z":
        pts = pts @ _random_z_rotation(rng).T
    if spec.jitter > 0:
        pts = pts + rng.normal(0.0, spec.jitter, size=pts.shape)
        pts = np.clip(pts, -1.0, 1.0)
    return pts


def _generate_split(kinds, per_class, n, jitter, rotation, rng, seed, split):
    points = []
    labels = []
    for label, kind in enumerate(kinds):
        for _ in range(per_class):
            spec = ShapeSpec(
                kind=kind,
                n=n,
                jitter=jitter,
                rotation=rotation,
                seed=int(rng.integers(2**63)),
            )
            points.append(sample_shape(spec))
            labels.append(label)
    pts = np.asarray(points).astype(np.float32).astype(np.float64)
    return LabeledDataset(
        points=pts,
        labels=np.asarray(labels),
        num_classes=len(kinds),
        seed=seed,
        provenance="clean",
        split=split,
    )


def generate_benchmark(
    kinds=SHAPE_KINDS,
    train_per_class: int = 100,
    test_per_class: int = 50,
    n: int = 256,
    jitter: float = 0.02,
    rotation: str = "uniform-z",
    seed: int = 0,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic train/test benchmark with disjoint per-split seeds."""
    if len(kinds) < 2:
        raise ValueError("need at least two classes")
    from .optim import derive_rng

    train = _generate_split(
        kinds, train_per_class, n, jitter, rotation,
        derive_rng(seed, "train"), seed, "train",
    )
    test = _generate_split(
        kinds, test_per_class, n, jitter, rotation,
        derive_rng(seed, "test"), seed, "test",
    )
    return train, test


def load_hdf5(path, subsample: int | None = None, seed: int = 0) -> LabeledDataset:
    """Read a ModelNet40-style HDF5 file ("data" [N,n,3] and "label" [N]).

    Clouds are re-normalized (centroid at origin, max norm 1); pass
    ``subsample`` to uniformly sample that many points per cloud.
    """
    try:
        import h5py
    except ImportError as exc:  # pragma: no cover - env dependent
        raise RuntimeError("HDF5 support requires the h5py package") from exc
    from .core import normalize, sample_points

    with h5py.File(path, "r") as fh:
        for name in ("data", "label"):
            if name not in fh:
                raise ValueError(f"{path}: missing HDF5 dataset {name!r}")
        data = np.asarray(fh["data"], dtype=np.float64)
        labels = np.asarray(fh["label"]).reshape(-1).astype(np.int64)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"{path}: expected data of shape [N, n, 3], got {data.shape}")
    if data.shape[0] != labels.shape[0]:
        raise ValueError(f"{path}: data/label length mismatch")
    from .optim import derive_rng

    rng = derive_rng(seed, "hdf5-subsample")
    clouds = []
    for i in range(data.shape[0]):
        cloud = normalize(data[i])
        if subsample is not None:
            cloud = sample_points(cloud, subsample, int(rng.integers(2**63)))
        clouds.append(cloud.points)
    return LabeledDataset(
        points=np.asarray(clouds),
        labels=labels,
        num_classes=int(labels.max()) + 1 if labels.size else 0,
        seed=seed,
        provenance="clean",
    )


def chamfer_prototype_accuracy(
    train: LabeledDataset,
    test: LabeledDataset,
    prototypes_per_class: int = 8,
    max_test: int | None = None,
    seed: int = 0,
) -> float:
    """Nearest-prototype-in-chamfer classification accuracy on clean data.

    A cheap distinguishability guard: each class is represented by its
    first few training clouds and test clouds take the label of the class
    with the smallest mean chamfer distance to those prototypes.
    """
    protos = []
    for c in range(train.num_classes):
        idx = np.flatnonzero(train.labels == c)[:prototypes_per_class]
        protos.append(train.points[idx])
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(test))
    if max_test is not None:
        order = order[:max_test]
    correct = 0
    for i in order:
        cloud = test.points[i]
        dists = [
            np.mean([_kernels.chamfer_pair(cloud, p) for p in group])
            for group in protos
        ]
        correct += int(np.argmin(dists) == test.labels[i])
    return correct / len(order)
