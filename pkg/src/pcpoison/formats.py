"""Binary dataset/perturbation file formats.

PCD1 (datasets), little-endian throughout:
    magic "PCPD" | version u32 | N u32 | n u32 | C u32 | seed u64
    | provenance: u32 length + UTF-8 bytes
    | N records of (label u32, n*3 float32 row-major)

PCDD (perturbation sets) mirrors the header with magic "PCDD" and drops
the per-record label; the provenance field carries the attack method.
Coordinates are stored as float32, so a bit-exact round trip holds for
data whose float64 values sit on the float32 grid (everything produced by
`datasets.generate_benchmark` and `harness.materialize`).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import LabeledDataset, PerturbationSet

PCD1_MAGIC = b"PCPD"
PCDD_MAGIC = b"PCDD"
FORMAT_VERSION = 1


def _pack_header(magic, n_samples, n_points, num_classes, seed, provenance):
    prov = provenance.encode("utf-8")
    return (
        magic
        + struct.pack("<IIIIQ", FORMAT_VERSION, n_samples, n_points, num_classes, seed)
        + struct.pack("<I", len(prov))
        + prov
    )


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise ValueError(f"truncated file while reading {what}")
    return data


def _unpack_header(fh, magic, path):
    got = _read_exact(fh, 4, "magic")
    if got != magic:
        raise ValueError(f"{path}: bad magic {got!r}, expected {magic!r}")
    version, n_samples, n_points, num_classes, seed = struct.unpack(
        "<IIIIQ", _read_exact(fh, 24, "header")
    )
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    (prov_len,) = struct.unpack("<I", _read_exact(fh, 4, "provenance length"))
    provenance = _read_exact(fh, prov_len, "provenance").decode("utf-8")
    return n_samples, n_points, num_classes, seed, provenance


def write_pcd1(path, dataset: LabeledDataset) -> None:
    path = Path(path)
    coords = dataset.points.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(
            _pack_header(
                PCD1_MAGIC,
                len(dataset),
                dataset.n_points,
                dataset.num_classes,
                dataset.seed,
                dataset.provenance,
            )
        )
        for i in range(len(dataset)):
            fh.write(struct.pack("<I", int(dataset.labels[i])))
            fh.write(coords[i].tobytes(order="C"))


def read_pcd1(path) -> LabeledDataset:
    path = Path(path)
    with open(path, "rb") as fh:
        n_samples, n_points, num_classes, seed, provenance = _unpack_header(
            fh, PCD1_MAGIC, path
        )
        labels = np.empty(n_samples, dtype=np.int64)
        points = np.empty((n_samples, n_points, 3), dtype=np.float64)
        rec_bytes = n_points * 3 * 4
        for i in range(n_samples):
            (labels[i],) = struct.unpack("<I", _read_exact(fh, 4, f"label {i}"))
            raw = _read_exact(fh, rec_bytes, f"points of sample {i}")
            points[i] = np.frombuffer(raw, dtype="<f4").reshape(n_points, 3)
    return LabeledDataset(
        points=points,
        labels=labels,
        num_classes=num_classes,
        seed=seed,
        provenance=provenance,
    )


def write_pcdd(path, pert: PerturbationSet, seed: int = 0) -> None:
    path = Path(path)
    n_samples, n_points, _ = pert.deltas.shape
    coords = pert.deltas.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(
            _pack_header(PCDD_MAGIC, n_samples, n_points, 0, seed, pert.method)
        )
        for i in range(n_samples):
            fh.write(coords[i].tobytes(order="C"))


def read_pcdd(path) -> PerturbationSet:
    path = Path(path)
    with open(path, "rb") as fh:
        n_samples, n_points, _, _, provenance = _unpack_header(fh, PCDD_MAGIC, path)
        deltas = np.empty((n_samples, n_points, 3), dtype=np.float64)
        rec_bytes = n_points * 3 * 4
        for i in range(n_samples):
            raw = _read_exact(fh, rec_bytes, f"deltas of sample {i}")
            deltas[i] = np.frombuffer(raw, dtype="<f4").reshape(n_points, 3)
    return PerturbationSet(deltas=deltas, method=provenance)
