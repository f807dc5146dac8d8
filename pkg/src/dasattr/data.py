"""Seeded synthetic datasets and their CSV file format."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import FormatError, ParameterError

DATASETS = ("gauss2", "blobs8")
_SPLITS = {"train": 0, "val": 1, "planted": 2}


class DataPoint(NamedTuple):
    id: int
    x: np.ndarray
    label: Optional[int]


@dataclass
class Dataset:
    name: str
    x: np.ndarray       # (n, d)
    labels: np.ndarray  # (n,)
    ids: np.ndarray     # (n,)

    def __len__(self):
        return len(self.x)

    def __getitem__(self, i) -> DataPoint:
        return DataPoint(int(self.ids[i]), self.x[i], int(self.labels[i]))

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, mask_or_index) -> "Dataset":
        idx = np.asarray(mask_or_index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return Dataset(self.name, self.x[idx], self.labels[idx], self.ids[idx])


def gauss2(n: int, rng) -> tuple:
    labels = np.arange(n) % 2
    means = np.where(labels[:, None] == 0, [[-2.0, 0.0]], [[2.0, 0.0]])
    return means + 0.5 * rng.standard_normal((n, 2)), labels


def blobs8(n: int, rng) -> tuple:
    """8x8 images, a Gaussian bump near a class-dependent corner plus pixel noise."""
    labels = np.arange(n) % 2
    corners = np.where(labels[:, None] == 0, [[1.5, 1.5]], [[5.5, 5.5]])
    centres = corners + 0.5 * rng.standard_normal((n, 2))
    yy, xx = np.mgrid[0:8, 0:8]
    grid = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    d2 = ((grid[None, :, :] - centres[:, None, :]) ** 2).sum(axis=2)
    bump = np.exp(-d2 / (2 * 1.5 ** 2))
    return 2.0 * bump - 1.0 + 0.1 * rng.standard_normal((n, 64)), labels


def make_dataset(name: str, seed: int = 0, n: int = 200, split: str = "train") -> Dataset:
    if name not in DATASETS:
        raise ParameterError(f"unknown dataset {name!r}; choose from {', '.join(DATASETS)}")
    rng = np.random.default_rng([seed, _SPLITS[split]])
    x, labels = (gauss2 if name == "gauss2" else blobs8)(n, rng)
    return Dataset(name, x, labels, np.arange(n))


def planted_outlier_dataset(n: int = 40, num_outliers: int = 4, seed: int = 0) -> Dataset:
    """gauss2-style clusters with a few points pushed progressively further out."""
    rng = np.random.default_rng([seed, _SPLITS["planted"]])
    x, labels = gauss2(n, rng)
    for j in range(num_outliers):
        x[j] = x[j] + np.array([0.0, 1.5 * (j + 1)]) * (1 if j % 2 else -1)
    return Dataset("planted", x, labels, np.arange(n))


def write_dataset(path, ds: Dataset):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["# dataset", ds.name])
        w.writerow(["id", "label"] + [f"x{j}" for j in range(ds.dim)])
        for i in range(len(ds)):
            w.writerow([int(ds.ids[i]), int(ds.labels[i])] + [repr(float(v)) for v in ds.x[i]])


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 2 or rows[0][:1] != ["# dataset"] or rows[1][:2] != ["id", "label"]:
            raise FormatError(f"{path} is not a dataset file")
        name = rows[0][1]
        body = rows[2:]
        ids = np.array([int(r[0]) for r in body], dtype=np.int64)
        labels = np.array([int(r[1]) for r in body], dtype=np.int64)
        x = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"malformed dataset file {path}: {exc}") from None
    if len(body) == 0:
        x = np.zeros((0, len(rows[1]) - 2))
    return Dataset(name, x, labels, ids)
