"""Feature datasets: CSV / binary I/O, synthetic shifted Gaussians, batching."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

BINARY_MAGIC = b"AD2CNFT1"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None
    domain_tag: str
    class_count: int

    def __post_init__(self):
        f = self.features
        if f.ndim != 2 or f.shape[0] < 1:
            raise DataError(f"features must be a non-empty 2-D matrix, got shape {f.shape}")
        if not np.all(np.isfinite(f)):
            raise DataError("features contain NaN or Inf")
        if self.domain_tag not in ("source", "target"):
            raise DataError(f"domain_tag must be 'source' or 'target', got {self.domain_tag!r}")
        if self.labels is not None:
            if self.labels.shape != (f.shape[0],):
                raise DataError(f"{self.labels.shape[0]} labels for {f.shape[0]} rows")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
                raise DataError(f"labels must lie in 0..{self.class_count - 1}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def labeled(self) -> bool:
        return self.labels is not None


def _infer_class_count(labels: np.ndarray | None, class_count: int | None) -> int:
    if class_count is not None:
        return class_count
    if labels is None:
        raise DataError("class_count is required for unlabeled data")
    return int(labels.max()) + 1


def load_csv(path, domain_tag: str = "source", class_count: int | None = None) -> Dataset:
    """Rows are ``label,f1,f2,...``; label -1 marks an unlabeled row."""
    labels: list[int] = []
    rows: list[list[float]] = []
    width = None
    kinds = set()
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if width is None:
                width = len(rec)
                if width < 2:
                    raise DataError(f"{path}:{lineno}: need a label and at least one feature")
            elif len(rec) != width:
                raise DataError(f"{path}:{lineno}: expected {width} fields, found {len(rec)}")
            try:
                labels.append(int(rec[0]))
                rows.append([float(c) for c in rec[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if labels[-1] < -1:
                raise DataError(f"{path}:{lineno}: invalid label {labels[-1]}")
            kinds.add(labels[-1] == -1)
            if len(kinds) > 1:
                raise DataError(f"{path}:{lineno}: mixed labeled and unlabeled rows")
    if not rows:
        raise DataError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.int64)
    feats = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(feats)):
        bad = int(np.flatnonzero(~np.isfinite(feats).all(axis=1))[0]) + 1
        raise DataError(f"{path}: non-finite feature in data row {bad}")
    lab = None if y[0] == -1 else y
    return Dataset(feats, lab, domain_tag, _infer_class_count(lab, class_count))


def save_csv(ds: Dataset, path) -> None:
    labels = ds.labels if ds.labels is not None else np.full(ds.n, -1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for lab, row in zip(labels, ds.features):
            # repr() round-trips float64 exactly
            w.writerow([int(lab)] + [repr(float(v)) for v in row])


def save_binary(ds: Dataset, path) -> None:
    labels = ds.labels if ds.labels is not None else np.full(ds.n, -1)
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<QQQ", ds.n, ds.d, ds.class_count))
        fh.write(np.asarray(labels, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(ds.features, dtype="<f8").tobytes())


def load_binary(path, domain_tag: str = "source") -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:8] != BINARY_MAGIC:
        raise DataError(f"{path}: bad magic bytes")
    try:
        n, d, c = struct.unpack_from("<QQQ", raw, 8)
    except struct.error:
        raise DataError(f"{path}: truncated header") from None
    off = 8 + 24
    if len(raw) != off + 8 * n + 8 * n * d:
        raise DataError(f"{path}: size does not match header (n={n}, d={d})")
    labels = np.frombuffer(raw, dtype="<i8", count=n, offset=off).astype(np.int64)
    feats = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off + 8 * n).reshape(n, d).astype(np.float64)
    if np.all(labels == -1):
        lab = None
    elif np.any(labels == -1):
        raise DataError(f"{path}: mixed labeled and unlabeled rows")
    else:
        lab = labels
    return Dataset(feats, lab, domain_tag, int(c))


def load_features(path, format: str | None = None, domain_tag: str = "source",
                  class_count: int | None = None) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    if format is None:
        format = "binary" if path.suffix in (".bin", ".ad2") else "csv"
    if format == "csv":
        return load_csv(path, domain_tag, class_count)
    if format == "binary":
        return load_binary(path, domain_tag)
    raise DataError(f"unknown format {format!r}")


def class_centers(C: int, d: int, radius: float = 3.0) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(C) / C
    centers = np.zeros((C, d))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def gen_shifted_gaussians(n_per_class: int = 200, C: int = 3, d: int = 2,
                          shift: float | Sequence[float] = (0.5, 0.5), rotation_deg: float = 30.0,
                          noise_sigma: float = 0.35, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Source clusters on a radius-3 circle; the target rotates and translates them."""
    if C < 2 or d < 2:
        raise ValueError("need C >= 2 and d >= 2")
    shift = np.broadcast_to(np.asarray(shift, dtype=np.float64), (2,))
    src_rng, tgt_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    centers = class_centers(C, d)
    a = np.deg2rad(rotation_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    moved = centers.copy()
    moved[:, :2] = centers[:, :2] @ rot.T + shift

    def sample(rng, mus, tag):
        y = np.repeat(np.arange(C), n_per_class)
        x = mus[y] + noise_sigma * rng.standard_normal((y.size, d))
        return Dataset(x, y, tag, C)

    return sample(src_rng, centers, "source"), sample(tgt_rng, moved, "target")


class BatchIterator:
    """Epoch-wise shuffled mini-batches; the final short batch is emitted."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1 or batch_size < 1:
            raise ValueError("need n >= 1 and batch_size >= 1")
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self.perm = rng.permutation(n)
        self.cursor = 0

    def next_indices(self) -> np.ndarray:
        if self.cursor >= self.n:
            self.perm = self.rng.permutation(self.n)
            self.cursor = 0
        idx = self.perm[self.cursor:self.cursor + self.batch_size]
        self.cursor += idx.size
        return idx

    def get_state(self) -> dict:
        return {"perm": self.perm.tolist(), "cursor": self.cursor, "rng": self.rng.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.perm = np.asarray(state["perm"], dtype=np.int64)
        self.cursor = int(state["cursor"])
        self.rng.bit_generator.state = state["rng"]


def next_batch(it: BatchIterator, ds: Dataset):
    idx = it.next_indices()
    return ds.features[idx], (ds.labels[idx] if ds.labels is not None else None)
