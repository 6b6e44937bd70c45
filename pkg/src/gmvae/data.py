"""Datasets: IDX (MNIST) parsing, binarisation, synthetic mixtures, minibatches.

IDX layout (all header words big-endian)::

    offset 0   u8 0, u8 0, u8 type (0x08 = unsigned byte), u8 rank
    offset 4   rank x u32 extents
    offset 4+4*rank   prod(extents) payload bytes, row-major
"""
from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, ContractError, ParseError

IDX_UBYTE = 0x08
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None = None
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ContractError(f"features must be a matrix, got shape {self.features.shape}")
        if self.features.size and (self.features.min() < 0.0 or self.features.max() > 1.0):
            raise ContractError("feature entries must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise ContractError("labels must have one entry per row")
            if self.labels.size and self.labels.min() < 0:
                raise ContractError("labels must be non-negative")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index, name: str | None = None) -> "Dataset":
        labels = None if self.labels is None else self.labels[index]
        return Dataset(self.features[index], labels, name or self.name, dict(self.meta))


# --- IDX ----------------------------------------------------------------------

def parse_idx(buf: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX blob into an array of its declared shape."""
    if len(buf) < 4:
        raise ParseError("truncated magic number", len(buf))
    if buf[0] != 0 or buf[1] != 0:
        raise ParseError("magic must start with two zero bytes", 0)
    if buf[2] != IDX_UBYTE:
        raise ParseError(f"unsupported IDX data type 0x{buf[2]:02x}", 2)
    rank = buf[3]
    if rank < 1:
        raise ParseError("IDX rank must be at least 1", 3)
    header_end = 4 + 4 * rank
    if len(buf) < header_end:
        raise ParseError("truncated dimension header", len(buf))
    dims = struct.unpack(f">{rank}I", buf[4:header_end])
    for i, d in enumerate(dims):
        if d < 1:
            raise ParseError(f"extent {i} is zero", 4 + 4 * i)
    count = math.prod(dims)
    if count > len(buf) - header_end:
        # offset = first byte that should exist but does not
        raise ParseError(f"payload declares {count} bytes, found {len(buf) - header_end}",
                         len(buf))
    if count < len(buf) - header_end:
        raise ParseError("trailing bytes after payload", header_end + count)
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def encode_idx(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        if np.any((arr < 0) | (arr > 255) | (arr != np.round(arr))):
            raise ContractError("IDX payload must be bytes in [0, 255]")
        arr = arr.astype(np.uint8)
    header = bytes([0, 0, IDX_UBYTE, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def _check_magic(buf: bytes, magic: int) -> None:
    if len(buf) >= 4 and struct.unpack(">I", buf[:4])[0] != magic:
        raise ParseError(f"expected magic 0x{magic:08x}, got 0x{struct.unpack('>I', buf[:4])[0]:08x}", 0)


def load_idx_images(path, name: str | None = None) -> Dataset:
    """``[n, rows, cols]`` images flattened to ``[n, rows*cols]`` and scaled by 1/255."""
    buf = Path(path).read_bytes()
    _check_magic(buf, IMAGES_MAGIC)
    raw = parse_idx(buf)
    return Dataset(raw.reshape(raw.shape[0], -1) / 255.0, name=name or Path(path).name)


def load_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    _check_magic(buf, LABELS_MAGIC)
    return parse_idx(buf).astype(np.int64)


def write_idx(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_idx(array))


# --- transforms ---------------------------------------------------------------

def binarize(features: np.ndarray, mode: str = "threshold", threshold: float = 0.5,
             rng=None) -> np.ndarray:
    """Threshold mode maps ``v >= threshold`` to 1; stochastic mode draws Bernoulli(v)."""
    f = np.asarray(features, dtype=np.float64)
    if mode == "threshold":
        return (f >= threshold).astype(np.float64)
    if mode == "stochastic":
        if rng is None:
            raise ContractError("stochastic binarisation needs an rng")
        return (rng.uniform(f.shape) < f).astype(np.float64)
    raise ConfigError(f"unknown binarisation mode {mode!r}")


def synth_gmm(K: int, n: int, d: int, separation: float, sigma: float, seed: int) -> Dataset:
    """Isotropic Gaussian clusters with labels, rescaled into [0, 1].

    Cluster k is centred at ``separation * e_(k mod d) * (1 + k // d)``. Rows
    are returned in shuffled order so that a tail split is class-balanced in
    expectation. ``meta`` records the affine rescaling ``(raw - offset) / scale``
    and the raw cluster means.
    """
    if K < 2 or d < 1 or n < 1 or not separation > 0 or not sigma > 0:
        raise ConfigError("synth_gmm needs K >= 2, d >= 1, n >= 1, separation > 0, sigma > 0")
    rng = np.random.Generator(np.random.PCG64(seed))
    means = np.zeros((K, d))
    for k in range(K):
        means[k, k % d] = separation * (1 + k // d)
    labels = np.repeat(np.arange(K), n)
    raw = means[labels] + sigma * rng.standard_normal((K * n, d))
    order = rng.permutation(K * n)
    raw, labels = raw[order], labels[order]
    offset = float(raw.min())
    scale = float(raw.max() - offset) or 1.0
    features = np.clip((raw - offset) / scale, 0.0, 1.0)
    meta = {"K": K, "n_per_cluster": n, "d": d, "separation": separation, "sigma": sigma,
            "seed": seed, "offset": offset, "scale": scale, "means": means.tolist()}
    return Dataset(features, labels, name=f"synth_gmm_K{K}_d{d}", meta=meta)


def split_tail(data: Dataset, fraction: float) -> tuple[Dataset, Dataset]:
    """Split off the last ``fraction`` of rows (at least one) without shuffling."""
    n = len(data)
    n_tail = max(1, int(round(n * fraction)))
    if n_tail >= n:
        raise ConfigError(f"cannot split {n} rows with fraction {fraction}")
    return data.subset(slice(0, n - n_tail)), data.subset(slice(n - n_tail, n))


def batch_indices(n: int, batch_size: int, shuffle: bool = False, rng=None) -> Iterator[np.ndarray]:
    if batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def batches(data: Dataset, batch_size: int, shuffle: bool = False, rng=None) -> Iterator[np.ndarray]:
    """Feature blocks covering every row exactly once; the last block may be short."""
    for idx in batch_indices(len(data), batch_size, shuffle, rng):
        yield data.features[idx]


# --- CSV ----------------------------------------------------------------------

def dataset_to_csv(data: Dataset) -> str:
    """One row per example; the label, when present, is the last column."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    header = [f"x{i}" for i in range(data.dim)]
    if data.labels is not None:
        header.append("label")
    writer.writerow(header)
    for i in range(len(data)):
        row = [repr(float(v)) for v in data.features[i]]
        if data.labels is not None:
            row.append(str(int(data.labels[i])))
        writer.writerow(row)
    return out.getvalue()


def dataset_from_csv(path, name: str | None = None) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ContractError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    has_labels = header[-1] == "label"
    values = np.array([[float(v) for v in (r[:-1] if has_labels else r)] for r in body])
    labels = np.array([int(r[-1]) for r in body]) if has_labels else None
    return Dataset(values, labels, name=name or Path(path).stem)
