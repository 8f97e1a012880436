"""Datasets: the subgroup mixture generator, CSV / IDX ingestion,
corruption transforms, and per-class subsampling."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    group_ids: np.ndarray | None = None
    name: str = ""
    num_classes: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.group_ids is not None:
            self.group_ids = np.asarray(self.group_ids, dtype=np.int64)
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise DataError(f"expected {n} labels, got shape {self.labels.shape}")
        if self.group_ids is not None and self.group_ids.shape != (n,):
            raise DataError(f"expected {n} group ids, got shape {self.group_ids.shape}")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if n else 0
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if self.group_ids is not None and n and self.group_ids.min() < 0:
            raise DataError("group ids must be nonnegative")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_shape(self) -> tuple:
        return tuple(self.features.shape[1:])

    def take(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.features[indices],
            self.labels[indices],
            None if self.group_ids is None else self.group_ids[indices],
            self.name,
            self.num_classes,
        )


# ---------------------------------------------------------------- generator

def gen_subgroup_mixture(
    classes: int,
    groups_per_class: int,
    dim: int,
    n: int,
    group_weights,
    separation: float,
    seed: int,
    noise: float = 1.0,
    layout_seed: int | None = None,
) -> Dataset:
    """Gaussian mixture with one isotropic blob per (class, group).

    Every class gets a random unit direction; its groups are placed at
    ``separation`` times random unit offsets around the class direction
    (scaled by ``separation`` too), so groups of a class are spread out and
    a rare group is not simply interpolated by the common ones. Within each
    class, the group of a sample is drawn from ``group_weights``.

    ``layout_seed`` fixes the blob geometry independently of the sample
    draw, which is how a train and a test split share one population.
    The ground-truth subgroup id is ``label * groups_per_class + group``.
    """
    weights = np.asarray(group_weights, dtype=np.float64)
    if weights.shape != (groups_per_class,):
        raise DataError(f"need {groups_per_class} group weights, got {weights.shape}")
    if (weights < 0).any() or not np.isclose(weights.sum(), 1.0, atol=1e-9):
        raise DataError("group weights must be a probability vector")
    if separation < 0:
        raise DataError("separation must be nonnegative")
    if classes < 2 or dim < 1 or n < 1:
        raise DataError("need classes >= 2, dim >= 1 and n >= 1")

    means = blob_means(classes, groups_per_class, dim, separation,
                       seed if layout_seed is None else layout_seed)
    rng = np.random.default_rng([seed, 1])
    labels = rng.integers(classes, size=n)
    groups = rng.choice(groups_per_class, size=n, p=weights)
    subgroup = labels * groups_per_class + groups
    features = means[subgroup] + noise * rng.standard_normal((n, dim))
    return Dataset(features, labels, subgroup, name="subgroup-mixture", num_classes=classes)


def blob_means(classes: int, groups_per_class: int, dim: int, separation: float, seed: int) -> np.ndarray:
    """Blob centers indexed by ``class * groups_per_class + group``."""
    rng = np.random.default_rng([seed, 0])
    out = np.empty((classes * groups_per_class, dim))
    for c in range(classes):
        base = rng.standard_normal(dim)
        base /= np.linalg.norm(base)
        for g in range(groups_per_class):
            offset = rng.standard_normal(dim)
            offset /= np.linalg.norm(offset)
            out[c * groups_per_class + g] = separation * (base + offset)
    return out


# ---------------------------------------------------------------- CSV

def load_csv(path, feature_columns=None, label_column: str = "label",
             group_column: str | None = None, num_classes: int | None = None) -> Dataset:
    """Read a header-first UTF-8 CSV.

    Without ``feature_columns`` every column other than the label and group
    columns is a feature, in file order.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DataError(f"{path}: no label column {label_column!r}")
        if group_column is not None and group_column not in header:
            raise DataError(f"{path}: no group column {group_column!r}")
        if feature_columns is None:
            feature_columns = [h for h in header if h not in (label_column, group_column)]
        missing = [c for c in feature_columns if c not in header]
        if missing:
            raise DataError(f"{path}: missing feature columns {missing}")
        f_idx = [header.index(c) for c in feature_columns]
        l_idx = header.index(label_column)
        g_idx = None if group_column is None else header.index(group_column)

        feats, labels, groups = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
            try:
                feats.append([float(row[i]) for i in f_idx])
                label = float(row[l_idx])
                if label != int(label):
                    raise ValueError("label is not integral")
                labels.append(int(label))
                if g_idx is not None:
                    groups.append(int(row[g_idx]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if num_classes is not None and not 0 <= labels[-1] < num_classes:
                raise DataError(f"{path}:{lineno}: label {labels[-1]} outside [0, {num_classes})")
            if labels[-1] < 0:
                raise DataError(f"{path}:{lineno}: negative label")
    return Dataset(
        np.array(feats, dtype=np.float64).reshape(len(feats), len(f_idx)),
        np.array(labels, dtype=np.int64),
        np.array(groups, dtype=np.int64) if g_idx is not None else None,
        name=path.stem,
        num_classes=num_classes,
    )


def save_csv(data: Dataset, path) -> None:
    flat = data.features.reshape(len(data), -1)
    header = [f"x{i}" for i in range(flat.shape[1])] + ["label"]
    if data.group_ids is not None:
        header.append("group")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(data)):
            row = [repr(float(v)) for v in flat[i]] + [int(data.labels[i])]
            if data.group_ids is not None:
                row.append(int(data.group_ids[i]))
            w.writerow(row)


# ---------------------------------------------------------------- IDX

_IDX_UBYTE = 0x08


def _read_idx(path, expected_ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: file too short for an IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != _IDX_UBYTE or ndim != expected_ndim:
        raise DataError(f"{path}: bad magic number {raw[:4].hex()}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims))
    if len(raw) - header_len < count:
        raise DataError(f"{path}: truncated payload, expected {count} bytes, found {len(raw) - header_len}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_len).reshape(dims)


def load_idx_images(path, labels_path=None, num_classes: int | None = None) -> Dataset:
    """MNIST-style unsigned-byte image file; pixels scaled to [0, 1], shape ``(n, H, W, 1)``.

    Labels come from the companion IDX label file when given, else zeros.
    """
    pixels = _read_idx(path, 3)
    features = pixels.astype(np.float64)[..., None] / 255.0
    if labels_path is not None:
        labels = _read_idx(labels_path, 1).astype(np.int64)
        if labels.shape[0] != features.shape[0]:
            raise DataError(f"{labels_path}: {labels.shape[0]} labels for {features.shape[0]} images")
    else:
        labels = np.zeros(features.shape[0], dtype=np.int64)
    return Dataset(features, labels, name=Path(path).stem, num_classes=num_classes)


def save_idx(path, array) -> None:
    arr = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, _IDX_UBYTE, arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


# ---------------------------------------------------------------- corruptions

CORRUPTION_KINDS = ("gaussian-noise", "blur", "invert")
_ALIASES = {"noise": "gaussian-noise"}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    sigma: float = 0.1
    width: int = 3
    lo: float = 0.0
    hi: float = 1.0
    seed: int = 0

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in CORRUPTION_KINDS:
            raise DataError(f"unknown corruption {self.kind!r}")
        if self.sigma < 0 or self.width < 1:
            raise DataError("corruption strengths must be nonnegative")
        if kind == "blur" and self.width % 2 == 0:
            raise DataError("blur width must be odd")

    @property
    def label(self) -> str:
        return {"gaussian-noise": "noise"}.get(self.kind, self.kind)


def box_blur(images: np.ndarray, width: int) -> np.ndarray:
    """Normalized box filter over H and W of ``(n, H, W, C)``, edge-replicated."""
    r = width // 2
    padded = np.pad(images, ((0, 0), (r, r), (r, r), (0, 0)), mode="edge")
    windows = sliding_window_view(padded, (width, width), axis=(1, 2))
    return windows.mean(axis=(-2, -1))


def corrupt(data: Dataset, spec: CorruptionSpec) -> Dataset:
    x = data.features
    if spec.kind == "gaussian-noise":
        if spec.sigma == 0:
            out = x.copy()
        else:
            rng = np.random.default_rng(spec.seed)
            out = x + spec.sigma * rng.standard_normal(x.shape)
    elif spec.kind == "blur":
        if x.ndim != 4:
            raise DataError(f"blur needs (n, H, W, C) image features, got shape {x.shape}")
        out = box_blur(x, spec.width)
    else:
        out = (spec.lo + spec.hi) - x
    return replace(data, features=out)


# ---------------------------------------------------------------- subsampling

def subsample_indices(labels, per_class: int, seed, classes=None) -> np.ndarray:
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in (np.unique(labels) if classes is None else classes):
        idx = np.flatnonzero(labels == cls)
        if idx.size < per_class:
            raise DataError(f"class {cls} has {idx.size} samples, {per_class} requested")
        chosen.append(rng.choice(idx, size=per_class, replace=False))
    return np.sort(np.concatenate(chosen))


def subsample(data: Dataset, per_class: int, seed) -> Dataset:
    """Uniform draw without replacement of ``per_class`` samples from each
    class, returned in original row order."""
    return data.take(subsample_indices(data.labels, per_class, seed))


def write_manifest(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
