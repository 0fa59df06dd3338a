"""In-memory dataset of weakly labeled bags and its on-disk interchange format.

Directory layout::

    manifest.json   counts, label names, provenance
    features.npy    (N, R, D) little-endian float32
    labels.csv      sample_key,label_name,value   (observed labels only)
    splits.csv      sample_key,split
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .npy import NpyFormatError, load_npy, parse_npz, save_npy

SPLITS = ("train", "val", "test")
FORMAT_NAME = "attmil-dataset"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Bag:
    sample_key: str
    features: np.ndarray  # (R, D)
    labels: np.ndarray  # (L,) 0/1
    mask: np.ndarray  # (L,) True where observed


@dataclass(frozen=True, eq=False)
class Dataset:
    keys: tuple[str, ...]
    features: np.ndarray  # (N, R, D) float32
    labels: np.ndarray  # (N, L) uint8, zero where unobserved
    mask: np.ndarray  # (N, L) bool
    label_names: tuple[str, ...]
    split: tuple[str, ...]
    provenance: str = ""

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        mask = np.asarray(self.mask, dtype=bool)
        labels = (np.asarray(self.labels) > 0).astype(np.uint8) * mask
        object.__setattr__(self, "keys", tuple(str(k) for k in self.keys))
        object.__setattr__(self, "label_names", tuple(str(n) for n in self.label_names))
        object.__setattr__(self, "split", tuple(self.split))
        n = len(self.keys)
        if feats.ndim != 3 or feats.shape[0] != n:
            raise DatasetError(f"features shape {feats.shape} does not match {n} sample keys")
        if labels.shape != (n, len(self.label_names)) or mask.shape != labels.shape:
            raise DatasetError(
                f"labels {labels.shape} / mask {mask.shape} do not match "
                f"({n}, {len(self.label_names)})"
            )
        if len(set(self.keys)) != n:
            raise DatasetError("duplicate sample keys")
        if len(set(self.label_names)) != len(self.label_names):
            raise DatasetError("duplicate label names")
        if len(self.split) != n or not set(self.split) <= set(SPLITS):
            raise DatasetError("every bag needs exactly one split in train/val/test")
        for name, arr in (("features", feats), ("labels", labels), ("mask", mask)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_bags(self) -> int:
        return len(self.keys)

    @property
    def n_labels(self) -> int:
        return len(self.label_names)

    @property
    def bag_size(self) -> int:
        return self.features.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.split) if s == split], dtype=np.int64)

    def index_of(self, key: str) -> int:
        try:
            return self.keys.index(key)
        except ValueError:
            raise KeyError(f"unknown sample key {key!r}") from None

    def bag(self, i: int) -> Bag:
        return Bag(self.keys[i], self.features[i], self.labels[i], self.mask[i])

    def __iter__(self):
        return (self.bag(i) for i in range(self.n_bags))

    def __len__(self) -> int:
        return self.n_bags

    def with_split(self, split) -> "Dataset":
        return replace(self, split=tuple(split))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.keys == other.keys
            and self.label_names == other.label_names
            and self.split == other.split
            and self.provenance == other.provenance
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.mask, other.mask)
        )

    def split_counts(self) -> dict[str, int]:
        return {s: self.split.count(s) for s in SPLITS}


def split_validation(dataset: Dataset, fraction: float, rng: np.random.Generator) -> Dataset:
    """Move floor(fraction * |train|) uniformly drawn train bags to the val split."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    train = dataset.indices("train")
    n_val = int(np.floor(fraction * len(train)))
    if n_val == 0 or n_val == len(train):
        raise DatasetError(f"fraction {fraction} of {len(train)} train bags leaves an empty split")
    chosen = train[rng.permutation(len(train))[:n_val]]
    split = list(dataset.split)
    for i in chosen:
        split[i] = "val"
    return dataset.with_split(split)


def save_dataset(dataset: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT_NAME,
        "version": 1,
        "n_bags": dataset.n_bags,
        "n_labels": dataset.n_labels,
        "bag_size": dataset.bag_size,
        "feature_dim": dataset.feature_dim,
        "label_names": list(dataset.label_names),
        "split_counts": dataset.split_counts(),
        "provenance": dataset.provenance,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    save_npy(d / "features.npy", dataset.features.astype("<f4"))
    with open(d / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_key", "label_name", "value"])
        for i, key in enumerate(dataset.keys):
            for j in np.flatnonzero(dataset.mask[i]):
                w.writerow([key, dataset.label_names[j], int(dataset.labels[i, j])])
    with open(d / "splits.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_key", "split"])
        w.writerows(zip(dataset.keys, dataset.split))


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError(f"{d}: no manifest.json") from None
    features = load_npy(d / "features.npy")
    n, label_names = manifest["n_bags"], manifest["label_names"]
    expected = (n, manifest["bag_size"], manifest["feature_dim"])
    if features.shape != expected:
        raise DatasetError(f"features.npy has shape {features.shape}, manifest says {expected}")
    if len(label_names) != manifest["n_labels"]:
        raise DatasetError("manifest label_names disagrees with n_labels")

    with open(d / "splits.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    keys = [r["sample_key"] for r in rows]
    split = [r["split"] for r in rows]
    if len(keys) != n:
        raise DatasetError(f"splits.csv has {len(keys)} rows, manifest says {n}")
    key_index = {k: i for i, k in enumerate(keys)}
    label_index = {name: j for j, name in enumerate(label_names)}

    labels = np.zeros((n, len(label_names)), dtype=np.uint8)
    mask = np.zeros((n, len(label_names)), dtype=bool)
    with open(d / "labels.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["label_name"] not in label_index:
                raise DatasetError(f"labels.csv: unknown label name {row['label_name']!r}")
            if row["sample_key"] not in key_index:
                raise DatasetError(f"labels.csv: unknown sample key {row['sample_key']!r}")
            i, j = key_index[row["sample_key"]], label_index[row["label_name"]]
            labels[i, j] = int(row["value"])
            mask[i, j] = True
    return Dataset(keys, features, labels, mask, label_names, split, manifest.get("provenance", ""))


def _read_key_list(path, known: set[str]) -> list[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [row[0].strip() for row in csv.reader(fh) if row and row[0].strip()]
    if lines and lines[0] not in known:
        lines = lines[1:]  # header row
    return lines


def import_openmic(npz_path, train_csv, test_csv, classmap=None) -> Dataset:
    """Build a Dataset from the OpenMIC-2018 release.

    Features are rescaled to [0, 1]; a label is positive when ``Y_true > 0.5``
    and counts as observed where ``Y_mask`` is set.
    """
    with open(npz_path, "rb") as fh:
        try:
            arrays = parse_npz(fh.read())
        except NpyFormatError as exc:
            raise type(exc)(f"{npz_path}: {exc}") from None
    missing = {"X", "Y_true", "Y_mask", "sample_key"} - arrays.keys()
    if missing:
        raise DatasetError(f"{npz_path}: missing arrays {sorted(missing)}")
    x, y_true, y_mask = arrays["X"], arrays["Y_true"], arrays["Y_mask"]
    keys = [str(k) for k in arrays["sample_key"].reshape(-1)]
    n = len(keys)
    if x.ndim != 3 or x.shape[0] != n:
        raise DatasetError(f"X has shape {x.shape}, expected ({n}, R, D)")
    if y_true.shape != y_mask.shape or y_true.ndim != 2 or y_true.shape[0] != n:
        raise DatasetError(f"Y_true {y_true.shape} / Y_mask {y_mask.shape} disagree with N={n}")

    if x.dtype == np.uint8:
        feats = x.astype(np.float32) / np.float32(255.0)
    else:
        feats = np.clip(x.astype(np.float32), 0.0, 1.0)
    mask = y_mask.astype(bool)
    labels = ((y_true > 0.5) & mask).astype(np.uint8)

    n_labels = y_true.shape[1]
    if classmap is not None:
        with open(classmap, encoding="utf-8") as fh:
            cmap = json.load(fh)
        if sorted(cmap.values()) != list(range(n_labels)):
            raise DatasetError(f"class map indices do not cover 0..{n_labels - 1}")
        label_names = [name for name, _ in sorted(cmap.items(), key=lambda kv: kv[1])]
    else:
        warnings.warn("no class map given; using positional label names", stacklevel=2)
        label_names = [f"label_{j:02d}" for j in range(n_labels)]

    known = set(keys)
    train_keys = set(_read_key_list(train_csv, known))
    test_keys = set(_read_key_list(test_csv, known))
    both = train_keys & test_keys
    if both:
        raise DatasetError(f"{len(both)} sample keys appear in both split files, e.g. {min(both)!r}")
    unknown = (train_keys | test_keys) - known
    if unknown:
        warnings.warn(f"{len(unknown)} split-file keys are not in the NPZ; ignored", stacklevel=2)
    split = []
    for k in keys:
        if k in train_keys:
            split.append("train")
        elif k in test_keys:
            split.append("test")
        else:
            raise DatasetError(f"sample key {k!r} is in neither split file")
    return Dataset(keys, feats, labels, mask, label_names, split, f"OpenMIC import of {Path(npz_path).name}")
