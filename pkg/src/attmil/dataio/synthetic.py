"""Synthetic weakly labeled bags with known instance-level ground truth.

Each label owns a prototype vector in [0, 1]^D. A bag is positive for a label
when at least one of its instances is planted near that label's prototype;
the remaining instances are uniform background noise.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..ndcore import make_rng
from .dataset import Dataset


@dataclass(frozen=True)
class SynthSpec:
    n_bags: int = 2000
    n_labels: int = 5
    bag_size: int = 10
    feature_dim: int = 16
    positives_per_bag: tuple[int, int] = (1, 2)  # planted instances per positive label, inclusive
    label_rate: float = 0.3  # probability that a bag is positive for a given label
    observe_rate: float = 0.7
    noise_scale: float = 0.1
    test_fraction: float = 0.2
    seed: int = 0
    max_retries: int = field(default=1000, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "positives_per_bag", tuple(int(v) for v in self.positives_per_bag))
        lo, hi = self.positives_per_bag
        for name in ("n_bags", "n_labels", "bag_size", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 1 <= lo <= hi <= self.bag_size:
            raise ValueError("positives_per_bag must satisfy 1 <= lo <= hi <= bag_size")
        if self.n_labels * hi > self.bag_size:
            raise ValueError(
                "n_labels * max(positives_per_bag) exceeds bag_size; planted instances would not fit"
            )
        if not 0.0 < self.observe_rate <= 1.0:
            raise ValueError("observe_rate must be in (0, 1]")
        if not 0.0 <= self.label_rate <= 1.0:
            raise ValueError("label_rate must be in [0, 1]")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be positive")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["positives_per_bag"] = list(self.positives_per_bag)
        d.pop("max_retries")
        return d


def _prototypes(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    min_dist = 2.0 * spec.noise_scale
    protos: list[np.ndarray] = []
    for _ in range(spec.n_labels):
        for _ in range(spec.max_retries):
            cand = rng.random(spec.feature_dim)
            if all(np.linalg.norm(cand - p) >= min_dist for p in protos):
                protos.append(cand)
                break
        else:
            raise ValueError(
                f"could not place {spec.n_labels} prototypes {min_dist:g} apart in "
                f"{spec.feature_dim} dimensions"
            )
    return np.stack(protos)


def generate_synthetic(spec: SynthSpec) -> tuple[Dataset, np.ndarray]:
    """Returns the dataset and a boolean (N, R, L) array marking planted instances."""
    rng = make_rng(spec.seed)
    protos = _prototypes(spec, rng)
    n, r, d, n_labels = spec.n_bags, spec.bag_size, spec.feature_dim, spec.n_labels
    lo, hi = spec.positives_per_bag

    features = rng.random((n, r, d))
    truth = np.zeros((n, r, n_labels), dtype=bool)
    for i in range(n):
        positive = np.flatnonzero(rng.random(n_labels) < spec.label_rate)
        free = list(rng.permutation(r))
        for label in positive:
            count = int(rng.integers(lo, hi + 1))
            slots, free = free[:count], free[count:]
            noise = rng.normal(0.0, spec.noise_scale, (count, d))
            features[i, slots] = np.clip(protos[label] + noise, 0.0, 1.0)
            truth[i, slots, label] = True

    labels = truth.any(axis=1).astype(np.uint8)
    mask = rng.random((n, n_labels)) < spec.observe_rate
    split = np.array(["train"] * n, dtype=object)
    n_test = int(np.floor(spec.test_fraction * n))
    split[rng.permutation(n)[:n_test]] = "test"

    width = len(str(n - 1))
    keys = [f"synth_{i:0{width}d}" for i in range(n)]
    names = [f"class_{j}" for j in range(n_labels)]
    dataset = Dataset(
        keys, features.astype(np.float32), labels, mask, names, list(split),
        provenance=f"synthetic {spec.to_dict()}",
    )
    return dataset, truth
