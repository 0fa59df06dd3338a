"""Multi-seed model comparisons shared by the acceptance suite and scripts/."""
from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .dataio import Dataset
from .evaluation import EvalReport, MetricWarning, evaluate, predict
from .training import TrainConfig, TrainResult, ensure_val_split, run_seeds

log = logging.getLogger(__name__)

# desk-scale settings for the synthetic benchmark (chosen by a pilot run)
DESK_CONFIG = TrainConfig(epochs=100, batch_size=64, lr=2e-3)


@dataclass
class SeedRun:
    kind: str
    seed: int
    result: TrainResult
    report: EvalReport


def planted_attention(model, dataset: Dataset, truth: np.ndarray, split: str = "test") -> float:
    """Mean attention weight on planted instances, over (bag, label) pairs with a plant."""
    idx = dataset.indices(split)
    _, _, w = predict(model, dataset, idx)
    planted = truth[idx]  # (n, R, L)
    has_plant = planted.any(axis=1)  # (n, L)
    per_pair = (w * planted).sum(axis=1) / np.maximum(planted.sum(axis=1), 1)
    return float(per_pair[has_plant].mean())


def compare_models(dataset: Dataset, kinds, seeds, cfg: TrainConfig = DESK_CONFIG,
                   workers: int = 1, checkpoint_root=None) -> dict[str, list[SeedRun]]:
    dataset = ensure_val_split(dataset, cfg)
    out: dict[str, list[SeedRun]] = {}
    for kind in kinds:
        root = None if checkpoint_root is None else f"{checkpoint_root}/{kind}"
        results = run_seeds(kind, dataset, cfg, seeds, workers=workers, checkpoint_root=root)
        runs = []
        for res in results:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", MetricWarning)
                rep = evaluate(res.model, dataset, "test", seed=res.config.seed)
            log.info("%s seed %d: macro F1 %.4f", kind, res.config.seed, rep.overall["macro_F1"])
            runs.append(SeedRun(kind, res.config.seed, res, rep))
        out[kind] = runs
    return out


def median_f1(runs: list[SeedRun]) -> float:
    return float(np.median([r.report.overall["macro_F1"] for r in runs]))


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return dataclasses.replace(cfg, seed=seed)
