"""Missing-label loss, Adam, and the training loop."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndcore as nd
from .dataio import Dataset, split_validation
from .model import build_model, round_to_f32, save_checkpoint

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    """Observed-fraction normalization g(p) = alpha * p**gamma + beta."""

    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = -1.0

    def g(self, p: np.ndarray) -> np.ndarray:
        return self.alpha * np.power(p, self.gamma) + self.beta


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 5e-4
    epochs: int = 250
    seed: int = 0
    checkpoint_dir: str | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    dropout: float = 0.6
    fc_hidden: tuple[int, ...] = (512, 512)
    val_fraction: float = 0.15
    split_seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.lr <= 0 or self.epochs < 1:
            raise ValueError("batch_size, lr and epochs must be positive")
        self.fc_hidden = tuple(int(v) for v in self.fc_hidden)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Flat keys; ``alpha``/``beta``/``gamma`` configure the loss."""
        d = dict(d)
        loss = LossConfig(**{k: float(d.pop(k)) for k in ("alpha", "beta", "gamma") if k in d})
        names = {f.name for f in dataclasses.fields(cls)} - {"loss"}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(loss=loss, **d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        """Flat form of the config; the output location is not part of it."""
        d = dataclasses.asdict(self)
        d.update(d.pop("loss"))
        d.pop("checkpoint_dir")
        d["fc_hidden"] = list(self.fc_hidden)
        return d


def partial_bce(S: np.ndarray, labels: np.ndarray, mask: np.ndarray, cfg: LossConfig = LossConfig()):
    """Binary cross-entropy over observed labels only.

    Per bag: ``-g(p)/L * sum_observed [y log q + (1-y) log(1-q)]`` with p the
    observed fraction. The batch loss is the mean over bags with at least one
    observed label. Returns (loss, grad_S).
    """
    S = np.asarray(S, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    y = np.asarray(labels, dtype=np.float64)
    if S.shape != mask.shape or S.shape != y.shape:
        raise ValueError("S, labels and mask must share a shape")
    n_labels = S.shape[1]
    n_obs = mask.sum(axis=1)
    active = n_obs > 0
    n_active = int(active.sum())
    if n_active == 0:
        raise ValueError("no observed labels in batch")

    q = np.clip(S, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = np.where(mask, y * np.log(q) + (1.0 - y) * np.log(1.0 - q), 0.0)
    p = n_obs[active] / n_labels
    scale = np.zeros(len(S))
    scale[active] = cfg.g(p) / n_labels / n_active
    loss = -float((scale * ll.sum(axis=1)).sum())

    inside = (S > PROB_CLAMP) & (S < 1.0 - PROB_CLAMP)
    dll = np.where(mask & inside, y / q - (1.0 - y) / (1.0 - q), 0.0)
    grad = -scale[:, None] * dll
    return loss, grad


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise nd.NumericalError(f"non-finite gradient for {k!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class TrainResult:
    model: object
    history: list[tuple[int, float, float]]
    best_epoch: int
    best_val_loss: float
    config: TrainConfig

    def history_csv(self) -> str:
        return history_to_csv(self.history)


def history_to_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss"])
    for epoch, tr, va in history:
        w.writerow([epoch, repr(tr), repr(va)])
    return buf.getvalue()


def evaluate_loss(model, dataset: Dataset, idx: np.ndarray, cfg: LossConfig, batch_size: int) -> float:
    """Eval-mode partial BCE averaged over bags with observed labels."""
    total, count = 0.0, 0
    for start in range(0, len(idx), batch_size):
        b = idx[start : start + batch_size]
        n_active = int((dataset.mask[b].sum(axis=1) > 0).sum())
        if n_active == 0:
            continue
        S = model.forward(dataset.features[b], "eval").S
        loss, _ = partial_bce(S, dataset.labels[b], dataset.mask[b], cfg)
        total += loss * n_active
        count += n_active
    if count == 0:
        raise ValueError("no observed labels in evaluation split")
    return total / count


def ensure_val_split(dataset: Dataset, cfg: TrainConfig) -> Dataset:
    if len(dataset.indices("val")):
        return dataset
    return split_validation(dataset, cfg.val_fraction, nd.make_rng(cfg.split_seed))


def train(model_kind: str, dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    """Train one model; the returned model holds the best-validation parameters.

    When ``cfg.checkpoint_dir`` is set the checkpoint there is rewritten every
    time the validation loss strictly improves. Parameters are kept at float32
    precision after each epoch's snapshot so the in-memory best model and the
    on-disk checkpoint are identical.
    """
    train_idx, val_idx = dataset.indices("train"), dataset.indices("val")
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ValueError("dataset needs non-empty train and val splits")
    model = build_model(
        model_kind, dataset.n_labels, dataset.bag_size, dataset.feature_dim,
        seed=cfg.seed, dropout=cfg.dropout, fc_hidden=cfg.fc_hidden,
    )
    log.info("%s: %d learnable parameters", model_kind, model.census())
    shuffle_rng, dropout_rng = nd.spawn_rngs(cfg.seed, 2)
    opt = AdamState(lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)

    history: list[tuple[int, float, float]] = []
    best_val, best_epoch, best_state = np.inf, -1, None
    for epoch in range(1, cfg.epochs + 1):
        order = train_idx[shuffle_rng.permutation(len(train_idx))]
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            n_active = int((dataset.mask[b].sum(axis=1) > 0).sum())
            if n_active == 0 or len(b) * dataset.bag_size < 2:
                continue
            out = model.forward(dataset.features[b], "train", dropout_rng)
            loss, grad_S = partial_bce(out.S, dataset.labels[b], dataset.mask[b], cfg.loss)
            if not np.isfinite(loss):
                raise nd.NumericalError(f"non-finite training loss at epoch {epoch}")
            grads = model.backward(out.trace, grad_S)
            adam_step(opt, model.params, grads)
            model.mark_updated()
            total += loss * n_active
            count += n_active
        train_loss = total / max(count, 1)
        val_loss = evaluate_loss(model, dataset, val_idx, cfg.loss, cfg.batch_size)
        if not np.isfinite(val_loss):
            raise nd.NumericalError(f"non-finite validation loss at epoch {epoch}")
        history.append((epoch, train_loss, val_loss))
        log.debug("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_state = ({k: v.copy() for k, v in model.params.items()},
                          {k: v.copy() for k, v in model.buffers.items()})
            if cfg.checkpoint_dir is not None:
                _write_checkpoint(model, best_state, cfg, dataset, epoch, val_loss)

    model.params, model.buffers = best_state
    round_to_f32(model)
    return TrainResult(model, history, best_epoch, best_val, cfg)


def _write_checkpoint(model, state, cfg: TrainConfig, dataset: Dataset, epoch: int, val_loss: float):
    live = model.params, model.buffers
    model.params, model.buffers = state
    try:
        save_checkpoint(
            model, cfg.checkpoint_dir,
            bag_size=dataset.bag_size, feature_dim=dataset.feature_dim,
            label_names=list(dataset.label_names),
            seed=cfg.seed, epoch=epoch, val_loss=val_loss, config=cfg.to_dict(),
        )
    finally:
        model.params, model.buffers = live


def _train_job(args):
    model_kind, dataset, cfg = args
    return train(model_kind, dataset, cfg)


def run_seeds(model_kind: str, dataset: Dataset, cfg: TrainConfig, seeds, workers: int = 1,
              checkpoint_root=None) -> list[TrainResult]:
    """Independent ``train`` runs, one per seed, returned in seed order.

    With ``checkpoint_root`` each run checkpoints to ``<root>/seed_<s>``.
    ``workers > 1`` runs seeds in separate processes.
    """
    seeds = [int(s) for s in seeds]
    if len(set(seeds)) != len(seeds):
        raise ValueError("duplicate seeds")
    jobs = []
    for s in sorted(seeds):
        ckpt = None if checkpoint_root is None else str(Path(checkpoint_root) / f"seed_{s}")
        jobs.append((model_kind, dataset, dataclasses.replace(cfg, seed=s, checkpoint_dir=ckpt)))
    if workers <= 1:
        return [_train_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_job, jobs))
