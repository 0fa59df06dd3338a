"""Attention-pooled MIL classifier and its two baselines.

``AttentionMIL`` (ATT) embeds every instance with three blocks of
affine -> batch norm -> ReLU -> dropout plus a skip connection from the input,
then produces per-label instance probabilities ``f`` and attention weights
``w = sigmoid(v.h) / sum_r sigmoid(v.h_r)``; the bag probability is
``S = sum_r w_r f_r``.

``MeanPoolMIL`` (FC_T) is the same network with uniform weights ``1/R``.
``FlatMLP`` (FC) flattens the bag and applies a 3-layer leaky-ReLU MLP.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndcore as nd
from .dataio.npy import load_npy, save_npy

DEFAULT_DIM = 128
DEFAULT_DROPOUT = 0.6
N_BLOCKS = 3
WEIGHT_SUM_TOL = 1e-6


class StaleTraceError(RuntimeError):
    """A forward trace was used after the parameters it was computed with changed."""


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class ForwardTrace:
    mode: str
    version: int
    x: np.ndarray  # flattened model input
    blocks: list[dict] = field(default_factory=list)
    h: np.ndarray | None = None
    f: np.ndarray | None = None
    attn_act: np.ndarray | None = None
    w: np.ndarray | None = None
    S: np.ndarray | None = None
    shape: tuple[int, ...] = ()


@dataclass
class Output:
    S: np.ndarray  # (B, L) bag probabilities
    f: np.ndarray | None  # (B, R, L) instance probabilities
    w: np.ndarray | None  # (B, R, L) attention weights
    trace: ForwardTrace | None


class _Model:
    kind = ""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.version = 0

    def mark_updated(self) -> None:
        self.version += 1

    def census(self) -> int:
        return parameter_census(self.params)

    def hyper(self) -> dict:
        raise NotImplementedError

    def _check_trace(self, trace: ForwardTrace) -> None:
        if trace is None or trace.mode != "train":
            raise ValueError("backward needs the trace of a train-mode forward")
        if trace.version != self.version:
            raise StaleTraceError("trace predates a parameter update")

    def zero_like_params(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


def parameter_census(params: dict[str, np.ndarray]) -> int:
    """Number of learnable scalars (running statistics are buffers, not params)."""
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------------------
# instance-level building blocks


def embed_instances(model: "_EmbeddingMIL", x: np.ndarray, mode: str, rng):
    """Map (B, R, D) instances to (B, R, D) embeddings; returns (h, trace)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected (B, R, D) input, got shape {x.shape}")
    b, r, d = x.shape
    if d != model.dim:
        raise ValueError(f"feature dim {d} != model dim {model.dim} (skip connection needs equal dims)")
    if mode == "train" and b * r < 2:
        raise ValueError("train mode needs at least 2 instances in the batch")
    flat = x.reshape(b * r, d)
    trace = ForwardTrace(mode=mode, version=model.version, x=flat, shape=(b, r, d))
    a = flat
    for i in range(1, N_BLOCKS + 1):
        p = f"embed{i}."
        pre = nd.affine_forward(a, model.params[p + "w"], model.params[p + "b"])
        state = model.bn_state(i)
        normed, cache = nd.batchnorm_forward(pre, state, mode)
        if mode == "train":
            model.buffers[p + "running_mean"] = state.running_mean
            model.buffers[p + "running_var"] = state.running_var
        act = nd.relu(normed)
        out, mask = nd.dropout(act, model.dropout, rng, mode)
        trace.blocks.append({"input": a, "bn": cache, "normed": normed, "mask": mask})
        a = out
    h = a + flat
    trace.h = h
    return h.reshape(b, r, d), trace


def instance_scores(params: dict[str, np.ndarray], h: np.ndarray) -> np.ndarray:
    b, r, d = h.shape
    z = nd.affine_forward(h.reshape(b * r, d), params["score.w"], params["score.b"])
    return nd.sigmoid(z).reshape(b, r, -1)


def _attention_activations(params, h: np.ndarray) -> np.ndarray:
    b, r, d = h.shape
    z = nd.affine_forward(h.reshape(b * r, d), params["attn.w"], params["attn.b"])
    return nd.sigmoid(z).reshape(b, r, -1)


def normalize_attention(act: np.ndarray) -> np.ndarray:
    """Scale positive activations (B, R, L) so they sum to one over R."""
    return act / act.sum(axis=1, keepdims=True)


def attention_weights(params: dict[str, np.ndarray], h: np.ndarray) -> np.ndarray:
    return normalize_attention(_attention_activations(params, h))


def bag_scores(f: np.ndarray, w: np.ndarray) -> np.ndarray:
    if f.shape != w.shape:
        raise ValueError(f"instance scores {f.shape} and weights {w.shape} differ in shape")
    err = np.abs(w.sum(axis=1) - 1.0)
    if err.size and err.max() > WEIGHT_SUM_TOL:
        raise ValueError(f"attention weights do not sum to 1 (max deviation {err.max():.3g})")
    # dividing by the (unit) weight sum removes its rounding error, so a bag of
    # identical scores pools back to exactly that score
    return (w * f).sum(axis=1) / w.sum(axis=1)


# ---------------------------------------------------------------------------
# models


class _EmbeddingMIL(_Model):
    uses_attention = True

    def __init__(self, n_labels: int, dim: int = DEFAULT_DIM, dropout: float = DEFAULT_DROPOUT, seed: int = 0):
        super().__init__()
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        self.n_labels, self.dim, self.dropout = int(n_labels), int(dim), float(dropout)
        rng = nd.make_rng(seed)
        for i in range(1, N_BLOCKS + 1):
            p = f"embed{i}."
            self.params[p + "w"] = glorot_uniform(rng, dim, dim)
            self.params[p + "b"] = np.zeros(dim)
            self.params[p + "gamma"] = np.ones(dim)
            self.params[p + "beta"] = np.zeros(dim)
            self.buffers[p + "running_mean"] = np.zeros(dim)
            self.buffers[p + "running_var"] = np.ones(dim)
        self.params["score.w"] = glorot_uniform(rng, dim, n_labels)
        self.params["score.b"] = np.zeros(n_labels)
        if self.uses_attention:
            self.params["attn.w"] = glorot_uniform(rng, dim, n_labels)
            self.params["attn.b"] = np.zeros(n_labels)

    def hyper(self) -> dict:
        return {"n_labels": self.n_labels, "dim": self.dim, "dropout": self.dropout}

    def bn_state(self, i: int) -> nd.BatchNormState:
        p = f"embed{i}."
        return nd.BatchNormState(
            gamma=self.params[p + "gamma"],
            beta=self.params[p + "beta"],
            running_mean=self.buffers[p + "running_mean"],
            running_var=self.buffers[p + "running_var"],
        )

    def _weights(self, h: np.ndarray, trace: ForwardTrace):
        act = _attention_activations(self.params, h)
        trace.attn_act = act
        return normalize_attention(act)

    def forward(self, x: np.ndarray, mode: str = "eval", rng=None) -> Output:
        h, trace = embed_instances(self, x, mode, rng)
        f = instance_scores(self.params, h)
        w = self._weights(h, trace)
        S = bag_scores(f, w)
        nd.check_finite(S, "bag scores")
        trace.f, trace.w, trace.S = f, w, S
        return Output(S, f, w, trace if mode == "train" else None)

    def backward(self, trace: ForwardTrace, grad_S: np.ndarray) -> dict[str, np.ndarray]:
        self._check_trace(trace)
        b, r, d = trace.shape
        grads: dict[str, np.ndarray] = {}
        g = np.asarray(grad_S, dtype=np.float64)[:, None, :]  # (B, 1, L)
        f, w = trace.f, trace.w
        n_inst = b * r

        # S = sum_r w_r f_r
        grad_f = g * w
        dz_f = (grad_f * f * (1.0 - f)).reshape(n_inst, -1)
        grad_h, grads["score.w"], grads["score.b"] = nd.affine_backward(dz_f, trace.h, self.params["score.w"])

        if self.uses_attention:
            # w_r = a_r / sum a  =>  dL/da_r = (dL/dw_r - sum_k dL/dw_k w_k) / sum a
            grad_w = g * f
            a = trace.attn_act
            total = a.sum(axis=1, keepdims=True)
            grad_a = (grad_w - (grad_w * w).sum(axis=1, keepdims=True)) / total
            dz_a = (grad_a * a * (1.0 - a)).reshape(n_inst, -1)
            gh, grads["attn.w"], grads["attn.b"] = nd.affine_backward(dz_a, trace.h, self.params["attn.w"])
            grad_h = grad_h + gh

        # skip connection passes grad_h straight to the input, which has no params
        grad_out = grad_h
        for i in range(N_BLOCKS, 0, -1):
            p = f"embed{i}."
            blk = trace.blocks[i - 1]
            g_act = grad_out * blk["mask"]
            g_norm = nd.relu_backward(g_act, blk["normed"])
            g_pre, grads[p + "gamma"], grads[p + "beta"] = nd.batchnorm_backward(g_norm, blk["bn"])
            grad_out, grads[p + "w"], grads[p + "b"] = nd.affine_backward(g_pre, blk["input"], self.params[p + "w"])
        return grads


class AttentionMIL(_EmbeddingMIL):
    kind = "att"
    uses_attention = True


class MeanPoolMIL(_EmbeddingMIL):
    kind = "fc_t"
    uses_attention = False

    def _weights(self, h: np.ndarray, trace: ForwardTrace):
        b, r, _ = h.shape
        return np.full((b, r, self.n_labels), 1.0 / r)


class FlatMLP(_Model):
    kind = "fc"

    def __init__(
        self,
        n_labels: int,
        bag_size: int = 10,
        dim: int = DEFAULT_DIM,
        hidden: tuple[int, ...] = (512, 512),
        dropout: float = DEFAULT_DROPOUT,
        slope: float = 0.01,
        seed: int = 0,
    ):
        super().__init__()
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        self.n_labels, self.bag_size, self.dim = int(n_labels), int(bag_size), int(dim)
        self.hidden = tuple(int(hdim) for hdim in hidden)
        self.dropout, self.slope = float(dropout), float(slope)
        rng = nd.make_rng(seed)
        sizes = [self.bag_size * self.dim, *self.hidden, self.n_labels]
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
            self.params[f"fc{i}.w"] = glorot_uniform(rng, fan_in, fan_out)
            self.params[f"fc{i}.b"] = np.zeros(fan_out)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def hyper(self) -> dict:
        return {
            "n_labels": self.n_labels, "bag_size": self.bag_size, "dim": self.dim,
            "hidden": list(self.hidden), "dropout": self.dropout, "slope": self.slope,
        }

    def forward(self, x: np.ndarray, mode: str = "eval", rng=None) -> Output:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1:] != (self.bag_size, self.dim):
            raise ValueError(f"expected (B, {self.bag_size}, {self.dim}) input, got {x.shape}")
        a = x.reshape(x.shape[0], -1)
        trace = ForwardTrace(mode=mode, version=self.version, x=a, shape=x.shape)
        for i in range(1, self.n_layers):
            pre = nd.affine_forward(a, self.params[f"fc{i}.w"], self.params[f"fc{i}.b"])
            act = nd.leaky_relu(pre, self.slope)
            out, mask = nd.dropout(act, self.dropout, rng, mode)
            trace.blocks.append({"input": a, "pre": pre, "mask": mask})
            a = out
        last = self.n_layers
        trace.blocks.append({"input": a})
        S = nd.sigmoid(nd.affine_forward(a, self.params[f"fc{last}.w"], self.params[f"fc{last}.b"]))
        nd.check_finite(S, "bag scores")
        trace.S = S
        return Output(S, None, None, trace if mode == "train" else None)

    def backward(self, trace: ForwardTrace, grad_S: np.ndarray) -> dict[str, np.ndarray]:
        self._check_trace(trace)
        grads: dict[str, np.ndarray] = {}
        S = trace.S
        last = self.n_layers
        dz = np.asarray(grad_S, dtype=np.float64) * S * (1.0 - S)
        g, grads[f"fc{last}.w"], grads[f"fc{last}.b"] = nd.affine_backward(
            dz, trace.blocks[-1]["input"], self.params[f"fc{last}.w"]
        )
        for i in range(last - 1, 0, -1):
            blk = trace.blocks[i - 1]
            g = nd.leaky_relu_backward(g * blk["mask"], blk["pre"], self.slope)
            g, grads[f"fc{i}.w"], grads[f"fc{i}.b"] = nd.affine_backward(g, blk["input"], self.params[f"fc{i}.w"])
        return grads


MODELS = {"att": AttentionMIL, "fc_t": MeanPoolMIL, "fc": FlatMLP}


def build_model(kind: str, n_labels: int, bag_size: int, dim: int, seed: int = 0,
                dropout: float = DEFAULT_DROPOUT, fc_hidden=(512, 512)) -> _Model:
    if kind not in MODELS:
        raise ValueError(f"unknown model kind {kind!r}; choose from {sorted(MODELS)}")
    if kind == "fc":
        return FlatMLP(n_labels, bag_size=bag_size, dim=dim, hidden=fc_hidden, dropout=dropout, seed=seed)
    return MODELS[kind](n_labels, dim=dim, dropout=dropout, seed=seed)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: _Model, directory, **meta) -> None:
    """Write manifest.json plus one <f4 NPY per parameter and buffer."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = []
    for group, store in (("param", model.params), ("buffer", model.buffers)):
        for name, arr in store.items():
            fname = f"{name}.npy"
            save_npy(d / fname, arr.astype("<f4"))
            tensors.append({"name": name, "kind": group, "shape": list(arr.shape), "file": fname})
    manifest = {
        "architecture": model.kind,
        "hyper": model.hyper(),
        "census": model.census(),
        **meta,
        "tensors": tensors,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def load_checkpoint(directory) -> tuple[_Model, dict]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"{d}: not a checkpoint (no manifest.json)") from None
    kind, hyper = manifest["architecture"], dict(manifest["hyper"])
    if kind == "fc":
        hyper["hidden"] = tuple(hyper["hidden"])
        model = FlatMLP(**hyper)
    else:
        model = MODELS[kind](**hyper)
    for t in manifest["tensors"]:
        arr = load_npy(d / t["file"]).astype(np.float64)
        if list(arr.shape) != t["shape"]:
            raise ValueError(f"{t['file']}: shape {arr.shape} != manifest {t['shape']}")
        store = model.params if t["kind"] == "param" else model.buffers
        if t["name"] not in store:
            raise ValueError(f"checkpoint tensor {t['name']!r} unknown to {kind}")
        store[t["name"]] = arr
    model.mark_updated()
    return model, manifest


def round_to_f32(model: _Model) -> None:
    """Quantize all tensors to float32 precision, as a checkpoint round trip would."""
    for store in (model.params, model.buffers):
        for k, v in store.items():
            store[k] = v.astype(np.float32).astype(np.float64)
    model.mark_updated()
