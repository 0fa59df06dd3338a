"""Two-level macro metrics, seed aggregation and attention export."""
from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

from .dataio import Dataset

METRIC_COLUMNS = ("pos_P", "pos_R", "pos_F1", "neg_P", "neg_R", "neg_F1", "macro_P", "macro_R", "macro_F1")
OVERALL = "OVERALL"


class MetricWarning(UserWarning):
    """A metric had a zero denominator and was set to 0."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def binarize(S: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """1 where the score is strictly above the threshold."""
    return (np.asarray(S) > threshold).astype(np.uint8)


def confusion(y_true: np.ndarray, y_pred: np.ndarray) -> ConfusionCounts:
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    return ConfusionCounts(
        tp=int(np.sum(y_true & y_pred)),
        fp=int(np.sum(~y_true & y_pred)),
        tn=int(np.sum(~y_true & ~y_pred)),
        fn=int(np.sum(y_true & ~y_pred)),
    )


def _ratio(num: int, den: int, what: str) -> float:
    if den == 0:
        warnings.warn(f"{what}: zero denominator, reported as 0", MetricWarning, stacklevel=3)
        return 0.0
    return num / den


def class_prf(counts: ConfusionCounts, cls: str = "positive") -> tuple[float, float, float]:
    if cls == "positive":
        hit, false_alarm, miss = counts.tp, counts.fp, counts.fn
    elif cls == "negative":
        hit, false_alarm, miss = counts.tn, counts.fn, counts.fp
    else:
        raise ValueError(f"class must be 'positive' or 'negative', got {cls!r}")
    p = _ratio(hit, hit + false_alarm, f"{cls} precision")
    r = _ratio(hit, hit + miss, f"{cls} recall")
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f1


def instrument_metrics(counts: ConfusionCounts) -> dict[str, float]:
    """Positive- and negative-class P/R/F1 and their unweighted means."""
    pos = class_prf(counts, "positive")
    neg = class_prf(counts, "negative")
    row = dict(zip(METRIC_COLUMNS[:3], pos)) | dict(zip(METRIC_COLUMNS[3:6], neg))
    row.update(macro_P=(pos[0] + neg[0]) / 2, macro_R=(pos[1] + neg[1]) / 2, macro_F1=(pos[2] + neg[2]) / 2)
    return row


@dataclass
class EvalReport:
    label_names: tuple[str, ...]
    per_label: dict[str, dict[str, float]]
    overall: dict[str, float]
    counts: dict[str, ConfusionCounts] = field(default_factory=dict)
    threshold: float = 0.5
    seed: int | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "label", *METRIC_COLUMNS])
        seed = "" if self.seed is None else self.seed
        for name in self.label_names:
            w.writerow([seed, name, *(repr(self.per_label[name][c]) for c in METRIC_COLUMNS)])
        w.writerow([seed, OVERALL, *(repr(self.overall[c]) for c in METRIC_COLUMNS)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        per_label, overall, seed = {}, None, None
        for row in rows:
            vals = {c: float(row[c]) for c in METRIC_COLUMNS}
            if row["seed"] != "":
                seed = int(row["seed"])
            if row["label"] == OVERALL:
                overall = vals
            else:
                per_label[row["label"]] = vals
        if overall is None:
            raise ValueError("report CSV has no OVERALL row")
        return cls(tuple(per_label), per_label, overall, seed=seed)


def metrics_from_predictions(y_true, y_pred, mask, label_names, threshold=0.5, seed=None) -> EvalReport:
    """Metrics over observed entries of (N, L) label/prediction arrays."""
    y_true, y_pred, mask = np.asarray(y_true), np.asarray(y_pred), np.asarray(mask, dtype=bool)
    per_label, counts = {}, {}
    for j, name in enumerate(label_names):
        obs = mask[:, j]
        c = confusion(y_true[obs, j], y_pred[obs, j])
        counts[name] = c
        per_label[name] = instrument_metrics(c)
    overall = {c: sum(per_label[n][c] for n in label_names) / len(label_names) for c in METRIC_COLUMNS}
    return EvalReport(tuple(label_names), per_label, overall, counts, threshold, seed)


def predict(model, dataset: Dataset, idx: np.ndarray, batch_size: int = 512):
    """Eval-mode outputs for the given bags: (S, f, w); f and w are None for FC."""
    S, f, w = [], [], []
    for start in range(0, len(idx), batch_size):
        out = model.forward(dataset.features[idx[start : start + batch_size]], "eval")
        S.append(out.S)
        f.append(out.f)
        w.append(out.w)
    S = np.concatenate(S)
    if f[0] is None:
        return S, None, None
    return S, np.concatenate(f), np.concatenate(w)


def evaluate(model, dataset: Dataset, split: str = "test", threshold: float = 0.5, seed=None) -> EvalReport:
    idx = dataset.indices(split)
    if len(idx) == 0:
        raise ValueError(f"split {split!r} is empty")
    S, _, _ = predict(model, dataset, idx)
    return metrics_from_predictions(
        dataset.labels[idx], binarize(S, threshold), dataset.mask[idx], dataset.label_names, threshold, seed
    )


def aggregate_seeds(reports: list[EvalReport]) -> list[dict]:
    """Box-plot statistics per metric across seeds (linear-interpolation quartiles).

    Rows cover the overall metrics, then the instrument-wise macro F1 of each label.
    """
    if not reports:
        raise ValueError("need at least one report")
    names = reports[0].label_names
    for r in reports[1:]:
        if r.label_names != names:
            raise ValueError("reports have different label vocabularies")
    series: dict[str, list[float]] = {}
    for c in METRIC_COLUMNS:
        series[f"{OVERALL}/{c}"] = [r.overall[c] for r in reports]
    for n in names:
        series[f"{n}/macro_F1"] = [r.per_label[n]["macro_F1"] for r in reports]
    rows = []
    for metric, values in series.items():
        v = np.asarray(values, dtype=np.float64)
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        rows.append({"metric": metric, "min": float(v.min()), "q1": float(q1), "median": float(med),
                     "q3": float(q3), "max": float(v.max()), "mean": float(v.mean())})
    return rows


def aggregation_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    cols = ["metric", "min", "q1", "median", "q3", "max", "mean"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow([row["metric"], *(repr(row[c]) for c in cols[1:])])
    return buf.getvalue()


def export_attention(model, dataset: Dataset, sample_keys) -> dict:
    """Per (sample, label) instance scores, attention weights and bag score.

    Schema::

        {"architecture": str, "label_names": [str],
         "records": [{"sample_key": str, "label": str, "bag_score": float,
                      "instance_scores": [float] * R, "attention": [float] * R}]}
    """
    if getattr(model, "kind", None) == "fc":
        raise ValueError("the FC baseline has no instance-level outputs")
    idx = np.array([dataset.index_of(k) for k in sample_keys], dtype=np.int64)
    S, f, w = predict(model, dataset, idx)
    records = []
    for i, key in enumerate(sample_keys):
        for j, name in enumerate(dataset.label_names):
            records.append({
                "sample_key": key,
                "label": name,
                "bag_score": float(S[i, j]),
                "instance_scores": [float(v) for v in f[i, :, j]],
                "attention": [float(v) for v in w[i, :, j]],
            })
    return {"architecture": model.kind, "label_names": list(dataset.label_names), "records": records}


def attention_json(export: dict) -> str:
    return json.dumps(export, indent=2) + "\n"


def attention_svg(records: list[dict], cell_width: int = 24, row_height: int = 18, label_width: int = 120) -> str:
    """SVG 1.1 of one bar strip per record; cell opacity is w / max(w) within the strip."""
    n_cells = max(len(r["attention"]) for r in records)
    width = label_width + n_cells * cell_width + 8
    height = len(records) * (row_height + 4) + 8
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">',
    ]
    for k, rec in enumerate(records):
        y = 4 + k * (row_height + 4)
        w = np.asarray(rec["attention"], dtype=np.float64)
        peak = w.max() if w.size and w.max() > 0 else 1.0
        out.append(f'<g class="strip" data-label="{escape(rec["label"])}">')
        out.append(
            f'<text x="4" y="{y + row_height - 5}" font-family="sans-serif" font-size="11">'
            f'{escape(rec["label"])} ({rec["bag_score"]:.2f})</text>'
        )
        for r, wr in enumerate(w):
            x = label_width + r * cell_width
            out.append(
                f'<rect class="cell" x="{x}" y="{y}" width="{cell_width - 1}" height="{row_height}" '
                f'fill="#1f4e9c" fill-opacity="{wr / peak:.4f}"><title>{wr:.4f}</title></rect>'
            )
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
