"""Soft-credit accuracy, per-category breakdown and the in-/out-of-distribution gap."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import CATEGORIES, Split
from .errors import LeakageError, ValidationError
from .model import bag_of_words, forward
from .training import TrainedModel, split_batch

METRICS_SCHEMA_VERSION = 1


@dataclass
class MetricsReport:
    overall: float
    yesno: float | None
    number: float | None
    other: float | None
    n_evaluated: int
    category_counts: dict = field(default_factory=dict)
    split_name: str = ""
    gap: float | None = None
    head: str = "joint"
    config: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"schema_version": METRICS_SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d.pop("schema_version", None)
        return cls(**d)

    def category(self, name: str) -> float | None:
        return getattr(self, name)


def predict_scores(model: TrainedModel, split: Split, head: str | None = None,
                   batch_size: int = 512) -> np.ndarray:
    """Inference-time scores of the chosen head, shape [N, |A|]."""
    head = head or model.head
    arr = split.arrays()
    bow_all = bag_of_words(arr["tokens"], model.model_config.vocab_size)
    out_rows = []
    key = {"joint": "z_p", "content": "z_cn", "base": "z_base", "context": "z_cx"}[head]
    for start in range(0, len(split), batch_size):
        idx = np.arange(start, min(len(split), start + batch_size))
        out, _ = forward(model.params, model.model_config,
                         split_batch(split, idx, bow_all, model.bias_table), training=False)
        out_rows.append(getattr(out, key))
    return np.concatenate(out_rows)


def score_predictions(scores: np.ndarray, split: Split, split_name: str | None = None,
                      head: str = "joint", config: dict | None = None) -> MetricsReport:
    """VQA-style soft credit: each instance earns y[argmax(scores)]."""
    arr = split.arrays()
    if scores.shape != arr["labels"].shape:
        raise ValidationError(f"scores shape {scores.shape} != labels {arr['labels'].shape}")
    pred = scores.argmax(axis=1)
    credit = arr["labels"][np.arange(len(split)), pred]
    cats = np.array([split.qtype_table.category_of(int(t)) for t in arr["qtypes"]])
    per_cat, counts = {}, {}
    for c in CATEGORIES:
        m = cats == c
        counts[c] = int(m.sum())
        per_cat[c] = float(100.0 * credit[m].mean()) if m.any() else None
    return MetricsReport(
        overall=float(100.0 * credit.mean()),
        yesno=per_cat["yesno"],
        number=per_cat["number"],
        other=per_cat["other"],
        n_evaluated=len(split),
        category_counts=counts,
        split_name=split_name or split.split_name,
        head=head,
        config=config or {},
    )


def evaluate(model: TrainedModel, split: Split, head: str | None = None) -> MetricsReport:
    if tuple(split.answer_space.answers) != tuple(model.answers):
        raise ValidationError("answer space of the split does not match the checkpoint")
    src = model.bias_table.source_split_name
    if src == split.split_name and split.split_name != model.train_split_name:
        raise LeakageError(f"bias table was estimated from the evaluation split {src!r}")
    head = head or model.head
    scores = predict_scores(model, split, head)
    return score_predictions(scores, split, head=head, config=model.train_config.to_dict())


def gap(in_distribution: MetricsReport, shifted: MetricsReport) -> float:
    """Overall accuracy lost under the prior shift (smaller is better)."""
    return in_distribution.overall - shifted.overall
