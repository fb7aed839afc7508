"""Rationale quality metrics (sparsity, precision, recall, F1), classification
accuracy, and the end-of-run evaluation that ties them together.

Token-level metrics are micro-averaged over all real tokens in the corpus;
macro (per-example) means are carried alongside for diagnostics. All values
are percentages. Precision is defined as 0 when nothing is selected.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import Batch, Corpus, batch_iterator
from .losses import resolve_condition_labels
from .model import (ClassifierParams, GeneratorParams, Models, TeacherParams,
                    classifier_forward, generator_forward)


@dataclass
class MetricsRecord:
    sparsity: float
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    classification_accuracy: float | None = None
    macro_precision: float | None = None
    macro_recall: float | None = None
    macro_f1: float | None = None

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in self.__dict__.items() if v is not None},
                          sort_keys=True)


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def rationale_metrics(predicted: Sequence[Sequence[int]],
                      gold: Sequence[Sequence[int]]) -> MetricsRecord:
    """Compare predicted and gold masks token by token.

    Masks are per-example sequences over real tokens only (no padding).
    """
    if len(predicted) != len(gold):
        raise ValueError(f"got {len(predicted)} predictions for {len(gold)} gold masks")
    tp = fp = fn = selected = total = 0
    macro_p, macro_r, macro_f = [], [], []
    for i, (pred, ref) in enumerate(zip(predicted, gold)):
        if len(pred) != len(ref):
            raise ValueError(
                f"example {i}: mask length {len(pred)} != gold length {len(ref)}")
        pred = np.asarray(pred, dtype=int)
        ref = np.asarray(ref, dtype=int)
        tp_i = int(((pred == 1) & (ref == 1)).sum())
        fp_i = int(((pred == 1) & (ref == 0)).sum())
        fn_i = int(((pred == 0) & (ref == 1)).sum())
        tp, fp, fn = tp + tp_i, fp + fp_i, fn + fn_i
        selected += int(pred.sum())
        total += len(pred)
        p_i = 100.0 * tp_i / (tp_i + fp_i) if tp_i + fp_i else 0.0
        r_i = 100.0 * tp_i / (tp_i + fn_i) if tp_i + fn_i else 0.0
        macro_p.append(p_i)
        macro_r.append(r_i)
        macro_f.append(_f1(p_i, r_i))
    precision = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    recall = 100.0 * tp / (tp + fn) if tp + fn else 0.0
    return MetricsRecord(
        sparsity=100.0 * selected / total if total else 0.0,
        precision=precision, recall=recall, f1=_f1(precision, recall),
        macro_precision=float(np.mean(macro_p)) if macro_p else 0.0,
        macro_recall=float(np.mean(macro_r)) if macro_r else 0.0,
        macro_f1=float(np.mean(macro_f)) if macro_f else 0.0,
    )


@dataclass
class EvalConfig:
    label_source: str = "none"
    threshold: float = 0.5
    batch_size: int = 64


def predict_masks(generator: GeneratorParams, teacher: TeacherParams | None,
                  corpus: Corpus, config: EvalConfig) -> list[list[int]]:
    """Threshold-mode masks for every example, in corpus order."""
    masks: list[list[int] | None] = [None] * len(corpus)
    models = Models(generator=generator, teacher=teacher)
    with ad.no_grad():
        for batch in batch_iterator(corpus, config.batch_size, 0, 0, shuffle=False):
            labels = resolve_condition_labels(batch, models, config.label_source)
            _, z = generator_forward(batch, generator, labels=labels,
                                     threshold=config.threshold)
            for row, length, idx in zip(z.data, batch.lengths, batch.indices):
                masks[idx] = [int(v) for v in row[:length]]
    return masks  # type: ignore[return-value]


def classification_accuracy(models: Models, corpus: Corpus,
                            mask_source: str = "generator",
                            config: EvalConfig | None = None) -> float:
    """Percent of argmax-correct predictions; ties go to the lower class id.

    ``mask_source`` is "generator" for rationale inputs or "all_ones" for
    full text.
    """
    if len(corpus) == 0:
        raise ValueError("cannot compute accuracy on an empty corpus")
    if mask_source not in ("generator", "all_ones"):
        raise ValueError(f"unknown mask_source {mask_source!r}")
    config = config or EvalConfig()
    correct = 0
    with ad.no_grad():
        for batch in batch_iterator(corpus, config.batch_size, 0, 0, shuffle=False):
            if mask_source == "generator":
                labels = resolve_condition_labels(batch, models, config.label_source)
                _, z = generator_forward(batch, models.generator, labels=labels,
                                         threshold=config.threshold)
            else:
                z = np.ones_like(batch.valid)
            _, probs = classifier_forward(batch, z, models.classifier)
            correct += int((probs.data.argmax(axis=-1) == batch.labels).sum())
    return 100.0 * correct / len(corpus)


def evaluate_run(generator: GeneratorParams, classifier: ClassifierParams,
                 teacher: TeacherParams | None, corpus: Corpus,
                 config: EvalConfig | None = None,
                 ) -> tuple[MetricsRecord, list[list[int]]]:
    """Deterministic evaluation: threshold masks, token metrics when gold
    rationales exist, and rationale-input classification accuracy."""
    config = config or EvalConfig()
    masks = predict_masks(generator, teacher, corpus, config)
    models = Models(generator=generator, classifier=classifier, teacher=teacher)
    accuracy = classification_accuracy(models, corpus, "generator", config)

    gold_pairs = [(m, e.gold_rationale) for m, e in zip(masks, corpus)
                  if e.gold_rationale is not None]
    if gold_pairs:
        record = rationale_metrics([p for p, _ in gold_pairs],
                                   [g for _, g in gold_pairs])
    else:
        total = sum(len(m) for m in masks)
        chosen = sum(int(sum(m)) for m in masks)
        record = MetricsRecord(sparsity=100.0 * chosen / total if total else 0.0)
    record.classification_accuracy = accuracy
    return record, masks
