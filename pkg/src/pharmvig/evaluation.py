"""Metrics and error analyses.

Macro F averages per-class F1 over every label in the confusion matrix,
O included for tagging. Precision and recall are 0 when their denominator is 0.
"""
from __future__ import annotations

from collections import Counter
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from sklearn.metrics import confusion_matrix as sk_confusion_matrix
from sklearn.metrics import log_loss

from pharmvig.finetune import EpochMetric

_FROZEN = ConfigDict(frozen=True)
SENTIMENT_LABELS = ("negative", "neutral", "positive")
_MENTION_TAGS = ("B", "I")


class ConfusionMatrix(BaseModel):
    """Rows are gold labels, columns predicted labels."""

    model_config = _FROZEN

    labels: tuple[str, ...]
    counts: tuple[tuple[int, ...], ...]

    @model_validator(mode="after")
    def _square(self) -> "ConfusionMatrix":
        n = len(self.labels)
        if len(self.counts) != n or any(len(row) != n for row in self.counts):
            raise ValueError(f"confusion counts must be {n}x{n}")
        if any(c < 0 for row in self.counts for c in row):
            raise ValueError("confusion counts must be nonnegative")
        return self

    @property
    def total(self) -> int:
        return sum(sum(row) for row in self.counts)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64).reshape(len(self.labels), len(self.labels))

    def count(self, gold: str, predicted: str) -> int:
        return self.counts[self.labels.index(gold)][self.labels.index(predicted)]


class ClassScores(BaseModel):
    model_config = _FROZEN

    precision: float = Field(ge=0.0, le=1.0)
    recall: float = Field(ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)


class EvalReport(BaseModel):
    model_config = _FROZEN

    accuracy: float = Field(ge=0.0, le=1.0)
    per_class: dict[str, ClassScores]
    macro_f: float = Field(ge=0.0, le=1.0)
    positive_label: Optional[str] = None
    positive_f: Optional[float] = Field(None, ge=0.0, le=1.0)
    mean_loss: Optional[float] = Field(None, ge=0.0)
    confusion: ConfusionMatrix


def confusion(golds: Sequence[str], preds: Sequence[str], labels: Sequence[str]) -> ConfusionMatrix:
    if len(golds) != len(preds):
        raise ValueError(f"{len(golds)} gold labels for {len(preds)} predictions")
    known = set(labels)
    unknown = sorted({x for x in (*golds, *preds) if x not in known})
    if unknown:
        raise ValueError(f"labels {unknown} are not among {list(labels)}")
    if not golds:
        counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    else:
        counts = sk_confusion_matrix(list(golds), list(preds), labels=list(labels))
    return ConfusionMatrix(labels=tuple(labels), counts=tuple(tuple(int(c) for c in row) for row in counts))


def metrics(cm: ConfusionMatrix, positive_label: Optional[str] = None) -> EvalReport:
    m = cm.as_array().astype(np.float64)
    total = m.sum()
    if total == 0:
        raise ValueError("cannot compute metrics on an empty confusion matrix")
    tp = np.diag(m)
    predicted, gold = m.sum(axis=0), m.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, gold, out=np.zeros_like(tp), where=gold > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)

    per_class = {
        label: ClassScores(precision=float(p), recall=float(r), f1=float(f))
        for label, p, r, f in zip(cm.labels, precision, recall, f1)
    }
    positive_f = None
    if positive_label is not None:
        if positive_label not in per_class:
            raise ValueError(f"positive label {positive_label!r} is not among {list(cm.labels)}")
        positive_f = per_class[positive_label].f1
    return EvalReport(
        accuracy=float(tp.sum() / total),
        per_class=per_class,
        macro_f=float(f1.mean()),
        positive_label=positive_label,
        positive_f=positive_f,
        confusion=cm,
    )


def cross_entropy(golds: Sequence[str], probabilities, labels: Sequence[str]) -> float:
    """Mean negative log-probability of the gold labels."""
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.shape != (len(golds), len(labels)):
        raise ValueError(f"probabilities must be ({len(golds)}, {len(labels)}), got {probs.shape}")
    # log_loss reads columns in sorted label order
    order = sorted(range(len(labels)), key=lambda k: labels[k])
    return float(log_loss(list(golds), probs[:, order], labels=[labels[k] for k in order]))


def evaluate(
    golds: Sequence[str],
    preds: Sequence[str],
    labels: Sequence[str],
    positive_label: Optional[str] = None,
    probabilities=None,
) -> EvalReport:
    report = metrics(confusion(golds, preds, labels), positive_label)
    if probabilities is None:
        return report
    return report.model_copy(update={"mean_loss": cross_entropy(golds, probabilities, labels)})


class SentimentErrorBreakdown(BaseModel):
    model_config = _FROZEN

    total_misclassified: int = Field(ge=0)
    neutral_involved: int = Field(ge=0)
    # gold negative predicted positive
    false_positive: int = Field(ge=0)
    # gold positive predicted negative
    false_negative: int = Field(ge=0)
    sampled_fp: tuple[str, ...] = ()
    sampled_fn: tuple[str, ...] = ()

    @model_validator(mode="after")
    def _partition(self) -> "SentimentErrorBreakdown":
        if self.neutral_involved + self.false_positive + self.false_negative != self.total_misclassified:
            raise ValueError("error categories must partition the misclassified examples")
        return self

    @property
    def neutral_share(self) -> float:
        return self.neutral_involved / self.total_misclassified if self.total_misclassified else 0.0


def sentiment_error_breakdown(
    golds: Sequence[str],
    preds: Sequence[str],
    ids: Sequence[str],
    sample_k: int = 50,
    seed: int = 13,
) -> SentimentErrorBreakdown:
    """Split 3-class errors into neutral confusions and polarity flips, and sample the flips."""
    if not len(golds) == len(preds) == len(ids):
        raise ValueError("golds, preds and ids must have equal lengths")
    unknown = sorted({x for x in (*golds, *preds) if x not in SENTIMENT_LABELS})
    if unknown:
        raise ValueError(f"labels {unknown} are not sentiment labels")

    total = neutral = 0
    fp_ids, fn_ids = [], []
    for gold, pred, example_id in zip(golds, preds, ids):
        if gold == pred:
            continue
        total += 1
        if gold == "neutral" or pred == "neutral":
            neutral += 1
        elif gold == "negative":
            fp_ids.append(example_id)
        else:
            fn_ids.append(example_id)

    rng = np.random.default_rng(seed)

    def sample(pool: list[str]) -> tuple[str, ...]:
        k = min(sample_k, len(pool))
        if k <= 0:
            return ()
        picked = rng.choice(len(pool), size=k, replace=False)
        return tuple(sorted(str(pool[i]) for i in picked))

    return SentimentErrorBreakdown(
        total_misclassified=total,
        neutral_involved=neutral,
        false_positive=len(fp_ids),
        false_negative=len(fn_ids),
        sampled_fp=sample(fp_ids),
        sampled_fn=sample(fn_ids),
    )


class TokenConfusionReport(BaseModel):
    model_config = _FROZEN

    # (word, count) pairs, most frequent first, ties alphabetical
    fn_word_counts: tuple[tuple[str, int], ...] = ()
    fp_word_counts: tuple[tuple[str, int], ...] = ()

    def fn_counts(self) -> dict[str, int]:
        return dict(self.fn_word_counts)

    def fp_counts(self) -> dict[str, int]:
        return dict(self.fp_word_counts)


def _ranked(counts: Counter) -> tuple[tuple[str, int], ...]:
    return tuple(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))


def token_confusion_report(
    gold_tag_seqs: Sequence[Sequence[str]],
    pred_tag_seqs: Sequence[Sequence[str]],
    word_seqs: Sequence[Sequence[str]],
) -> TokenConfusionReport:
    """Words missed as O (false negatives) and words wrongly tagged B/I (false positives)."""
    if not len(gold_tag_seqs) == len(pred_tag_seqs) == len(word_seqs):
        raise ValueError("gold, predicted and word sequences must be aligned")
    fn, fp = Counter(), Counter()
    for k, (golds, preds, words) in enumerate(zip(gold_tag_seqs, pred_tag_seqs, word_seqs)):
        if not len(golds) == len(preds) == len(words):
            raise ValueError(f"sequence {k}: {len(words)} words, {len(golds)} gold and {len(preds)} predicted tags")
        for gold, pred, word in zip(golds, preds, words):
            if gold in _MENTION_TAGS and pred == "O":
                fn[word.casefold()] += 1
            elif gold == "O" and pred in _MENTION_TAGS:
                fp[word.casefold()] += 1
    return TokenConfusionReport(fn_word_counts=_ranked(fn), fp_word_counts=_ranked(fp))


class EpochRow(BaseModel):
    model_config = _FROZEN

    epoch: int
    accuracy: Optional[float]
    loss: Optional[float]


def epoch_curve(epoch_metrics: Sequence[EpochMetric]) -> list[EpochRow]:
    """Dev accuracy and loss per epoch, ordered by epoch; epochs must be exactly 1..N."""
    epochs = [m.epoch for m in epoch_metrics]
    duplicated = sorted(e for e, c in Counter(epochs).items() if c > 1)
    if duplicated:
        raise ValueError(f"epochs {duplicated} recorded more than once")
    missing = sorted(set(range(1, max(epochs, default=0) + 1)) - set(epochs))
    if missing:
        raise ValueError(f"epochs {missing} missing from the record")
    return [
        EpochRow(epoch=m.epoch, accuracy=m.dev_accuracy, loss=m.dev_loss)
        for m in sorted(epoch_metrics, key=lambda m: m.epoch)
    ]
