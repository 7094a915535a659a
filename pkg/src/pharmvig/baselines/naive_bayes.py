"""Multinomial Naive Bayes over n-gram counts."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import logsumexp
from sklearn.feature_extraction import DictVectorizer
from sklearn.naive_bayes import MultinomialNB

from pharmvig.persistence import model_envelope, open_envelope


@dataclass(frozen=True)
class NaiveBayesModel:
    classes: tuple[str, ...]
    vocabulary: tuple[str, ...]
    class_log_priors: np.ndarray  # (classes,)
    feature_log_prob: np.ndarray  # (classes, vocabulary)
    # log(alpha / (total(c) + alpha * |V|)), the smoothed mass of an unseen n-gram
    unseen_log_prob: np.ndarray  # (classes,)
    alpha: float

    @cached_property
    def _columns(self) -> dict[str, int]:
        return {gram: j for j, gram in enumerate(self.vocabulary)}

    def log_likelihood(self, gram: str, label: str) -> float:
        c = self.classes.index(label)
        j = self._columns.get(gram)
        return float(self.unseen_log_prob[c] if j is None else self.feature_log_prob[c, j])

    def to_dict(self) -> dict:
        return model_envelope("naive_bayes", {
            "alpha": self.alpha,
            "classes": list(self.classes),
            "vocabulary": list(self.vocabulary),
            "class_log_priors": self.class_log_priors.tolist(),
            "feature_log_prob": self.feature_log_prob.tolist(),
            "unseen_log_prob": self.unseen_log_prob.tolist(),
        })

    @classmethod
    def from_dict(cls, data: dict) -> "NaiveBayesModel":
        data = open_envelope(data, "naive_bayes")
        n_classes, n_vocab = len(data["classes"]), len(data["vocabulary"])
        return cls(
            classes=tuple(data["classes"]),
            vocabulary=tuple(data["vocabulary"]),
            class_log_priors=np.asarray(data["class_log_priors"], dtype=np.float64),
            feature_log_prob=np.asarray(data["feature_log_prob"], dtype=np.float64).reshape(n_classes, n_vocab),
            unseen_log_prob=np.asarray(data["unseen_log_prob"], dtype=np.float64),
            alpha=float(data["alpha"]),
        )


def nb_train(
    examples: Sequence[tuple[Mapping[str, int], str]],
    alpha: float = 1.0,
    classes: Optional[Sequence[str]] = None,
) -> NaiveBayesModel:
    """Fit add-alpha multinomial NB; priors come from class frequencies.

    `classes` declares the label set up front so a class with no training
    examples is caught instead of silently dropped.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    labels = [label for _, label in examples]
    present = sorted(set(labels))
    declared = sorted(set(classes)) if classes is not None else present
    empty = [c for c in declared if c not in present]
    if empty:
        raise ValueError(f"no training examples for class(es) {empty}")
    if len(declared) < 2:
        raise ValueError("naive Bayes needs at least two classes")
    unknown = [c for c in present if c not in declared]
    if unknown:
        raise ValueError(f"labels {unknown} are not among the declared classes")

    vectorizer = DictVectorizer(sort=True)
    X = vectorizer.fit_transform([dict(x) for x, _ in examples])
    if X.shape[1] == 0:
        raise ValueError("training examples contain no n-grams")
    nb = MultinomialNB(alpha=alpha, force_alpha=True).fit(X, labels)

    totals = nb.feature_count_.sum(axis=1)
    return NaiveBayesModel(
        classes=tuple(str(c) for c in nb.classes_),
        vocabulary=tuple(vectorizer.get_feature_names_out()),
        class_log_priors=nb.class_log_prior_.astype(np.float64),
        feature_log_prob=nb.feature_log_prob_.astype(np.float64),
        unseen_log_prob=np.log(alpha) - np.log(totals + alpha * X.shape[1]),
        alpha=float(alpha),
    )


def nb_predict(model: NaiveBayesModel, x: Mapping[str, int]) -> tuple[str, dict[str, float]]:
    """Return the argmax label and the normalized log-posterior of every class."""
    scores = model.class_log_priors.copy()
    columns = model._columns
    for gram, count in x.items():
        j = columns.get(gram)
        scores += count * (model.unseen_log_prob if j is None else model.feature_log_prob[:, j])
    log_post = scores - logsumexp(scores)
    return model.classes[int(np.argmax(log_post))], dict(zip(model.classes, log_post.tolist()))


def nb_predict_many(model: NaiveBayesModel, xs: Sequence[Mapping[str, int]]) -> tuple[list[str], np.ndarray]:
    labels, probs = [], np.zeros((len(xs), len(model.classes)))
    for i, x in enumerate(xs):
        label, log_post = nb_predict(model, x)
        labels.append(label)
        probs[i] = np.exp([log_post[c] for c in model.classes])
    return labels, probs
