"""
Linear-chain CRF over the B/I/O tag set.

Scores are unary (sum of feature weights for the tag at each position) plus
transition weights between consecutive tags. There are no start or stop
transitions. Training is seeded SGD on the L2-regularized conditional
log-likelihood with forward-backward marginals.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from pharmvig.errors import TrainingDivergedError
from pharmvig.persistence import model_envelope, open_envelope

logger = logging.getLogger(__name__)

TAGS = ("B", "I", "O")
TAG_INDEX = {tag: i for i, tag in enumerate(TAGS)}
# fold the lazy decay scale back into the weights before it underflows
_RESCALE_BELOW = 1e-6


def crf_features(words: Sequence[str], i: int) -> list[str]:
    if not 0 <= i < len(words):
        raise IndexError(f"position {i} outside a sentence of {len(words)} words")
    word = words[i]
    lower = word.lower()
    feats = ["bias", f"w0={lower}"]
    feats.append(f"w-1={words[i - 1].lower()}" if i > 0 else "BOS")
    feats.append(f"w+1={words[i + 1].lower()}" if i + 1 < len(words) else "EOS")
    if word[:1].isupper():
        feats.append("cap=1")
    if word.isupper():
        feats.append("allcaps=1")
    if word.isdigit():
        feats.append("digit=1")
    for k in (1, 2, 3):
        feats.append(f"pre{k}={lower[:k]}")
        feats.append(f"suf{k}={lower[-k:]}")
    return list(dict.fromkeys(feats))


@dataclass(frozen=True)
class CrfModel:
    features: tuple[str, ...]
    feature_weights: np.ndarray  # (features, tags)
    transition_weights: np.ndarray  # (previous tag, tag)
    l2: float = 0.0
    log_likelihood_history: tuple[float, ...] = ()

    tag_set = TAGS

    def __post_init__(self) -> None:
        if self.feature_weights.shape != (len(self.features), len(TAGS)):
            raise ValueError("feature_weights must be (features, 3)")
        if self.transition_weights.shape != (len(TAGS), len(TAGS)):
            raise ValueError("transition_weights must be 3x3")
        if not (np.all(np.isfinite(self.feature_weights)) and np.all(np.isfinite(self.transition_weights))):
            raise ValueError("CRF weights must be finite")

    @classmethod
    def zeros(cls, features: Sequence[str] = (), l2: float = 0.0) -> "CrfModel":
        features = tuple(sorted(set(features)))
        return cls(features, np.zeros((len(features), len(TAGS))), np.zeros((len(TAGS), len(TAGS))), l2)

    @cached_property
    def _rows(self) -> dict[str, int]:
        return {f: j for j, f in enumerate(self.features)}

    def weight(self, feature: str, tag: str) -> float:
        j = self._rows.get(feature)
        return 0.0 if j is None else float(self.feature_weights[j, TAG_INDEX[tag]])

    def feature_ids(self, words: Sequence[str]) -> list[np.ndarray]:
        """Row indices of the known features at every position; unknown ones are dropped."""
        rows = self._rows
        out = []
        for i in range(len(words)):
            ids = [rows[f] for f in crf_features(words, i) if f in rows]
            out.append(np.asarray(ids, dtype=np.int64))
        return out

    def unary_scores(self, words: Sequence[str]) -> np.ndarray:
        ids = self.feature_ids(words)
        if not ids:
            return np.zeros((0, len(TAGS)))
        return np.stack([self.feature_weights[i].sum(axis=0) for i in ids])

    def with_weights(self, feature_weights: np.ndarray, transition_weights: np.ndarray) -> "CrfModel":
        return replace(self, feature_weights=feature_weights, transition_weights=transition_weights)

    def to_dict(self) -> dict:
        return model_envelope("crf", {
            "tags": list(TAGS),
            "features": list(self.features),
            "feature_weights": self.feature_weights.ravel().tolist(),
            "transition_weights": self.transition_weights.ravel().tolist(),
            "l2": self.l2,
            "log_likelihood_history": list(self.log_likelihood_history),
        })

    @classmethod
    def from_dict(cls, data: dict) -> "CrfModel":
        data = open_envelope(data, "crf")
        if tuple(data["tags"]) != TAGS:
            raise ValueError(f"unsupported tag set {data['tags']}")
        features = tuple(data["features"])
        return cls(
            features=features,
            feature_weights=np.asarray(data["feature_weights"], dtype=np.float64).reshape(len(features), len(TAGS)),
            transition_weights=np.asarray(data["transition_weights"], dtype=np.float64).reshape(len(TAGS), len(TAGS)),
            l2=float(data["l2"]),
            log_likelihood_history=tuple(data.get("log_likelihood_history", ())),
        )


@dataclass(frozen=True)
class ForwardBackward:
    log_z_forward: float
    log_z_backward: float
    node_marginals: np.ndarray  # (T, tags)
    edge_marginals: np.ndarray  # (T-1, tags, tags)

    @property
    def log_z(self) -> float:
        return self.log_z_forward


@dataclass(frozen=True)
class CrfGradient:
    feature_weights: np.ndarray
    transition_weights: np.ndarray


def _forward_backward(unary: np.ndarray, trans: np.ndarray) -> ForwardBackward:
    T = unary.shape[0]
    alpha = np.zeros_like(unary)
    beta = np.zeros_like(unary)
    alpha[0] = unary[0]
    for t in range(1, T):
        alpha[t] = logsumexp(alpha[t - 1][:, None] + trans, axis=0) + unary[t]
    for t in range(T - 2, -1, -1):
        beta[t] = logsumexp(trans + (unary[t + 1] + beta[t + 1])[None, :], axis=1)
    log_z = float(logsumexp(alpha[-1]))
    log_z_back = float(logsumexp(unary[0] + beta[0]))

    node = np.exp(alpha + beta - log_z)
    edge = np.exp(
        alpha[:-1, :, None] + trans[None, :, :] + (unary[1:] + beta[1:])[:, None, :] - log_z
    )
    return ForwardBackward(log_z, log_z_back, node, edge)


def _gold_indices(words: Sequence[str], tags: Sequence[str]) -> np.ndarray:
    if not words:
        raise ValueError("CRF sequences must be nonempty")
    if len(words) != len(tags):
        raise ValueError(f"{len(tags)} tags for {len(words)} words")
    try:
        return np.asarray([TAG_INDEX[t] for t in tags], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"unknown tag {e.args[0]!r}")


def _score(unary: np.ndarray, trans: np.ndarray, gold: np.ndarray) -> float:
    return float(unary[np.arange(len(gold)), gold].sum() + trans[gold[:-1], gold[1:]].sum())


def crf_forward_backward(model: CrfModel, words: Sequence[str]) -> ForwardBackward:
    if not words:
        raise ValueError("CRF sequences must be nonempty")
    return _forward_backward(model.unary_scores(words), model.transition_weights)


def crf_sequence_score(model: CrfModel, words: Sequence[str], tags: Sequence[str]) -> float:
    """Unnormalized score of a tag sequence."""
    gold = _gold_indices(words, tags)
    return _score(model.unary_scores(words), model.transition_weights, gold)


def _sparse_gradient(W: np.ndarray, trans: np.ndarray, ids: list[np.ndarray], gold: np.ndarray, scale: float = 1.0):
    """Unregularized log-likelihood and its gradient restricted to the touched feature rows.

    The feature weights in effect are `scale * W`.
    """
    unary = scale * np.stack([W[i].sum(axis=0) for i in ids])
    fb = _forward_backward(unary, trans)
    ll = _score(unary, trans, gold) - fb.log_z

    lengths = [len(i) for i in ids]
    rows = np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)
    pos = np.repeat(np.arange(len(ids)), lengths)
    contrib = -fb.node_marginals[pos]
    contrib[np.arange(len(pos)), gold[pos]] += 1.0
    touched, inverse = np.unique(rows, return_inverse=True)
    grad_rows = np.zeros((len(touched), len(TAGS)))
    np.add.at(grad_rows, inverse, contrib)

    grad_trans = -fb.edge_marginals.sum(axis=0)
    np.add.at(grad_trans, (gold[:-1], gold[1:]), 1.0)
    return ll, touched, grad_rows, grad_trans


def crf_log_likelihood_and_gradient(
    model: CrfModel, words: Sequence[str], tags: Sequence[str]
) -> tuple[float, CrfGradient]:
    """log p(tags | words) - (l2/2)·||w||² and its exact gradient."""
    gold = _gold_indices(words, tags)
    W, trans = model.feature_weights, model.transition_weights
    ll, touched, grad_rows, grad_trans = _sparse_gradient(W, trans, model.feature_ids(words), gold)
    value = ll - 0.5 * model.l2 * (float(np.sum(W ** 2)) + float(np.sum(trans ** 2)))
    if not np.isfinite(value):
        raise TrainingDivergedError(f"CRF log-likelihood is {value}")

    grad_W = -model.l2 * W
    grad_W[touched] += grad_rows
    return value, CrfGradient(grad_W, grad_trans - model.l2 * trans)


def crf_train(
    corpus: Sequence[tuple[Sequence[str], Sequence[str]]],
    l2: float = 1e-4,
    epochs: int = 30,
    lr: float = 0.05,
    seed: int = 13,
) -> CrfModel:
    """Seeded SGD ascent; each step regularizes with l2/N so an epoch sums to the full objective.

    The weight decay of a step is folded into a running scale on the feature
    weights, so a step only writes the rows the sentence touches.
    """
    if not corpus:
        raise ValueError("cannot train a CRF on an empty corpus")
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")

    features = sorted({f for words, _ in corpus for i in range(len(words)) for f in crf_features(words, i)})
    model = CrfModel.zeros(features, l2=l2)
    prepared = [(model.feature_ids(words), _gold_indices(words, tags)) for words, tags in corpus]
    W = model.feature_weights.copy()
    trans = model.transition_weights.copy()
    n = len(prepared)
    decay = 1.0 - lr * l2 / n
    if decay <= 0:
        raise ValueError(f"lr * l2 / {n} must stay below 1")
    scale = 1.0
    rng = np.random.default_rng(seed)

    history = []
    for epoch in range(epochs):
        total = 0.0
        for k in rng.permutation(n):
            ids, gold = prepared[k]
            ll, touched, grad_rows, grad_trans = _sparse_gradient(W, trans, ids, gold, scale)
            if not np.isfinite(ll):
                raise TrainingDivergedError(f"CRF log-likelihood became {ll} in epoch {epoch + 1}")
            scale *= decay
            trans *= decay
            W[touched] += (lr / scale) * grad_rows
            if scale < _RESCALE_BELOW:
                W *= scale
                scale = 1.0
            trans += lr * grad_trans
            total += ll
        history.append(total / n)
        logger.debug("crf epoch %d: mean log-likelihood %.4f", epoch + 1, history[-1])
    W *= scale
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(trans))):
        raise TrainingDivergedError("CRF weights diverged; lower the learning rate")

    return replace(model, feature_weights=W, transition_weights=trans, log_likelihood_history=tuple(history))


def crf_decode(model: CrfModel, words: Sequence[str]) -> list[str]:
    """Viterbi decoding; equal scores resolve to the earlier tag in B, I, O order."""
    if not words:
        return []
    unary = model.unary_scores(words)
    trans = model.transition_weights
    delta = unary[0]
    backpointers = []
    for t in range(1, len(words)):
        candidates = delta[:, None] + trans
        backpointers.append(candidates.argmax(axis=0))
        delta = candidates.max(axis=0) + unary[t]
    best = [int(delta.argmax())]
    for bp in reversed(backpointers):
        best.append(int(bp[best[-1]]))
    return [TAGS[i] for i in reversed(best)]
