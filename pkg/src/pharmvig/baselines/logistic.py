"""Multinomial logistic regression over fixed feature vectors."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import softmax
from torch import nn

from pharmvig.errors import TrainingDivergedError
from pharmvig.persistence import model_envelope, open_envelope

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LogisticRegressionModel:
    weights: np.ndarray  # (dim, classes)
    bias: np.ndarray  # (classes,)
    l2: float
    classes: tuple[str, ...]
    # objective before training, then after every epoch
    loss_history: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return model_envelope("logistic", {
            "classes": list(self.classes),
            "dim": int(self.weights.shape[0]),
            "weights": self.weights.ravel().tolist(),
            "bias": self.bias.tolist(),
            "l2": self.l2,
            "loss_history": list(self.loss_history),
        })

    @classmethod
    def from_dict(cls, data: dict) -> "LogisticRegressionModel":
        data = open_envelope(data, "logistic")
        n_classes = len(data["classes"])
        return cls(
            weights=np.asarray(data["weights"], dtype=np.float64).reshape(data["dim"], n_classes),
            bias=np.asarray(data["bias"], dtype=np.float64),
            l2=float(data["l2"]),
            classes=tuple(data["classes"]),
            loss_history=tuple(data.get("loss_history", ())),
        )


def _objective(linear: nn.Linear, X: torch.Tensor, y: torch.Tensor, l2: float) -> torch.Tensor:
    return F.cross_entropy(linear(X), y) + 0.5 * l2 * linear.weight.pow(2).sum()


def _as_inputs(features, labels: Sequence[str], classes: tuple[str, ...]) -> tuple[torch.Tensor, torch.Tensor]:
    X = torch.as_tensor(np.asarray(features, dtype=np.float64))
    if X.ndim != 2:
        raise ValueError("features must be a (n, dim) matrix")
    if X.shape[0] != len(labels):
        raise ValueError(f"{X.shape[0]} feature rows for {len(labels)} labels")
    index = {c: i for i, c in enumerate(classes)}
    try:
        y = torch.as_tensor([index[label] for label in labels], dtype=torch.long)
    except KeyError as e:
        raise ValueError(f"label {e.args[0]!r} is not among the classes {classes}")
    return X, y


def _to_linear(model: LogisticRegressionModel) -> nn.Linear:
    linear = nn.Linear(model.weights.shape[0], len(model.classes), dtype=torch.float64)
    with torch.no_grad():
        linear.weight.copy_(torch.as_tensor(model.weights.T))
        linear.bias.copy_(torch.as_tensor(model.bias))
    return linear


def lr_train(
    features,
    labels: Sequence[str],
    l2: float = 0.0,
    lr: float = 0.1,
    epochs: int = 100,
    seed: int = 13,
    batch_size: int = 32,
    classes: Optional[Sequence[str]] = None,
) -> LogisticRegressionModel:
    """
    Minimize mean cross-entropy + (l2/2)·||W||² by seeded mini-batch gradient descent.

    Weights start at zero; the bias is not regularized.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if l2 < 0:
        raise ValueError(f"l2 must be >= 0, got {l2}")
    classes = tuple(sorted(set(classes if classes is not None else labels)))
    if len(classes) < 2:
        raise ValueError("logistic regression needs at least two classes")
    X, y = _as_inputs(features, labels, classes)
    n, dim = X.shape

    linear = nn.Linear(dim, len(classes), dtype=torch.float64)
    nn.init.zeros_(linear.weight)
    nn.init.zeros_(linear.bias)
    optimizer = torch.optim.SGD([
        {"params": [linear.weight], "weight_decay": l2},
        {"params": [linear.bias], "weight_decay": 0.0},
    ], lr=lr)
    generator = torch.Generator().manual_seed(seed)

    with torch.no_grad():
        history = [float(_objective(linear, X, y, l2))]
    for epoch in range(epochs):
        order = torch.randperm(n, generator=generator)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            optimizer.zero_grad()
            loss = F.cross_entropy(linear(X[idx]), y[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss.item()} in epoch {epoch + 1}; lower the learning rate")
            loss.backward()
            optimizer.step()
        with torch.no_grad():
            history.append(float(_objective(linear, X, y, l2)))
        if not np.isfinite(history[-1]):
            raise TrainingDivergedError(f"objective became {history[-1]} in epoch {epoch + 1}; lower the learning rate")
    logger.debug("lr_train: objective %.4f -> %.4f over %d epochs", history[0], history[-1], epochs)

    return LogisticRegressionModel(
        weights=linear.weight.detach().numpy().T.copy(),
        bias=linear.bias.detach().numpy().copy(),
        l2=float(l2),
        classes=classes,
        loss_history=tuple(history),
    )


def lr_predict(model: LogisticRegressionModel, features) -> tuple[list[str], np.ndarray]:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    probs = softmax(X @ model.weights + model.bias, axis=1)
    return [model.classes[i] for i in probs.argmax(axis=1)], probs


def lr_gradient(model: LogisticRegressionModel, features, labels: Sequence[str]) -> np.ndarray:
    """Gradient of the full-batch regularized objective: weights (dim, classes) raveled, then bias."""
    X, y = _as_inputs(features, labels, model.classes)
    linear = _to_linear(model)
    _objective(linear, X, y, model.l2).backward()
    return np.concatenate([linear.weight.grad.numpy().T.ravel(), linear.bias.grad.numpy()])
