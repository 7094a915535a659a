"""Classifiers on extracted embeddings: LR on CLS vectors, CNN and LSTM on token matrices."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from pharmvig.baselines.logistic import LogisticRegressionModel, lr_train
from pharmvig.errors import TrainingDivergedError
from pharmvig.finetune import ExtractedFeatures
from pharmvig.persistence import model_envelope, open_envelope

logger = logging.getLogger(__name__)


class DownstreamKind(str, Enum):
    CNN = "cnn"
    LSTM = "lstm"


class CnnClassifierConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    filter_widths: tuple[int, ...] = (3, 4, 5)
    filters_per_width: int = Field(64, ge=1)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    epochs: int = Field(30, ge=1)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(32, ge=1)
    seed: int = 13

    @field_validator("filter_widths")
    @classmethod
    def _positive_widths(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if not value or any(w < 1 for w in value):
            raise ValueError("filter widths must be positive")
        return value


class LstmClassifierConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    hidden_dim: int = Field(128, ge=1)
    epochs: int = Field(30, ge=1)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(32, ge=1)
    seed: int = 13


class TextCnn(nn.Module):
    def __init__(self, input_dim: int, n_classes: int, widths: Sequence[int], filters: int, dropout: float) -> None:
        super().__init__()
        self.widths = tuple(widths)
        self.convs = nn.ModuleList(nn.Conv1d(input_dim, filters, kernel_size=w) for w in self.widths)
        self.dropout = nn.Dropout(dropout)
        self.head = nn.Linear(filters * len(self.widths), n_classes)

    def pooled(self, tokens: torch.Tensor) -> torch.Tensor:
        """Max over time of every filter, widths in order: (batch, filters * widths)."""
        if tokens.shape[1] < max(self.widths):
            raise ValueError(f"filter width {max(self.widths)} exceeds sequence length {tokens.shape[1]}")
        x = tokens.transpose(1, 2)  # (batch, dim, time)
        return torch.cat([F.relu(conv(x)).amax(dim=2) for conv in self.convs], dim=1)

    def forward(self, tokens: torch.Tensor, valid_from: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.head(self.dropout(self.pooled(tokens)))


class FinalStateLstm(nn.Module):
    """Single-layer LSTM read out at its final state.

    Front-pad rows never enter the recurrence: each row's real tokens are moved
    to the front and packed, so extra leading padding leaves outputs unchanged.
    """

    def __init__(self, input_dim: int, hidden_dim: int, n_classes: int) -> None:
        super().__init__()
        self.lstm = nn.LSTM(input_dim, hidden_dim, num_layers=1, batch_first=True)
        self.head = nn.Linear(hidden_dim, n_classes)

    def forward(self, tokens: torch.Tensor, valid_from: torch.Tensor) -> torch.Tensor:
        batch, rows, _ = tokens.shape
        lengths = (rows - valid_from).clamp(min=1)
        # left-align: position t of row i reads original position valid_from[i] + t
        offsets = (valid_from.unsqueeze(1) + torch.arange(rows).unsqueeze(0)).clamp(max=rows - 1)
        aligned = tokens.gather(1, offsets.unsqueeze(2).expand(-1, -1, tokens.shape[2]))
        packed = pack_padded_sequence(aligned, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, (h_n, _) = self.lstm(packed)
        return self.head(h_n[-1])


def _build_module(kind: DownstreamKind, input_dim: int, n_classes: int,
                  config: Union[CnnClassifierConfig, LstmClassifierConfig]) -> nn.Module:
    if kind is DownstreamKind.CNN:
        return TextCnn(input_dim, n_classes, config.filter_widths, config.filters_per_width, config.dropout)
    return FinalStateLstm(input_dim, config.hidden_dim, n_classes)


@dataclass
class DownstreamClassifier:
    kind: DownstreamKind
    module: nn.Module
    label_names: tuple[str, ...]
    config: Union[CnnClassifierConfig, LstmClassifierConfig]
    input_dim: int
    loss_history: tuple[float, ...] = field(default=())

    def logits(self, tokens: np.ndarray, valid_from: np.ndarray) -> torch.Tensor:
        self.module.eval()
        with torch.no_grad():
            return self.module(torch.as_tensor(tokens, dtype=torch.float32), torch.as_tensor(valid_from, dtype=torch.long))

    def predict(self, features: ExtractedFeatures) -> tuple[list[str], np.ndarray]:
        tokens, valid_from = features.stacked_tokens()
        if len(tokens) == 0:
            return [], np.zeros((0, len(self.label_names)))
        if tokens.shape[2] != self.input_dim:
            raise ValueError(f"features have dim {tokens.shape[2]}, classifier expects {self.input_dim}")
        probs = torch.softmax(self.logits(tokens, valid_from).double(), dim=1).numpy()
        return [self.label_names[i] for i in probs.argmax(axis=1)], probs

    def to_dict(self) -> dict:
        state = {
            name: {"shape": list(t.shape), "values": t.detach().cpu().double().ravel().tolist()}
            for name, t in self.module.state_dict().items()
        }
        return model_envelope("downstream", {
            "kind": self.kind.value,
            "labels": list(self.label_names),
            "input_dim": self.input_dim,
            "config": self.config.model_dump(mode="json"),
            "state": state,
            "loss_history": list(self.loss_history),
        })

    @classmethod
    def from_dict(cls, data: dict) -> "DownstreamClassifier":
        data = open_envelope(data, "downstream")
        kind = DownstreamKind(data["kind"])
        config_cls = CnnClassifierConfig if kind is DownstreamKind.CNN else LstmClassifierConfig
        config = config_cls.model_validate(data["config"])
        module = _build_module(kind, data["input_dim"], len(data["labels"]), config)
        module.load_state_dict({
            name: torch.tensor(entry["values"], dtype=torch.float32).reshape(entry["shape"])
            for name, entry in data["state"].items()
        })
        module.eval()
        return cls(kind, module, tuple(data["labels"]), config, data["input_dim"], tuple(data.get("loss_history", ())))


def _check_aligned(features: ExtractedFeatures, labels: Sequence[str]) -> None:
    if len(features) == 0:
        raise ValueError("no feature vectors to train on")
    if len(features) != len(labels):
        raise ValueError(f"{len(features)} feature rows for {len(labels)} labels")


def train_lr_on_cls(
    features: ExtractedFeatures,
    labels: Sequence[str],
    l2: float = 0.0,
    lr: float = 0.1,
    epochs: int = 100,
    seed: int = 13,
    classes: Optional[Sequence[str]] = None,
) -> LogisticRegressionModel:
    _check_aligned(features, labels)
    return lr_train(features.cls_vectors, labels, l2=l2, lr=lr, epochs=epochs, seed=seed, classes=classes)


def _fit(
    kind: DownstreamKind,
    features: ExtractedFeatures,
    labels: Sequence[str],
    config: Union[CnnClassifierConfig, LstmClassifierConfig],
    classes: Optional[Sequence[str]],
) -> DownstreamClassifier:
    _check_aligned(features, labels)
    label_names = tuple(sorted(set(classes if classes is not None else labels)))
    index = {name: i for i, name in enumerate(label_names)}
    try:
        y = torch.tensor([index[label] for label in labels], dtype=torch.long)
    except KeyError as e:
        raise ValueError(f"label {e.args[0]!r} is not among {label_names}")
    tokens_np, valid_np = features.stacked_tokens()
    if kind is DownstreamKind.CNN and tokens_np.shape[1] < max(config.filter_widths):
        raise ValueError(f"filter width {max(config.filter_widths)} exceeds sequence length {tokens_np.shape[1]}")
    tokens = torch.as_tensor(tokens_np, dtype=torch.float32)
    valid_from = torch.as_tensor(valid_np, dtype=torch.long)

    torch.manual_seed(config.seed)
    module = _build_module(kind, tokens.shape[2], len(label_names), config)
    optimizer = torch.optim.Adam(module.parameters(), lr=config.lr)
    generator = torch.Generator().manual_seed(config.seed)
    n = len(y)

    history = []
    for epoch in range(config.epochs):
        module.train()
        order = torch.randperm(n, generator=generator)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            optimizer.zero_grad()
            loss = F.cross_entropy(module(tokens[idx], valid_from[idx]), y[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"{kind.value} loss became {loss.item()} in epoch {epoch + 1}")
            loss.backward()
            optimizer.step()
            total += float(loss) * len(idx)
        history.append(total / n)
        logger.debug("%s epoch %d: train loss %.4f", kind.value, epoch + 1, history[-1])
    module.eval()
    return DownstreamClassifier(kind, module, label_names, config, int(tokens.shape[2]), tuple(history))


def train_cnn(features: ExtractedFeatures, labels: Sequence[str], cfg: CnnClassifierConfig = CnnClassifierConfig(),
              classes: Optional[Sequence[str]] = None) -> DownstreamClassifier:
    return _fit(DownstreamKind.CNN, features, labels, cfg, classes)


def train_lstm(features: ExtractedFeatures, labels: Sequence[str], cfg: LstmClassifierConfig = LstmClassifierConfig(),
               classes: Optional[Sequence[str]] = None) -> DownstreamClassifier:
    return _fit(DownstreamKind.LSTM, features, labels, cfg, classes)
