"""Fine-tuning harness for the eight BERT variants.

Covers sequence classification (3-class sentiment, binary ADR presence),
BIO token classification and embedding extraction for the downstream models.
"""
from __future__ import annotations

import json
import logging
import string
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator
from tqdm.auto import tqdm
from transformers import (
    AutoModelForSequenceClassification,
    AutoModelForTokenClassification,
    BertConfig,
    BertModel,
    BertTokenizerFast,
    set_seed,
)

from pharmvig.corpus import DatasetBundle, Task, example_label, task_labels
from pharmvig.encoder_client import get_shared_encoder, load_tokenizer, select_device
from pharmvig.errors import RegistryError, TrainingDivergedError
from pharmvig.persistence import model_envelope, open_envelope, read_feature_file, read_json, write_feature_file, write_json
from pharmvig.textprep import (
    BIO_TAGS,
    DEFAULT_MAX_SEQ_LEN,
    IGNORE,
    PaddedEmbeddingMatrix,
    TokenizedText,
    align_bio_to_subtokens,
    front_pad,
    project_subtoken_predictions_to_words,
    subword_tokenize,
)

logger = logging.getLogger(__name__)

VARIANT_KEYS = ("B-C", "B-U", "BB-1.0", "BB-1.1", "CB-A", "CB-D", "CBB-A", "CBB-D")
# registry slot kept for a contextual-embedding baseline that is not implemented
RESERVED_KEYS = ("ELMO",)
EPOCH_SWEEP = (1, 2, 3, 4, 5, 10)
_LOCAL_PREFIXES = ("/", "./", "../", "~")
_IGNORE_INDEX = -100


class TaskHead(str, Enum):
    CLASSIFY_3 = "classify_3"
    CLASSIFY_2 = "classify_2"
    TAG_BIO = "tag_bio"


HEAD_FOR_TASK = {Task.SENTIMENT: TaskHead.CLASSIFY_3, Task.PRESENCE: TaskHead.CLASSIFY_2, Task.NER: TaskHead.TAG_BIO}
_HEAD_SIZE = {TaskHead.CLASSIFY_3: 3, TaskHead.CLASSIFY_2: 2, TaskHead.TAG_BIO: len(BIO_TAGS)}


def canonical_key(key: str) -> str:
    """Registry key in canonical spelling; lookup is case-insensitive."""
    for k in VARIANT_KEYS:
        if k.lower() == key.strip().lower():
            return k
    raise RegistryError(f"unknown model variant {key!r}; expected one of {', '.join(VARIANT_KEYS)}")


class ModelVariant(BaseModel):
    model_config = ConfigDict(frozen=True)

    key: str
    checkpoint_ref: str
    cased: bool
    hidden_dim: int = Field(gt=0)

    @field_validator("key")
    @classmethod
    def _known_key(cls, value: str) -> str:
        return canonical_key(value)


def _resolve_checkpoint(ref: str, base: Path) -> tuple[str, Optional[Path]]:
    """(checkpoint ref, local directory or None for hub ids)."""
    candidate = (base / Path(ref).expanduser()).resolve()
    if ref.startswith(_LOCAL_PREFIXES) or candidate.exists():
        return str(candidate), candidate
    return ref, None


def registry_load(path: str | Path) -> dict[str, ModelVariant]:
    """Read the model registry: {"variants": [{key, checkpoint, cased, hidden_dim?}, ...]}.

    Local checkpoints resolve against the registry file and must exist; their
    hidden size is read from config.json when not given.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise RegistryError(f"registry file not found: {path}")
    except json.JSONDecodeError as e:
        raise RegistryError(f"registry {path} is not valid JSON: {e}")
    entries = raw.get("variants") if isinstance(raw, dict) else None
    if not isinstance(entries, list):
        raise RegistryError(f"registry {path} needs a 'variants' list")

    base = path.resolve().parent
    variants: dict[str, ModelVariant] = {}
    for entry in entries:
        raw_key = str(entry.get("key", ""))
        if raw_key.strip().upper() in RESERVED_KEYS:
            raise RegistryError(f"{raw_key}: this registry slot is reserved and not implemented")
        key = canonical_key(raw_key)
        if key in variants:
            raise RegistryError(f"duplicate registry key {key}")
        if "checkpoint" not in entry:
            raise RegistryError(f"{key}: no checkpoint given")
        ref, local = _resolve_checkpoint(str(entry["checkpoint"]), base)
        if local is not None and not local.exists():
            raise RegistryError(f"{key}: checkpoint {local} not found")

        hidden_dim = entry.get("hidden_dim")
        if hidden_dim is None and local is not None and (local / "config.json").exists():
            hidden_dim = read_json(local / "config.json").get("hidden_size")
        if hidden_dim is None:
            raise RegistryError(f"{key}: hidden_dim is required for hub checkpoints")
        variants[key] = ModelVariant(key=key, checkpoint_ref=ref, cased=bool(entry.get("cased", True)), hidden_dim=hidden_dim)

    missing = [k for k in VARIANT_KEYS if k not in variants]
    if missing:
        raise RegistryError(f"registry is missing {', '.join(missing)}")
    uncased = sorted(k for k, v in variants.items() if not v.cased)
    if uncased != ["B-U"]:
        raise RegistryError(f"B-U must be the only uncased variant, got uncased {uncased}")
    return variants


class FinetuneConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    max_seq_len: int = Field(DEFAULT_MAX_SEQ_LEN, ge=2)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(2e-5, gt=0)
    epochs: int = Field(3, ge=1)
    seed: int = 13
    task_head: TaskHead
    weight_decay: float = Field(0.01, ge=0)


class EpochMetric(BaseModel):
    model_config = ConfigDict(frozen=True)

    epoch: int = Field(ge=1)
    train_loss: float
    # None when the bundle has no dev split
    dev_accuracy: Optional[float] = None
    dev_loss: Optional[float] = None


@dataclass
class TrainedModel:
    variant: ModelVariant
    config: FinetuneConfig
    label_names: tuple[str, ...]
    model: torch.nn.Module
    tokenizer: object
    epoch_metrics: tuple[EpochMetric, ...]

    def __post_init__(self) -> None:
        if len(self.epoch_metrics) != self.config.epochs:
            raise ValueError(f"{len(self.epoch_metrics)} epoch metrics for {self.config.epochs} epochs")
        if [m.epoch for m in self.epoch_metrics] != list(range(1, self.config.epochs + 1)):
            raise ValueError("epoch metrics must cover epochs 1..N in order")

    @property
    def device(self) -> torch.device:
        return next(self.model.parameters()).device

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        self.model.save_pretrained(directory / "model")
        self.tokenizer.save_pretrained(directory / "model")
        write_json(directory / "finetune.json", model_envelope("finetuned", {
            "variant": self.variant.model_dump(),
            "config": self.config.model_dump(mode="json"),
            "labels": list(self.label_names),
            "epoch_metrics": [m.model_dump() for m in self.epoch_metrics],
        }))
        return directory

    @classmethod
    def load(cls, directory: str | Path, device: Optional[str] = None) -> "TrainedModel":
        directory = Path(directory)
        meta = open_envelope(read_json(directory / "finetune.json"), "finetuned")
        config = FinetuneConfig.model_validate(meta["config"])
        model_cls = AutoModelForTokenClassification if config.task_head is TaskHead.TAG_BIO else AutoModelForSequenceClassification
        model = model_cls.from_pretrained(str(directory / "model")).to(select_device(device))
        model.eval()
        variant = ModelVariant.model_validate(meta["variant"])
        return cls(
            variant=variant,
            config=config,
            label_names=tuple(meta["labels"]),
            model=model,
            tokenizer=load_tokenizer(str(directory / "model"), variant.cased),
            epoch_metrics=tuple(EpochMetric.model_validate(m) for m in meta["epoch_metrics"]),
        )


def _pad_batch(items: Sequence[TokenizedText], pad_id: int, labels: Optional[list[list[int]]] = None) -> dict[str, torch.Tensor]:
    width = max(len(t.subtokens) for t in items)
    ids = torch.full((len(items), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(items), width), dtype=torch.long)
    for i, t in enumerate(items):
        ids[i, :len(t.subtokens)] = torch.tensor(t.subtokens)
        mask[i, :len(t.subtokens)] = 1
    batch = {"input_ids": ids, "attention_mask": mask}
    if labels is not None:
        tags = torch.full((len(items), width), _IGNORE_INDEX, dtype=torch.long)
        for i, row in enumerate(labels):
            tags[i, :len(row)] = torch.tensor(row)
        batch["labels"] = tags
    return batch


class FinetuneSession:
    """One fine-tuning run: owns the model, optimizer and RNG state."""

    def __init__(
        self,
        variant: ModelVariant,
        task_head: TaskHead,
        config: FinetuneConfig,
        label_names: Sequence[str],
        device: Optional[str] = None,
    ) -> None:
        if config.task_head is not task_head:
            raise ValueError(f"config is for {config.task_head.value}, session for {task_head.value}")
        if len(label_names) != _HEAD_SIZE[task_head]:
            raise ValueError(f"{task_head.value} head needs {_HEAD_SIZE[task_head]} labels, got {len(label_names)}")
        if task_head is TaskHead.TAG_BIO and tuple(label_names) != BIO_TAGS:
            raise ValueError(f"tagging labels must be {BIO_TAGS}")
        self.variant = variant
        self.task_head = task_head
        self.config = config
        self.label_names = tuple(label_names)
        self._label_index = {name: i for i, name in enumerate(self.label_names)}
        self.device = select_device(device)

        set_seed(config.seed)
        torch.use_deterministic_algorithms(True, warn_only=True)
        self.tokenizer = load_tokenizer(variant.checkpoint_ref, variant.cased)
        model_cls = AutoModelForTokenClassification if task_head is TaskHead.TAG_BIO else AutoModelForSequenceClassification
        self.model = model_cls.from_pretrained(
            variant.checkpoint_ref,
            num_labels=len(self.label_names),
            id2label=dict(enumerate(self.label_names)),
            label2id=dict(self._label_index),
        ).to(self.device)
        if self.model.config.hidden_size != variant.hidden_dim:
            raise ValueError(f"{variant.key}: checkpoint hidden size {self.model.config.hidden_size} != registry {variant.hidden_dim}")
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.metrics: list[EpochMetric] = []

    def tokenize(self, texts: Sequence[str]) -> list[TokenizedText]:
        return [subword_tokenize(t, self.tokenizer, self.variant.cased, self.config.max_seq_len) for t in texts]

    def encode(self, texts: Sequence[str], targets: Optional[Sequence] = None) -> dict[str, torch.Tensor]:
        """Model inputs for a batch; targets are label names or per-word tag lists."""
        items = self.tokenize(texts)
        if targets is None:
            return _pad_batch(items, self.tokenizer.pad_token_id)
        if self.task_head is TaskHead.TAG_BIO:
            rows = [
                [_IGNORE_INDEX if tag == IGNORE else self._label_index[tag] for tag in align_bio_to_subtokens(t, tags)]
                for t, tags in zip(items, targets)
            ]
            return _pad_batch(items, self.tokenizer.pad_token_id, rows)
        batch = _pad_batch(items, self.tokenizer.pad_token_id)
        try:
            batch["labels"] = torch.tensor([self._label_index[y] for y in targets], dtype=torch.long)
        except KeyError as e:
            raise ValueError(f"label {e.args[0]!r} is not among {self.label_names}")
        return batch

    def train_step(self, batch: dict[str, torch.Tensor]) -> float:
        self.model.train()
        self.optimizer.zero_grad()
        out = self.model(**{k: v.to(self.device) for k, v in batch.items()})
        if not torch.isfinite(out.loss):
            raise TrainingDivergedError(f"fine-tuning loss became {out.loss.item()}")
        out.loss.backward()
        self.optimizer.step()
        return float(out.loss.item())

    @torch.no_grad()
    def evaluate(self, texts: Sequence[str], targets: Sequence) -> tuple[float, float]:
        """(accuracy, mean cross-entropy); tagging scores each word's first subtoken."""
        self.model.eval()
        correct, total, loss_sum = 0, 0, 0.0
        for start in range(0, len(texts), self.config.batch_size):
            batch = self.encode(texts[start:start + self.config.batch_size], targets[start:start + self.config.batch_size])
            labels = batch.pop("labels").to(self.device)
            logits = self.model(**{k: v.to(self.device) for k, v in batch.items()}).logits
            logits, labels = logits.reshape(-1, logits.shape[-1]), labels.reshape(-1)
            keep = labels != _IGNORE_INDEX
            logits, labels = logits[keep], labels[keep]
            loss_sum += float(F.cross_entropy(logits.float(), labels, reduction="sum"))
            correct += int((logits.argmax(dim=-1) == labels).sum())
            total += int(labels.numel())
        if total == 0:
            return 0.0, 0.0
        return correct / total, loss_sum / total

    def run(
        self,
        train_texts: Sequence[str],
        train_targets: Sequence,
        dev_texts: Sequence[str] = (),
        dev_targets: Sequence = (),
    ) -> TrainedModel:
        if not train_texts:
            raise ValueError("no training examples")
        n = len(train_texts)
        for epoch in range(1, self.config.epochs + 1):
            order = torch.randperm(n, generator=self.generator).tolist()
            losses = []
            steps = range(0, n, self.config.batch_size)
            for start in tqdm(steps, desc=f"{self.variant.key} epoch {epoch}", leave=False, disable=None):
                idx = order[start:start + self.config.batch_size]
                batch = self.encode([train_texts[i] for i in idx], [train_targets[i] for i in idx])
                losses.append(self.train_step(batch))
            dev_acc = dev_loss = None
            if dev_texts:
                dev_acc, dev_loss = self.evaluate(dev_texts, dev_targets)
            metric = EpochMetric(epoch=epoch, train_loss=float(np.mean(losses)), dev_accuracy=dev_acc, dev_loss=dev_loss)
            self.metrics.append(metric)
            logger.info("%s epoch %d: train loss %.4f, dev accuracy %s, dev loss %s", self.variant.key, epoch,
                        metric.train_loss, _fmt(dev_acc), _fmt(dev_loss))
        self.model.eval()
        return TrainedModel(
            variant=self.variant,
            config=self.config,
            label_names=self.label_names,
            model=self.model,
            tokenizer=self.tokenizer,
            epoch_metrics=tuple(self.metrics),
        )


def _fmt(x: Optional[float]) -> str:
    return "n/a" if x is None else f"{x:.4f}"


def bundle_targets(bundle: DatasetBundle, split: str) -> tuple[list[str], list]:
    examples = getattr(bundle, split)
    texts = [ex.text for ex in examples]
    if bundle.task is Task.NER:
        return texts, [list(ex.bio_tags) for ex in examples]
    return texts, [example_label(ex) for ex in examples]


def fine_tune(variant: ModelVariant, bundle: DatasetBundle, config: FinetuneConfig, device: Optional[str] = None) -> TrainedModel:
    expected = HEAD_FOR_TASK[bundle.task]
    if config.task_head is not expected:
        raise ValueError(f"{bundle.task.value} needs the {expected.value} head, config has {config.task_head.value}")
    session = FinetuneSession(variant, config.task_head, config, task_labels(bundle.task), device=device)
    train_texts, train_targets = bundle_targets(bundle, "train")
    dev_texts, dev_targets = bundle_targets(bundle, "dev")
    logger.info("fine-tuning %s on %s/%s: %d train, %d dev, %d epochs", variant.key, bundle.task.value,
                bundle.variant.value, len(train_texts), len(dev_texts), config.epochs)
    return session.run(train_texts, train_targets, dev_texts, dev_targets)


def _batched_logits(model: TrainedModel, texts: Sequence[str]) -> list[tuple[TokenizedText, torch.Tensor]]:
    items = [subword_tokenize(t, model.tokenizer, model.variant.cased, model.config.max_seq_len) for t in texts]
    out = []
    model.model.eval()
    with torch.no_grad():
        for start in range(0, len(items), model.config.batch_size):
            chunk = items[start:start + model.config.batch_size]
            batch = _pad_batch(chunk, model.tokenizer.pad_token_id)
            logits = model.model(**{k: v.to(model.device) for k, v in batch.items()}).logits.float().cpu()
            out.extend(zip(chunk, logits))
    return out


def predict_classify(model: TrainedModel, texts: Sequence[str]) -> tuple[list[str], np.ndarray]:
    if model.config.task_head is TaskHead.TAG_BIO:
        raise ValueError("predict_classify needs a classification head")
    if not texts:
        return [], np.zeros((0, len(model.label_names)))
    logits = torch.stack([row for _, row in _batched_logits(model, texts)])
    probs = torch.softmax(logits.double(), dim=-1).numpy()
    return [model.label_names[i] for i in probs.argmax(axis=1)], probs


def predict_tags(model: TrainedModel, texts: Sequence[str]) -> list[list[str]]:
    if model.config.task_head is not TaskHead.TAG_BIO:
        raise ValueError("predict_tags needs a tagging head")
    result = []
    for t, logits in _batched_logits(model, texts):
        if not t.words:
            result.append([])
            continue
        subtoken_tags = [model.label_names[i] for i in logits[:len(t.subtokens)].argmax(dim=-1).tolist()]
        result.append(project_subtoken_predictions_to_words(t, subtoken_tags))
    return result


@dataclass(frozen=True)
class ExtractedFeatures:
    cls_vectors: np.ndarray  # (n, hidden_dim)
    token_matrices: tuple[PaddedEmbeddingMatrix, ...]
    source_variant: ModelVariant
    from_finetuned: bool

    def __post_init__(self) -> None:
        if self.cls_vectors.ndim != 2 or self.cls_vectors.shape[1] != self.source_variant.hidden_dim:
            raise ValueError(f"CLS vectors must be (n, {self.source_variant.hidden_dim})")

    def __len__(self) -> int:
        return self.cls_vectors.shape[0]

    def stacked_tokens(self) -> tuple[np.ndarray, np.ndarray]:
        """(tokens (n, rows, dim), valid_from (n,))."""
        if not self.token_matrices:
            return np.zeros((0, 0, self.source_variant.hidden_dim), dtype=np.float32), np.zeros(0, dtype=np.int64)
        tokens = np.stack([m.matrix for m in self.token_matrices]).astype(np.float32)
        return tokens, np.asarray([m.valid_from for m in self.token_matrices], dtype=np.int64)

    def save(self, path: str | Path) -> None:
        tokens, valid = self.stacked_tokens()
        write_feature_file(Path(path), self.cls_vectors, valid, tokens)

    @classmethod
    def load(cls, path: str | Path, variant: ModelVariant, from_finetuned: bool = False) -> "ExtractedFeatures":
        cls_vectors, valid, tokens = read_feature_file(Path(path))
        matrices = tuple(PaddedEmbeddingMatrix(matrix=tokens[i], valid_from=int(valid[i])) for i in range(len(valid)))
        return cls(cls_vectors, matrices, variant, from_finetuned)


def extract_embeddings(
    source: Union[ModelVariant, TrainedModel],
    texts: Sequence[str],
    from_finetuned: bool = False,
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN,
    batch_size: int = 32,
) -> ExtractedFeatures:
    """Final-layer CLS vectors and front-padded per-subtoken states.

    Token matrices hold every position, special tokens included, padded at the
    front to the longest text of this call.
    """
    if isinstance(source, TrainedModel):
        variant, tokenizer = source.variant, source.tokenizer
        encoder, device = source.model.base_model, source.device
        from_finetuned = True
    else:
        if from_finetuned:
            raise ValueError("fine-tuned extraction needs a TrainedModel")
        client = get_shared_encoder(source.checkpoint_ref, source.cased)
        variant, tokenizer, encoder, device = source, client.tokenizer, client.encoder, client.device

    items = [subword_tokenize(t, tokenizer, variant.cased, max_seq_len) for t in texts]
    rows = max((len(t.subtokens) for t in items), default=0)
    cls_vectors = np.zeros((len(items), variant.hidden_dim), dtype=np.float32)
    matrices = []
    encoder.eval()
    with torch.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start:start + batch_size]
            batch = _pad_batch(chunk, tokenizer.pad_token_id)
            hidden = encoder(**{k: v.to(device) for k, v in batch.items()}).last_hidden_state.float().cpu().numpy()
            for i, t in enumerate(chunk):
                cls_vectors[start + i] = hidden[i, 0]
                matrices.append(front_pad(hidden[i, :len(t.subtokens)], rows))
    return ExtractedFeatures(cls_vectors, tuple(matrices), variant, from_finetuned)


def build_tiny_checkpoint(
    directory: str | Path,
    words: Sequence[str] = (),
    hidden_size: int = 32,
    num_layers: int = 2,
    num_heads: int = 2,
    max_positions: int = DEFAULT_MAX_SEQ_LEN,
    seed: int = 0,
) -> Path:
    """Write a miniature randomly initialized BERT with a character-level vocab.

    Every ASCII letter, digit and punctuation mark is a piece (and a ## piece),
    so any ASCII text tokenizes without [UNK]; `words` become whole-word pieces.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    chars = string.ascii_letters + string.digits + string.punctuation
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    vocab += list(chars) + [f"##{c}" for c in chars]
    vocab += sorted({w for word in words for w in (word, word.lower())} - set(vocab))
    (directory / "vocab.txt").write_text("\n".join(vocab) + "\n", encoding="utf-8")

    tokenizer = BertTokenizerFast(vocab_file=str(directory / "vocab.txt"), do_lower_case=False)
    config = BertConfig(
        vocab_size=len(vocab),
        hidden_size=hidden_size,
        num_hidden_layers=num_layers,
        num_attention_heads=num_heads,
        intermediate_size=hidden_size * 2,
        max_position_embeddings=max_positions,
        hidden_dropout_prob=0.0,
        attention_probs_dropout_prob=0.0,
    )
    torch.manual_seed(seed)
    BertModel(config).save_pretrained(directory)
    tokenizer.save_pretrained(directory)
    return directory
