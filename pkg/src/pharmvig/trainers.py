"""Model keys and the train-then-predict dispatch behind `pharmvig train`.

Keys are case-insensitive:

    B-C, B-U, BB-1.0, BB-1.1, CB-A, CB-D, CBB-A, CBB-D   fine-tuned transformers
    majority, nb, crf                                    classical baselines
    <variant>+lr, <variant>+cnn, <variant>+lstm          classifiers on extracted embeddings
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from pharmvig.baselines import (
    CrfModel,
    LogisticRegressionModel,
    MostCommonClassifier,
    NaiveBayesModel,
    crf_decode,
    crf_train,
    lr_predict,
    most_common_class_fit,
    nb_predict_many,
    nb_train,
)
from pharmvig.corpus import POSITIVE_PRESENCE_LABEL, DatasetBundle, Task, example_label, task_labels
from pharmvig.downstream import (
    CnnClassifierConfig,
    DownstreamClassifier,
    LstmClassifierConfig,
    train_cnn,
    train_lr_on_cls,
    train_lstm,
)
from pharmvig.errors import ModelKeyError, RegistryError
from pharmvig.finetune import (
    HEAD_FOR_TASK,
    VARIANT_KEYS,
    EpochMetric,
    ExtractedFeatures,
    FinetuneConfig,
    ModelVariant,
    TrainedModel,
    canonical_key,
    extract_embeddings,
    fine_tune,
    predict_classify,
    predict_tags,
)
from pharmvig.persistence import read_json, write_json
from pharmvig.textprep import DEFAULT_MAX_SEQ_LEN, NgramVector, ngram_featurize, word_tokenize

logger = logging.getLogger(__name__)

BASELINE_KEYS = ("majority", "nb", "crf")
DOWNSTREAM_HEADS = ("lr", "cnn", "lstm")
NGRAM_RANGE = (1, 2)
NB_ALPHA = 1.0
CRF_L2, CRF_LR = 1e-4, 0.05
LR_LEARNING_RATE = 0.1

DEFAULT_EPOCHS = {"transformer": 3, "majority": 0, "nb": 0, "crf": 30, "lr": 100, "cnn": 30, "lstm": 30}

Model = Union[MostCommonClassifier, NaiveBayesModel, CrfModel, LogisticRegressionModel, DownstreamClassifier, TrainedModel]


class ModelFamily(str, Enum):
    TRANSFORMER = "transformer"
    BASELINE = "baseline"
    DOWNSTREAM = "downstream"


@dataclass(frozen=True)
class ModelKey:
    family: ModelFamily
    name: str
    variant: Optional[str] = None
    head: Optional[str] = None

    @property
    def epochs_key(self) -> str:
        if self.family is ModelFamily.TRANSFORMER:
            return "transformer"
        return self.head if self.family is ModelFamily.DOWNSTREAM else self.name

    def default_epochs(self) -> int:
        return DEFAULT_EPOCHS[self.epochs_key]


def valid_model_keys() -> list[str]:
    keys = list(VARIANT_KEYS) + list(BASELINE_KEYS)
    keys += [f"{v}+{h}" for v in VARIANT_KEYS for h in DOWNSTREAM_HEADS]
    return keys


def _unknown(key: str) -> ModelKeyError:
    return ModelKeyError(f"unknown model key {key!r}; valid keys: {', '.join(valid_model_keys())}")


def parse_model_key(key: str) -> ModelKey:
    raw = key.strip()
    lowered = raw.lower()
    if lowered in BASELINE_KEYS:
        return ModelKey(ModelFamily.BASELINE, lowered)
    variant_part, plus, head = raw.rpartition("+")
    try:
        if plus:
            head = head.lower()
            if head not in DOWNSTREAM_HEADS:
                raise _unknown(key)
            variant = canonical_key(variant_part)
            return ModelKey(ModelFamily.DOWNSTREAM, f"{variant}+{head}", variant=variant, head=head)
        variant = canonical_key(raw)
    except RegistryError:
        raise _unknown(key)
    return ModelKey(ModelFamily.TRANSFORMER, variant, variant=variant)


def check_task_support(model: ModelKey, task: Task) -> None:
    if model.name == "crf" and task is not Task.NER:
        raise ModelKeyError("the crf baseline tags words; use it with --task ner")
    if task is Task.NER and (model.name == "nb" or model.family is ModelFamily.DOWNSTREAM):
        raise ModelKeyError(f"{model.name} classifies whole texts; it cannot run --task ner")


@dataclass
class TrainOutcome:
    model: Model
    golds: list[str]
    preds: list[str]
    predictions: list[dict]
    hyperparameters: dict[str, Any]
    probabilities: Optional[np.ndarray] = None
    epoch_metrics: tuple[EpochMetric, ...] = field(default=())


def positive_label(task: Task) -> Optional[str]:
    return POSITIVE_PRESENCE_LABEL if task is Task.PRESENCE else None


def featurize_ngrams(text: str) -> NgramVector:
    return ngram_featurize([w.lower() for w in word_tokenize(text)], NGRAM_RANGE)


def _in_label_order(probs: np.ndarray, classes: tuple[str, ...], labels: tuple[str, ...]) -> np.ndarray:
    return probs[:, [classes.index(label) for label in labels]]


def _classification_rows(bundle: DatasetBundle, preds: list[str], probs: Optional[np.ndarray], labels: tuple[str, ...]):
    golds = [example_label(ex) for ex in bundle.test]
    rows = []
    for i, ex in enumerate(bundle.test):
        row = {"id": ex.example_id, "gold": golds[i], "pred": preds[i]}
        if probs is not None:
            row["probs"] = {label: float(p) for label, p in zip(labels, probs[i])}
        rows.append(row)
    return golds, rows


def _tagging_rows(bundle: DatasetBundle, pred_seqs: list[list[str]]):
    rows, golds, preds = [], [], []
    for ex, pred in zip(bundle.test, pred_seqs):
        rows.append({"id": ex.example_id, "words": list(ex.words), "gold": list(ex.bio_tags), "pred": list(pred)})
        golds.extend(ex.bio_tags)
        preds.extend(pred)
    return golds, preds, rows


def _train_baseline(key: ModelKey, bundle: DatasetBundle, epochs: int, seed: int) -> TrainOutcome:
    labels = task_labels(bundle.task)
    if bundle.task is Task.NER:
        if key.name == "majority":
            model = most_common_class_fit(tag for ex in bundle.train for tag in ex.bio_tags)
            pred_seqs = [[model.label] * len(ex.words) for ex in bundle.test]
            params = {}
        else:
            params = {"l2": CRF_L2, "lr": CRF_LR, "epochs": epochs}
            model = crf_train([(ex.words, ex.bio_tags) for ex in bundle.train], l2=CRF_L2, epochs=epochs, lr=CRF_LR, seed=seed)
            pred_seqs = [crf_decode(model, ex.words) for ex in bundle.test]
        golds, preds, rows = _tagging_rows(bundle, pred_seqs)
        return TrainOutcome(model, golds, preds, rows, params)

    if key.name == "majority":
        model = most_common_class_fit(example_label(ex) for ex in bundle.train)
        preds = model.predict_many(bundle.test)
        total = sum(model.counts.values())
        prior = np.asarray([model.counts.get(label, 0) / total for label in labels])
        probs = np.tile(prior, (len(bundle.test), 1))
        params = {}
    else:
        model = nb_train(
            [(featurize_ngrams(ex.text), example_label(ex)) for ex in bundle.train],
            alpha=NB_ALPHA,
            classes=labels,
        )
        preds, probs = nb_predict_many(model, [featurize_ngrams(ex.text) for ex in bundle.test])
        probs = _in_label_order(probs, model.classes, labels)
        params = {"alpha": NB_ALPHA, "n_range": list(NGRAM_RANGE)}
    golds, rows = _classification_rows(bundle, preds, probs, labels)
    return TrainOutcome(model, golds, preds, rows, params, probabilities=probs)


def _train_transformer(variant: ModelVariant, bundle: DatasetBundle, epochs: int, seed: int,
                       device: Optional[str]) -> TrainOutcome:
    config = FinetuneConfig(epochs=epochs, seed=seed, task_head=HEAD_FOR_TASK[bundle.task])
    trained = fine_tune(variant, bundle, config, device=device)
    texts = [ex.text for ex in bundle.test]
    params = {"checkpoint": variant.checkpoint_ref, "cased": variant.cased, **config.model_dump(mode="json")}
    if bundle.task is Task.NER:
        golds, preds, rows = _tagging_rows(bundle, predict_tags(trained, texts))
        return TrainOutcome(trained, golds, preds, rows, params, epoch_metrics=trained.epoch_metrics)
    preds, probs = predict_classify(trained, texts)
    golds, rows = _classification_rows(bundle, preds, probs, trained.label_names)
    return TrainOutcome(trained, golds, preds, rows, params, probabilities=probs, epoch_metrics=trained.epoch_metrics)


def features_fingerprint(variant: ModelVariant, examples, max_seq_len: int, from_finetuned: bool) -> str:
    """Digest of what a cached feature file was extracted from."""
    h = hashlib.sha1()
    h.update(json.dumps([variant.key, variant.checkpoint_ref, variant.cased, max_seq_len, from_finetuned]).encode("utf-8"))
    for ex in examples:
        h.update(f"\x00{ex.example_id}\x01{ex.text}".encode("utf-8"))
    return h.hexdigest()


def split_features(
    source: Union[ModelVariant, TrainedModel],
    bundle: DatasetBundle,
    directory: Path,
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN,
) -> dict[str, ExtractedFeatures]:
    """Features for train (of the bundle's variant), dev and test.

    Files in `directory` are reused only when their sidecar fingerprint matches
    the split's examples; anything else is extracted again and overwritten.
    """
    variant = source.variant if isinstance(source, TrainedModel) else source
    from_finetuned = isinstance(source, TrainedModel)
    names = {"train": f"train.{bundle.variant.value}.pvf", "dev": "dev.pvf", "test": "test.pvf"}
    out = {}
    for split, name in names.items():
        path = directory / name
        sidecar = path.with_suffix(".json")
        examples = getattr(bundle, split)
        fingerprint = features_fingerprint(variant, examples, max_seq_len, from_finetuned)
        if path.exists():
            cached = read_json(sidecar) if sidecar.exists() else {}
            if cached.get("fingerprint") == fingerprint:
                features = ExtractedFeatures.load(path, variant, from_finetuned)
                if len(features) != len(examples):
                    raise ValueError(f"{path}: {len(features)} feature rows for {len(examples)} {split} examples")
                out[split] = features
                continue
            logger.warning("%s was extracted from different %s examples; extracting again", path, split)
        texts = [ex.text for ex in examples]
        logger.info("extracting %s features for %d %s texts", variant.key, len(texts), split)
        out[split] = extract_embeddings(source, texts, from_finetuned=from_finetuned, max_seq_len=max_seq_len)
        out[split].save(path)
        write_json(sidecar, {"fingerprint": fingerprint, "examples": len(examples), "max_seq_len": max_seq_len})
    return out


def _train_downstream(key: ModelKey, features: dict[str, ExtractedFeatures], bundle: DatasetBundle,
                      epochs: int, seed: int) -> TrainOutcome:
    labels = task_labels(bundle.task)
    train_labels = [example_label(ex) for ex in bundle.train]
    if key.head == "lr":
        params = {"l2": 0.0, "lr": LR_LEARNING_RATE, "epochs": epochs}
        model = train_lr_on_cls(features["train"], train_labels, lr=LR_LEARNING_RATE, epochs=epochs, seed=seed, classes=labels)
        preds, probs = lr_predict(model, features["test"].cls_vectors)
        probs = _in_label_order(probs, model.classes, labels)
    elif key.head == "cnn":
        cfg = CnnClassifierConfig(epochs=epochs, seed=seed)
        params = cfg.model_dump(mode="json")
        model = train_cnn(features["train"], train_labels, cfg, classes=labels)
        preds, probs = model.predict(features["test"])
        probs = _in_label_order(probs, model.label_names, labels)
    else:
        cfg = LstmClassifierConfig(epochs=epochs, seed=seed)
        params = cfg.model_dump(mode="json")
        model = train_lstm(features["train"], train_labels, cfg, classes=labels)
        preds, probs = model.predict(features["test"])
        probs = _in_label_order(probs, model.label_names, labels)
    golds, rows = _classification_rows(bundle, preds, probs, labels)
    return TrainOutcome(model, golds, preds, rows, params, probabilities=probs)


def train_and_predict(
    key: ModelKey,
    bundle: DatasetBundle,
    epochs: int,
    seed: int,
    variants: Optional[dict[str, ModelVariant]] = None,
    features: Optional[dict[str, ExtractedFeatures]] = None,
    device: Optional[str] = None,
) -> TrainOutcome:
    """Train `key` on the bundle's train split and predict its test split."""
    check_task_support(key, bundle.task)
    if key.family is ModelFamily.BASELINE:
        return _train_baseline(key, bundle, epochs, seed)
    if key.family is ModelFamily.DOWNSTREAM:
        if features is None:
            raise ValueError("downstream models need extracted features")
        return _train_downstream(key, features, bundle, epochs, seed)
    if not variants or key.variant not in variants:
        raise ModelKeyError(f"{key.variant} is not in the model registry")
    return _train_transformer(variants[key.variant], bundle, epochs, seed, device)
