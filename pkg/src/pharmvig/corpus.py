"""Corpora for the three tasks: Drugs.com reviews, ADR tweets and the BIO subset.

Loaders return immutable tuples of frozen records; every random choice takes
an explicit seed so bundles are reproducible byte for byte.
"""
from __future__ import annotations

import datetime as dt
import html
import json
import logging
import math
import re
from collections import Counter
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator, Optional, Protocol, Sequence, Union

import httpx
import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from pharmvig.errors import CorpusFormatError
from pharmvig.persistence import atomic_write_bytes, read_json, write_json
from pharmvig.textprep import BIO_TAGS, word_spans

logger = logging.getLogger(__name__)

_FROZEN = ConfigDict(frozen=True)


class Task(str, Enum):
    SENTIMENT = "sentiment"
    PRESENCE = "presence"
    NER = "ner"


class TrainsetVariant(str, Enum):
    NATURAL = "natural"
    OVERSAMPLED = "oversampled"
    UNDERSAMPLED = "undersampled"


class SentimentLabel(str, Enum):
    POSITIVE = "positive"
    NEUTRAL = "neutral"
    NEGATIVE = "negative"


class RawReview(BaseModel):
    model_config = _FROZEN

    review_id: str
    drug_name: str
    condition: str = ""
    text: str = Field(min_length=1)
    rating: int = Field(ge=1, le=10)
    date: dt.date
    useful_count: int = Field(ge=0)


class SentimentExample(BaseModel):
    model_config = _FROZEN

    example_id: str
    text: str
    label: SentimentLabel
    source_rating: int

    @model_validator(mode="after")
    def _label_matches_rating(self) -> "SentimentExample":
        if self.label is not map_rating_to_sentiment(self.source_rating):
            raise ValueError(f"label {self.label.value} does not match rating {self.source_rating}")
        return self


class TweetRecord(BaseModel):
    model_config = _FROZEN

    tweet_id: str
    text: Optional[str] = None
    has_adr: bool

    @property
    def example_id(self) -> str:
        return self.tweet_id


class NerRecord(BaseModel):
    model_config = _FROZEN

    tweet_id: str
    text: str
    spans: tuple[tuple[int, int], ...] = ()
    words: tuple[str, ...]
    bio_tags: tuple[str, ...]

    @property
    def example_id(self) -> str:
        return self.tweet_id

    @model_validator(mode="after")
    def _valid_annotation(self) -> "NerRecord":
        _check_spans(self.spans, len(self.text))
        if len(self.words) != len(self.bio_tags):
            raise ValueError(f"{len(self.bio_tags)} tags for {len(self.words)} words")
        previous = "O"
        for tag in self.bio_tags:
            if tag not in BIO_TAGS:
                raise ValueError(f"unknown tag {tag!r}")
            if tag == "I" and previous == "O":
                raise ValueError("I tag must follow B or I")
            previous = tag
        return self


Example = Union[SentimentExample, TweetRecord, NerRecord]
EXAMPLE_TYPES: dict[Task, type[BaseModel]] = {
    Task.SENTIMENT: SentimentExample,
    Task.PRESENCE: TweetRecord,
    Task.NER: NerRecord,
}


class DatasetBundle(BaseModel):
    model_config = _FROZEN

    task: Task
    train: tuple[Example, ...]
    dev: tuple[Example, ...]
    test: tuple[Example, ...]
    variant: TrainsetVariant = TrainsetVariant.NATURAL
    seed: int

    @model_validator(mode="after")
    def _splits_are_disjoint(self) -> "DatasetBundle":
        expected = EXAMPLE_TYPES[self.task]
        ids = {}
        for name in ("train", "dev", "test"):
            split = getattr(self, name)
            for ex in split:
                if not isinstance(ex, expected):
                    raise ValueError(f"{name} holds {type(ex).__name__}, expected {expected.__name__}")
                if isinstance(ex, TweetRecord) and ex.text is None:
                    raise ValueError(f"tweet {ex.tweet_id} has no text")
            ids[name] = {ex.example_id for ex in split}
        for a, b in (("train", "dev"), ("train", "test"), ("dev", "test")):
            shared = ids[a] & ids[b]
            if shared:
                raise ValueError(f"{a} and {b} share {len(shared)} example ids, e.g. {sorted(shared)[0]}")
        return self


class RebalanceMode(str, Enum):
    OVERSAMPLE = "oversample_minority_to_balance"
    UNDERSAMPLE = "undersample_majority_to_ratio"


class RebalanceSpec(BaseModel):
    model_config = _FROZEN

    mode: RebalanceMode
    target_minority_fraction: float = Field(gt=0.0, le=0.5)
    seed: int = 13

    @model_validator(mode="after")
    def _oversample_balances(self) -> "RebalanceSpec":
        if self.mode is RebalanceMode.OVERSAMPLE and self.target_minority_fraction != 0.5:
            raise ValueError("oversampling always balances the classes (fraction 0.5)")
        return self


class SkipReport(BaseModel):
    model_config = _FROZEN

    total: int
    skipped_ids: tuple[str, ...] = ()

    @property
    def skipped(self) -> int:
        return len(self.skipped_ids)

    @property
    def usable(self) -> int:
        return self.total - self.skipped


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _check_spans(spans: Sequence[tuple[int, int]], text_len: int, row: Optional[int] = None) -> None:
    previous_end = -1
    for start, end in sorted(spans):
        if not 0 <= start < end <= text_len:
            raise CorpusFormatError(f"span ({start}, {end}) outside text of length {text_len}", row=row)
        if start < previous_end:
            raise CorpusFormatError(f"span ({start}, {end}) overlaps the previous span", row=row)
        previous_end = end


# ---------------------------------------------------------------------------
# Drugs.com reviews
# ---------------------------------------------------------------------------

class DrugReviewLoader:
    """
    Load the Drugs.com review dataset in its UCI tab-separated layout.

    Header: uniqueID drugName condition review rating date usefulCount
    (the published raw files leave the first header cell empty). Review text
    is HTML-unescaped once and the quote pair wrapping every review is removed.
    """

    COLUMNS = ("uniqueID", "drugName", "condition", "review", "rating", "date", "usefulCount")

    def __init__(self, file_path: str | Path, delimiter: str = "\t", encoding: str = "utf-8") -> None:
        self.file_path = Path(file_path)
        self.delimiter = delimiter
        self.encoding = encoding

    def _read_frame(self) -> pd.DataFrame:
        try:
            df = pd.read_csv(
                self.file_path,
                sep=self.delimiter,
                dtype=str,
                keep_default_na=False,
                encoding=self.encoding,
                on_bad_lines="error",
            )
        except pd.errors.EmptyDataError:
            return pd.DataFrame(columns=list(self.COLUMNS))
        except pd.errors.ParserError as e:
            m = re.search(r"line (\d+)", str(e))
            raise CorpusFormatError(f"malformed row in {self.file_path}: {e}", row=int(m.group(1)) - 1 if m else None)

        first = df.columns[0] if len(df.columns) else None
        if first is not None and (first == "" or str(first).startswith("Unnamed")):
            df = df.rename(columns={first: "uniqueID"})
        missing = [c for c in self.COLUMNS if c not in df.columns]
        if missing:
            raise CorpusFormatError(f"{self.file_path} is missing columns {missing}")
        return df

    def lazy_load(self) -> Iterator[RawReview]:
        df = self._read_frame()
        dates = pd.to_datetime(df["date"], errors="coerce", format="mixed")
        for i, (rid, drug, condition, review, rating, date, useful) in enumerate(
            zip(df["uniqueID"], df["drugName"], df["condition"], df["review"], df["rating"], dates, df["usefulCount"]),
            start=1,
        ):
            yield RawReview(
                review_id=rid.strip(),
                drug_name=drug.strip(),
                condition=condition.strip(),
                text=self._clean_text(review, i),
                rating=self._parse_rating(rating, i),
                date=self._parse_date(date, df["date"].iat[i - 1], i),
                useful_count=self._parse_count(useful, i),
            )

    def load(self) -> tuple[RawReview, ...]:
        reviews = tuple(self.lazy_load())
        seen = set()
        for i, r in enumerate(reviews, start=1):
            if r.review_id in seen:
                raise CorpusFormatError(f"duplicate review id {r.review_id!r}", row=i)
            seen.add(r.review_id)
        logger.info("✓ Loaded %d reviews from %s", len(reviews), self.file_path.name)
        return reviews

    @staticmethod
    def _clean_text(raw: str, row: int) -> str:
        text = raw.strip()
        # literal quotes left around the review; escaped ones belong to it
        if len(text) >= 2 and text[0] == text[-1] == '"':
            text = text[1:-1]
        text = html.unescape(text).strip()
        if not text:
            raise CorpusFormatError("empty review text", row=row)
        return text

    @staticmethod
    def _parse_rating(raw: str, row: int) -> int:
        try:
            value = float(raw)
        except ValueError:
            raise CorpusFormatError(f"unparseable rating {raw!r}", row=row)
        if not value.is_integer() or not 1 <= value <= 10:
            raise CorpusFormatError(f"rating {raw!r} outside 1..10", row=row)
        return int(value)

    @staticmethod
    def _parse_date(parsed, raw: str, row: int) -> dt.date:
        if pd.isna(parsed):
            raise CorpusFormatError(f"unparseable date {raw!r}", row=row)
        return parsed.date()

    @staticmethod
    def _parse_count(raw: str, row: int) -> int:
        try:
            value = int(float(raw))
        except ValueError:
            raise CorpusFormatError(f"unparseable usefulCount {raw!r}", row=row)
        if value < 0:
            raise CorpusFormatError(f"negative usefulCount {raw!r}", row=row)
        return value


def load_drug_reviews(path: str | Path) -> tuple[RawReview, ...]:
    return DrugReviewLoader(path).load()


def map_rating_to_sentiment(rating: int) -> SentimentLabel:
    if isinstance(rating, bool) or not isinstance(rating, (int, np.integer)) or not 1 <= rating <= 10:
        raise ValueError(f"rating must be an integer in 1..10, got {rating!r}")
    if rating >= 8:
        return SentimentLabel.POSITIVE
    if rating <= 3:
        return SentimentLabel.NEGATIVE
    return SentimentLabel.NEUTRAL


def _to_sentiment_example(review: RawReview) -> SentimentExample:
    return SentimentExample(
        example_id=review.review_id,
        text=review.text,
        label=map_rating_to_sentiment(review.rating),
        source_rating=review.rating,
    )


def _carve(n: int, counts: Sequence[int], seed: int) -> list[list[int]]:
    """Seeded uniform carve-outs of sizes `counts` from range(n); the rest comes last.

    Every returned index list keeps the original order.
    """
    perm = np.random.default_rng(seed).permutation(n)
    parts, offset = [], 0
    for c in counts:
        parts.append(sorted(int(i) for i in perm[offset:offset + c]))
        offset += c
    parts.append(sorted(int(i) for i in perm[offset:]))
    return parts


def make_sentiment_bundle(
    reviews: Sequence[RawReview],
    test_reviews: Sequence[RawReview] = (),
    dev_fraction: float = 0.2,
    seed: int = 13,
) -> DatasetBundle:
    """Sentiment bundle: published test file as test, seeded dev carve-out of the train file."""
    if not reviews:
        raise ValueError("no reviews to build a sentiment bundle from")
    if not 0.0 <= dev_fraction < 1.0:
        raise ValueError(f"dev_fraction must be in [0, 1), got {dev_fraction}")
    n_dev = _round_half_up(len(reviews) * dev_fraction)
    dev_idx, train_idx = _carve(len(reviews), [n_dev], seed)
    return DatasetBundle(
        task=Task.SENTIMENT,
        train=tuple(_to_sentiment_example(reviews[i]) for i in train_idx),
        dev=tuple(_to_sentiment_example(reviews[i]) for i in dev_idx),
        test=tuple(_to_sentiment_example(r) for r in test_reviews),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# ADR tweets
# ---------------------------------------------------------------------------

class TweetTextResolver(Protocol):
    def resolve(self, tweet_id: str) -> Optional[str]:
        ...


class JsonlTweetResolver:
    """Tweet texts from a local JSONL file of {"tweet_id", "text"} objects."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        texts = {}
        for row, obj in _read_jsonl(self.path):
            try:
                texts[str(obj["tweet_id"])] = obj["text"]
            except (KeyError, TypeError):
                raise CorpusFormatError(f"{self.path}: expected tweet_id and text", row=row)
        self._texts = texts

    def resolve(self, tweet_id: str) -> Optional[str]:
        return self._texts.get(tweet_id)


class HttpTweetResolver:
    """Tweet texts from an HTTP API: GET {base_url}/tweets/{id} with a bearer token.

    Accepts either {"text": ...} or {"data": {"text": ...}} bodies. Anything but a
    200 with a text is a miss.
    """

    def __init__(self, base_url: str, bearer_token: Optional[str] = None, timeout: float = 10.0,
                 client: Optional[httpx.Client] = None) -> None:
        headers = {"Authorization": f"Bearer {bearer_token}"} if bearer_token else {}
        self._client = client or httpx.Client(base_url=base_url, headers=headers, timeout=timeout)

    def resolve(self, tweet_id: str) -> Optional[str]:
        try:
            resp = self._client.get(f"tweets/{tweet_id}")
        except httpx.HTTPError as e:
            logger.warning("tweet %s lookup failed: %s", tweet_id, e)
            return None
        if resp.status_code != 200:
            return None
        try:
            payload = resp.json()
        except ValueError:
            return None
        data = payload.get("data", payload) if isinstance(payload, dict) else None
        text = data.get("text") if isinstance(data, dict) else None
        return text if isinstance(text, str) else None

    def close(self) -> None:
        self._client.close()


def _read_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as f:
        for row, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield row, json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"{path}: invalid JSON ({e.msg})", row=row)


def load_tweet_corpus(annotation_path: str | Path, resolver: TweetTextResolver) -> tuple[tuple[TweetRecord, ...], SkipReport]:
    """Join ADR annotations with resolved tweet texts.

    Unresolvable tweets stay in the result with text=None and are listed in the
    skip report.
    """
    annotation_path = Path(annotation_path)
    records, skipped, seen = [], [], set()
    for row, obj in _read_jsonl(annotation_path):
        try:
            tweet_id, label = str(obj["tweet_id"]), obj["label"]
        except (KeyError, TypeError):
            raise CorpusFormatError("expected tweet_id and label", row=row)
        if label not in (0, 1):
            raise CorpusFormatError(f"label must be 0 or 1, got {label!r}", row=row)
        if tweet_id in seen:
            raise CorpusFormatError(f"duplicate tweet id {tweet_id!r}", row=row)
        seen.add(tweet_id)

        text = resolver.resolve(tweet_id)
        if text is not None and not isinstance(text, str):
            logger.warning("tweet %s resolved to a %s, not text; skipping it", tweet_id, type(text).__name__)
            text = None
        text = text.strip() or None if text is not None else None
        if text is None:
            skipped.append(tweet_id)
        records.append(TweetRecord(tweet_id=tweet_id, text=text, has_adr=bool(label)))

    report = SkipReport(total=len(records), skipped_ids=tuple(skipped))
    logger.info("✓ Resolved %d of %d tweets (%d unavailable)", report.usable, report.total, report.skipped)
    return tuple(records), report


def _has_adr(record: TweetRecord) -> bool:
    return record.has_adr


def rebalance(train: Sequence, spec: RebalanceSpec, label_of: Callable = _has_adr) -> tuple:
    """Oversample the minority class to balance or undersample the majority to a ratio."""
    groups: dict = {}
    for i, ex in enumerate(train):
        groups.setdefault(label_of(ex), []).append(i)
    if len(groups) != 2:
        raise ValueError(f"rebalancing needs exactly two classes, got {len(groups)}")
    # ties make the positive class the minority
    (_, minority), (_, majority) = sorted(groups.items(), key=lambda kv: (len(kv[1]), kv[0] is not True))

    rng = np.random.default_rng(spec.seed)
    if spec.mode is RebalanceMode.OVERSAMPLE:
        order = rng.permutation(len(minority))
        extra = len(majority) - len(minority)
        chosen = list(range(len(train))) + [minority[int(order[k % len(minority)])] for k in range(extra)]
    else:
        f = spec.target_minority_fraction
        keep = _round_half_up(len(minority) * (1 - f) / f)
        if keep > len(majority):
            logger.warning("only %d majority examples, target ratio needs %d", len(majority), keep)
            keep = len(majority)
        picked = rng.choice(len(majority), size=keep, replace=False)
        chosen = minority + [majority[int(i)] for i in sorted(picked)]

    shuffled = rng.permutation(len(chosen))
    return tuple(train[chosen[int(i)]] for i in shuffled)


def make_presence_bundles(
    records: Sequence[TweetRecord],
    dev_fraction: float = 0.2,
    test_fraction: float = 0.2,
    seed: int = 13,
    oversample: Optional[RebalanceSpec] = None,
    undersample: Optional[RebalanceSpec] = None,
) -> dict[TrainsetVariant, DatasetBundle]:
    """Split usable tweets, then derive the two rebalanced training sets.

    Dev and test are shared by all three variants; rebalancing only touches train.
    """
    usable = [r for r in records if r.text is not None]
    if not usable:
        raise ValueError("no tweets with text to build a presence bundle from")
    n = len(usable)
    test_idx, dev_idx, train_idx = _carve(
        n, [_round_half_up(n * test_fraction), _round_half_up(n * dev_fraction)], seed
    )
    train = tuple(usable[i] for i in train_idx)
    dev = tuple(usable[i] for i in dev_idx)
    test = tuple(usable[i] for i in test_idx)

    oversample = oversample or RebalanceSpec(mode=RebalanceMode.OVERSAMPLE, target_minority_fraction=0.5, seed=seed)
    undersample = undersample or RebalanceSpec(mode=RebalanceMode.UNDERSAMPLE, target_minority_fraction=1 / 3, seed=seed)
    trains = {
        TrainsetVariant.NATURAL: train,
        TrainsetVariant.OVERSAMPLED: rebalance(train, oversample),
        TrainsetVariant.UNDERSAMPLED: rebalance(train, undersample),
    }
    return {
        variant: DatasetBundle(task=Task.PRESENCE, train=t, dev=dev, test=test, variant=variant, seed=seed)
        for variant, t in trains.items()
    }


# ---------------------------------------------------------------------------
# BIO subset
# ---------------------------------------------------------------------------

def spans_to_bio(text: str, spans: Sequence[tuple[int, int]]) -> tuple[list[str], list[str]]:
    """Word tokens of `text` and their BIO tags under character-offset spans."""
    ordered = sorted(spans)
    words, tags = [], []
    previous_owner = None
    for ws, we in word_spans(text):
        owner = next((k for k, (s, e) in enumerate(ordered) if s < we and ws < e), None)
        words.append(text[ws:we])
        if owner is None:
            tags.append("O")
        elif owner == previous_owner:
            tags.append("I")
        else:
            tags.append("B")
        previous_owner = owner
    return words, tags


def load_ner_corpus(path: str | Path) -> tuple[NerRecord, ...]:
    path = Path(path)
    records, seen = [], set()
    for row, obj in _read_jsonl(path):
        try:
            tweet_id, text = str(obj["tweet_id"]), obj["text"]
            spans = tuple((int(s), int(e)) for s, e in obj.get("spans", []))
        except (KeyError, TypeError, ValueError):
            raise CorpusFormatError("expected tweet_id, text and [[start, end], ...] spans", row=row)
        if tweet_id in seen:
            raise CorpusFormatError(f"duplicate tweet id {tweet_id!r}", row=row)
        seen.add(tweet_id)
        _check_spans(spans, len(text), row=row)
        words, tags = spans_to_bio(text, spans)
        records.append(NerRecord(tweet_id=tweet_id, text=text, spans=spans, words=tuple(words), bio_tags=tuple(tags)))
    logger.info("✓ Loaded %d annotated tweets from %s", len(records), path.name)
    return tuple(records)


def make_ner_bundle(
    records: Sequence[NerRecord],
    dev_fraction: float = 0.15,
    test_fraction: float = 0.25,
    seed: int = 13,
) -> DatasetBundle:
    if not records:
        raise ValueError("no annotated tweets to build a NER bundle from")
    n = len(records)
    test_idx, dev_idx, train_idx = _carve(
        n, [_round_half_up(n * test_fraction), _round_half_up(n * dev_fraction)], seed
    )
    return DatasetBundle(
        task=Task.NER,
        train=tuple(records[i] for i in train_idx),
        dev=tuple(records[i] for i in dev_idx),
        test=tuple(records[i] for i in test_idx),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Labels and bundle files
# ---------------------------------------------------------------------------

PRESENCE_LABELS = ("no_adr", "adr")
POSITIVE_PRESENCE_LABEL = "adr"


def task_labels(task: Task) -> tuple[str, ...]:
    if task is Task.SENTIMENT:
        return tuple(sorted(label.value for label in SentimentLabel))
    if task is Task.PRESENCE:
        return PRESENCE_LABELS
    return BIO_TAGS


def example_label(example: Example) -> str:
    """String label of a classification example."""
    if isinstance(example, SentimentExample):
        return example.label.value
    if isinstance(example, TweetRecord):
        return PRESENCE_LABELS[int(example.has_adr)]
    raise TypeError("NER records carry per-word tags, not a single label")


def label_distribution(examples: Sequence[Example], task: Task) -> Counter:
    """Label counts for a split; for NER these are word-tag counts."""
    if task is Task.NER:
        return Counter(tag for ex in examples for tag in ex.bio_tags)
    return Counter(example_label(ex) for ex in examples)


def _dump_split(examples: Sequence[Example]) -> bytes:
    lines = (json.dumps(ex.model_dump(mode="json"), sort_keys=True, ensure_ascii=False) for ex in examples)
    return "".join(line + "\n" for line in lines).encode("utf-8")


def write_bundle(bundle: DatasetBundle, directory: str | Path) -> list[Path]:
    """Write a bundle as canonical JSONL: train.<variant>.jsonl, dev.jsonl, test.jsonl."""
    directory = Path(directory)
    files = {
        directory / f"train.{bundle.variant.value}.jsonl": bundle.train,
        directory / "dev.jsonl": bundle.dev,
        directory / "test.jsonl": bundle.test,
    }
    for path, examples in files.items():
        atomic_write_bytes(path, _dump_split(examples))
    meta = directory / f"meta.{bundle.variant.value}.json"
    write_json(meta, {
        "task": bundle.task.value,
        "variant": bundle.variant.value,
        "seed": bundle.seed,
        "sizes": {"train": len(bundle.train), "dev": len(bundle.dev), "test": len(bundle.test)},
    })
    return [*files, meta]


def read_bundle(directory: str | Path, task: Task, variant: TrainsetVariant = TrainsetVariant.NATURAL) -> DatasetBundle:
    directory = Path(directory)
    meta_path = directory / f"meta.{variant.value}.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no prepared {task.value}/{variant.value} bundle in {directory}")
    meta = read_json(meta_path)
    cls = EXAMPLE_TYPES[task]

    def split(name: str) -> tuple:
        return tuple(cls.model_validate(obj) for _, obj in _read_jsonl(directory / name))

    return DatasetBundle(
        task=task,
        train=split(f"train.{variant.value}.jsonl"),
        dev=split("dev.jsonl"),
        test=split("test.jsonl"),
        variant=variant,
        seed=meta["seed"],
    )
