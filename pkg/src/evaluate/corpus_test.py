from __future__ import annotations

import datetime as dt
import json
import os
from collections import Counter
from pathlib import Path

import httpx
import pytest
from pydantic import ValidationError

from conftest import requires_public_data
from pharmvig.corpus import (
    DatasetBundle,
    DrugReviewLoader,
    HttpTweetResolver,
    JsonlTweetResolver,
    NerRecord,
    RawReview,
    RebalanceMode,
    RebalanceSpec,
    SentimentLabel,
    Task,
    TrainsetVariant,
    TweetRecord,
    example_label,
    label_distribution,
    load_drug_reviews,
    load_ner_corpus,
    load_tweet_corpus,
    make_ner_bundle,
    make_presence_bundles,
    make_sentiment_bundle,
    map_rating_to_sentiment,
    read_bundle,
    rebalance,
    spans_to_bio,
    task_labels,
    write_bundle,
)
from pharmvig.errors import CorpusFormatError

UCI_HEADER = "\tdrugName\tcondition\treview\trating\tdate\tusefulCount\n"


def write_reviews(path: Path, rows: list[tuple]) -> Path:
    lines = [UCI_HEADER]
    for rid, drug, condition, review, rating, date, useful in rows:
        lines.append(f'{rid}\t{drug}\t{condition}\t"{review}"\t{rating}\t{date}\t{useful}\n')
    path.write_text("".join(lines), encoding="utf-8")
    return path


def review(i: int, rating: int) -> RawReview:
    return RawReview(review_id=str(i), drug_name="drug", text=f"review number {i}", rating=rating,
                     date=dt.date(2015, 1, 1), useful_count=0)


def tweets(n_pos: int, n_neg: int) -> list[TweetRecord]:
    out = [TweetRecord(tweet_id=f"p{i}", text=f"adr tweet {i}", has_adr=True) for i in range(n_pos)]
    out += [TweetRecord(tweet_id=f"n{i}", text=f"plain tweet {i}", has_adr=False) for i in range(n_neg)]
    return out


# ---- drug reviews ----

def test_loader_reads_uci_layout(tmp_path):
    path = write_reviews(tmp_path / "train.tsv", [
        ("206461", "Valsartan", "Left Ventricular Dysfunction",
         "It has no side effect, I take it in combination of Bystolic 5 Mg", "9.0", "May 20, 2012", "27"),
        ("95260", "Guanfacine", "ADHD", "My son is halfway through his fourth week of Intuniv. We became concerned", "8.0",
         "April 27, 2010", "192"),
        ("92703", "Lybrel", "Birth Control", "I&#039;ve used it for a year", "5.0", "December 14, 2009", "17"),
    ])
    reviews = DrugReviewLoader(path).load()
    assert [r.review_id for r in reviews] == ["206461", "95260", "92703"]
    assert reviews[0].rating == 9
    assert reviews[0].date == dt.date(2012, 5, 20)
    assert reviews[1].useful_count == 192
    assert reviews[2].text == "I've used it for a year"
    assert not reviews[0].text.startswith('"')


def test_loader_keeps_quotes_inside_the_review(tmp_path):
    path = write_reviews(tmp_path / "quotes.tsv", [
        ("1", "A", "c", "&quot;Wonder drug&quot;", "9.0", "May 20, 2012", "1"),
        ("2", "B", "c", '""It works, &quot;mostly&quot;""', "8.0", "May 20, 2012", "1"),
    ])
    reviews = load_drug_reviews(path)
    assert reviews[0].text == '"Wonder drug"'
    assert reviews[1].text == 'It works, "mostly"'

def test_loader_reports_bad_rating_row(tmp_path):
    path = write_reviews(tmp_path / "bad.tsv", [
        ("1", "A", "c", "fine", "7.0", "May 20, 2012", "1"),
        ("2", "B", "c", "fine", "11.0", "May 20, 2012", "1"),
    ])
    with pytest.raises(CorpusFormatError) as err:
        load_drug_reviews(path)
    assert err.value.row == 2


def test_loader_rejects_duplicate_ids(tmp_path):
    path = write_reviews(tmp_path / "dup.tsv", [
        ("1", "A", "c", "fine", "7.0", "May 20, 2012", "1"),
        ("1", "B", "c", "fine", "6.0", "May 21, 2012", "1"),
    ])
    with pytest.raises(CorpusFormatError, match="duplicate"):
        load_drug_reviews(path)


@pytest.mark.parametrize("rating,label", [
    (1, SentimentLabel.NEGATIVE), (3, SentimentLabel.NEGATIVE), (4, SentimentLabel.NEUTRAL),
    (7, SentimentLabel.NEUTRAL), (8, SentimentLabel.POSITIVE), (10, SentimentLabel.POSITIVE),
])
def test_rating_thresholds(rating, label):
    assert map_rating_to_sentiment(rating) is label


@pytest.mark.parametrize("rating", [0, 11, True, 7.5])
def test_rating_out_of_range(rating):
    with pytest.raises(ValueError):
        map_rating_to_sentiment(rating)


def test_sentiment_bundle_split_is_seeded_and_disjoint():
    reviews = [review(i, (i % 10) + 1) for i in range(50)]
    test = [review(100 + i, 9) for i in range(5)]
    a = make_sentiment_bundle(reviews, test, dev_fraction=0.2, seed=7)
    b = make_sentiment_bundle(reviews, test, dev_fraction=0.2, seed=7)
    assert a == b
    assert len(a.dev) == 10 and len(a.train) == 40
    assert [ex.example_id for ex in a.test] == [r.review_id for r in test]
    assert not {ex.example_id for ex in a.train} & {ex.example_id for ex in a.dev}
    # both parts keep file order
    assert [int(ex.example_id) for ex in a.train] == sorted(int(ex.example_id) for ex in a.train)
    assert make_sentiment_bundle(reviews, test, seed=8).dev != a.dev


def test_sentiment_bundle_without_dev():
    reviews = [review(i, (i % 10) + 1) for i in range(12)]
    bundle = make_sentiment_bundle(reviews, dev_fraction=0.0, seed=7)
    assert bundle.dev == ()
    assert [ex.example_id for ex in bundle.train] == [r.review_id for r in reviews]

def test_sentiment_example_label_must_match_rating():
    from pharmvig.corpus import SentimentExample

    with pytest.raises(ValidationError):
        SentimentExample(example_id="1", text="x", label=SentimentLabel.POSITIVE, source_rating=2)


@requires_public_data
def test_public_reviews_label_shares():
    data_dir = Path(os.environ["PHARMVIG_DATA_DIR"])
    bundle = make_sentiment_bundle(
        load_drug_reviews(data_dir / "drugsComTrain_raw.tsv"),
        load_drug_reviews(data_dir / "drugsComTest_raw.tsv"),
        dev_fraction=0.2,
        seed=13,
    )
    expected = {
        "train": {"positive": 0.604, "neutral": 0.179, "negative": 0.217},
        "dev": {"positive": 0.605, "neutral": 0.177, "negative": 0.218},
        "test": {"positive": 0.602, "neutral": 0.178, "negative": 0.220},
    }
    for split, shares in expected.items():
        counts = label_distribution(getattr(bundle, split), Task.SENTIMENT)
        total = sum(counts.values())
        for label, share in shares.items():
            assert counts[label] / total == pytest.approx(share, abs=0.005), (split, label)


# ---- ADR tweets ----

def write_jsonl(path: Path, rows: list[dict]) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def test_tweet_corpus_records_unresolvable_tweets(tmp_path):
    annotations = write_jsonl(tmp_path / "ann.jsonl", [
        {"tweet_id": 1, "label": 1}, {"tweet_id": 2, "label": 0}, {"tweet_id": 3, "label": 0}, {"tweet_id": 4, "label": 1},
    ])
    texts = write_jsonl(tmp_path / "texts.jsonl", [
        {"tweet_id": "1", "text": "this drug gave me a rash"}, {"tweet_id": "3", "text": "   "}, {"tweet_id": "4", "text": 42},
    ])
    records, skips = load_tweet_corpus(annotations, JsonlTweetResolver(texts))
    assert [r.tweet_id for r in records] == ["1", "2", "3", "4"]
    assert records[0].has_adr and records[0].text == "this drug gave me a rash"
    assert records[3].text is None
    assert skips.total == 4 and skips.skipped_ids == ("2", "3", "4") and skips.usable == 1


def test_empty_annotation_file_gives_no_tweets(tmp_path):
    annotations = tmp_path / "ann.jsonl"
    annotations.write_text("", encoding="utf-8")
    records, skips = load_tweet_corpus(annotations, JsonlTweetResolver(write_jsonl(tmp_path / "t.jsonl", [])))
    assert records == ()
    assert skips.total == 0 and skips.skipped == 0 and skips.skipped_ids == ()


@pytest.mark.parametrize("rows,match", [
    ([{"tweet_id": 1, "label": 2}], "0 or 1"),
    ([{"tweet_id": 1, "label": 1}, {"tweet_id": 1, "label": 0}], "duplicate"),
    ([{"tweet": 1}], "tweet_id and label"),
])
def test_tweet_annotation_errors(tmp_path, rows, match):
    annotations = write_jsonl(tmp_path / "ann.jsonl", rows)
    with pytest.raises(CorpusFormatError, match=match):
        load_tweet_corpus(annotations, JsonlTweetResolver(write_jsonl(tmp_path / "t.jsonl", [])))


def test_http_resolver_maps_failures_to_misses():
    def handler(request: httpx.Request) -> httpx.Response:
        assert request.headers["Authorization"] == "Bearer secret"
        tweet_id = request.url.path.rsplit("/", 1)[-1]
        if tweet_id == "1":
            return httpx.Response(200, json={"data": {"text": "headache all day"}})
        if tweet_id == "2":
            return httpx.Response(200, json={"text": "no side effects"})
        return httpx.Response(404, json={"errors": ["not found"]})

    client = httpx.Client(base_url="https://tweets.example/", transport=httpx.MockTransport(handler),
                          headers={"Authorization": "Bearer secret"})
    resolver = HttpTweetResolver("https://tweets.example/", client=client)
    assert resolver.resolve("1") == "headache all day"
    assert resolver.resolve("2") == "no side effects"
    assert resolver.resolve("3") is None
    resolver.close()


# ---- rebalancing ----

def test_oversample_balances_by_duplication():
    train = tweets(275, 2226)
    spec = RebalanceSpec(mode=RebalanceMode.OVERSAMPLE, target_minority_fraction=0.5, seed=3)
    out = rebalance(train, spec)
    counts = Counter(t.has_adr for t in out)
    assert counts[True] == counts[False] == 2226
    # every original example survives, the minority is duplicated near-evenly
    assert {t.tweet_id for t in train} == {t.tweet_id for t in out}
    copies = Counter(t.tweet_id for t in out if t.has_adr)
    assert max(copies.values()) - min(copies.values()) <= 1
    assert rebalance(train, spec) == out


def test_oversample_small_cases():
    spec = RebalanceSpec(mode=RebalanceMode.OVERSAMPLE, target_minority_fraction=0.5, seed=0)
    out = rebalance(tweets(1, 4), spec)
    assert Counter(t.tweet_id for t in out) == {"p0": 4, "n0": 1, "n1": 1, "n2": 1, "n3": 1}
    balanced = tweets(2, 2)
    assert sorted(t.tweet_id for t in rebalance(balanced, spec)) == sorted(t.tweet_id for t in balanced)

def test_undersample_to_one_third_positive():
    train = tweets(275, 2226)
    spec = RebalanceSpec(mode=RebalanceMode.UNDERSAMPLE, target_minority_fraction=1 / 3, seed=3)
    out = rebalance(train, spec)
    counts = Counter(t.has_adr for t in out)
    assert counts[True] == 275 and counts[False] == 550
    assert abs(counts[True] - len(out) / 3) <= 1
    assert len({t.tweet_id for t in out}) == len(out)


def test_undersample_clamps_when_majority_is_short():
    train = tweets(40, 50)
    out = rebalance(train, RebalanceSpec(mode=RebalanceMode.UNDERSAMPLE, target_minority_fraction=0.25))
    assert len(out) == 90


def test_rebalance_needs_two_classes():
    with pytest.raises(ValueError, match="two classes"):
        rebalance(tweets(5, 0), RebalanceSpec(mode=RebalanceMode.OVERSAMPLE, target_minority_fraction=0.5))


def test_oversample_spec_must_balance():
    with pytest.raises(ValidationError):
        RebalanceSpec(mode=RebalanceMode.OVERSAMPLE, target_minority_fraction=0.3)


def test_presence_bundles_share_dev_and_test():
    records = tweets(30, 170) + [TweetRecord(tweet_id="gone", text=None, has_adr=True)]
    bundles = make_presence_bundles(records, seed=11)
    natural = bundles[TrainsetVariant.NATURAL]
    assert len(natural.test) == 40 and len(natural.dev) == 40 and len(natural.train) == 120
    natural_ids = {t.tweet_id for t in natural.train}
    for variant, bundle in bundles.items():
        assert bundle.variant is variant
        assert bundle.dev == natural.dev and bundle.test == natural.test
        # rebalancing never pulls dev/test examples into train
        assert {t.tweet_id for t in bundle.train} <= natural_ids
    assert "gone" not in {t.tweet_id for b in bundles.values() for t in (*b.train, *b.dev, *b.test)}
    over = Counter(example_label(t) for t in bundles[TrainsetVariant.OVERSAMPLED].train)
    assert over["adr"] == over["no_adr"]


def test_bundle_rejects_shared_ids():
    t = tweets(2, 2)
    with pytest.raises(ValidationError, match="share"):
        DatasetBundle(task=Task.PRESENCE, train=tuple(t), dev=(t[0],), test=(), seed=1)


# ---- NER subset ----

def test_spans_to_bio_marks_mentions():
    text = "My head is spinning, so dizzy!"
    words, tags = spans_to_bio(text, [(3, 19), (24, 29)])
    assert words == ["My", "head", "is", "spinning", ",", "so", "dizzy", "!"]
    assert tags == ["O", "B", "I", "I", "O", "O", "B", "O"]


def test_adjacent_mentions_start_fresh():
    words, tags = spans_to_bio("nausea headache", [(0, 6), (7, 15)])
    assert tags == ["B", "B"]


def test_multiword_mention_continues_inside():
    words, tags = spans_to_bio("I was sick to my stomach", [(6, 24)])
    assert words == ["I", "was", "sick", "to", "my", "stomach"]
    assert tags == ["O", "O", "B", "I", "I", "I"]

def test_ner_record_rejects_orphan_inside_tag():
    with pytest.raises(ValidationError, match="I tag"):
        NerRecord(tweet_id="1", text="a b", words=("a", "b"), bio_tags=("O", "I"))


def test_ner_corpus_rejects_overlapping_spans(tmp_path):
    path = write_jsonl(tmp_path / "ner.jsonl", [{"tweet_id": 1, "text": "severe nausea today", "spans": [[0, 13], [7, 19]]}])
    with pytest.raises(CorpusFormatError, match="overlaps") as err:
        load_ner_corpus(path)
    assert err.value.row == 1


def test_ner_bundle_fractions(tmp_path):
    rows = [{"tweet_id": i, "text": f"tweet {i} gave me nausea", "spans": [[len(f"tweet {i} gave me "), len(f"tweet {i} gave me nausea")]]}
            for i in range(40)]
    records = load_ner_corpus(write_jsonl(tmp_path / "ner.jsonl", rows))
    assert records[0].bio_tags == ("O", "O", "O", "O", "B")
    bundle = make_ner_bundle(records, seed=2)
    assert (len(bundle.train), len(bundle.dev), len(bundle.test)) == (24, 6, 10)
    assert label_distribution(bundle.test, Task.NER) == Counter({"O": 40, "B": 10})


def test_bundle_files_round_trip(tmp_path):
    bundles = make_presence_bundles(tweets(10, 30), seed=4)
    for bundle in bundles.values():
        write_bundle(bundle, tmp_path)
    assert read_bundle(tmp_path, Task.PRESENCE, TrainsetVariant.UNDERSAMPLED) == bundles[TrainsetVariant.UNDERSAMPLED]
    with pytest.raises(FileNotFoundError):
        read_bundle(tmp_path / "sentiment", Task.SENTIMENT)


def test_task_labels():
    assert task_labels(Task.SENTIMENT) == ("negative", "neutral", "positive")
    assert task_labels(Task.PRESENCE) == ("no_adr", "adr")
    assert task_labels(Task.NER) == ("B", "I", "O")
