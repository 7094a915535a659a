from __future__ import annotations

import numpy as np
import pytest

from pharmvig.textprep import (
    IGNORE,
    align_bio_to_subtokens,
    bio_spans,
    front_pad,
    load_vocab,
    ngram_featurize,
    project_subtoken_predictions_to_words,
    subword_tokenize,
    word_tokenize,
)


@pytest.fixture(scope="module")
def cased_vocab(tiny_checkpoint):
    return load_vocab(tiny_checkpoint / "vocab.txt", cased=True)


@pytest.mark.parametrize("text,words", [
    ("I can't sleep!!", ["I", "can't", "sleep", "!", "!"]),
    ("(awful) side-effects", ["(", "awful", ")", "side-effects"]),
    ("so tired…", ["so", "tired", "…"]),
    ("   ", []),
])
def test_word_tokenize(text, words):
    assert word_tokenize(text) == words


def test_whole_word_pieces(cased_vocab):
    t = subword_tokenize("i took the pill", cased_vocab, cased=True)
    assert t.words == ("i", "took", "the", "pill")
    assert len(t.subtokens) == 6
    assert t.subtokens[0] == cased_vocab.cls_token_id and t.subtokens[-1] == cased_vocab.sep_token_id
    assert t.word_to_subtoken == ((1, 1), (2, 1), (3, 1), (4, 1))
    assert t.attention_mask == (1,) * 6
    assert not t.truncated


def test_unknown_word_splits_into_pieces(cased_vocab):
    t = subword_tokenize("Headache today", cased_vocab, cased=True)
    # H ##e ##a ##d ##a ##c ##h ##e
    assert t.word_to_subtoken == ((1, 8), (9, 1))
    assert len(t.subtokens) == 11


def test_uncased_variant_lowercases_before_lookup(cased_vocab):
    t = subword_tokenize("Headache today", cased_vocab, cased=False)
    assert t.words == ("Headache", "today")
    assert t.word_to_subtoken == ((1, 1), (2, 1))
    assert t.subtokens[1] == cased_vocab.convert_tokens_to_ids("headache")


def test_load_vocab_uncased_lowercases(tiny_checkpoint):
    vocab = load_vocab(tiny_checkpoint / "vocab.txt", cased=False)
    ids = vocab("HEADACHE", add_special_tokens=False)["input_ids"]
    assert ids == [vocab.convert_tokens_to_ids("headache")]


def test_truncation_keeps_special_tokens(cased_vocab):
    t = subword_tokenize("Headache today", cased_vocab, cased=True, max_seq_len=5)
    assert t.truncated
    assert len(t.subtokens) == 5
    assert t.subtokens[-1] == cased_vocab.sep_token_id
    assert t.word_to_subtoken == ((1, 3), None)


def test_empty_text(cased_vocab):
    t = subword_tokenize("", cased_vocab, cased=True)
    assert t.words == ()
    assert t.subtokens == (cased_vocab.cls_token_id, cased_vocab.sep_token_id)


def test_max_seq_len_must_fit_specials(cased_vocab):
    with pytest.raises(ValueError):
        subword_tokenize("pill", cased_vocab, cased=True, max_seq_len=1)


def test_first_piece_carries_the_tag(cased_vocab):
    t = subword_tokenize("Headache today", cased_vocab, cased=True)
    aligned = align_bio_to_subtokens(t, ["B", "O"])
    assert aligned[1] == "B" and aligned[9] == "O"
    assert [i for i, tag in enumerate(aligned) if tag != IGNORE] == [1, 9]
    assert project_subtoken_predictions_to_words(t, aligned) == ["B", "O"]


def test_truncated_words_project_to_outside(cased_vocab):
    t = subword_tokenize("severe Nausea today", cased_vocab, cased=True, max_seq_len=6)
    assert t.word_to_subtoken == ((1, 1), (2, 3), None)
    aligned = align_bio_to_subtokens(t, ["O", "B", "I"])
    predicted = ["I" if tag == IGNORE else tag for tag in aligned]
    assert project_subtoken_predictions_to_words(t, predicted) == ["O", "B", "O"]


def test_align_checks_lengths_and_tags(cased_vocab):
    t = subword_tokenize("i took", cased_vocab, cased=True)
    with pytest.raises(ValueError):
        align_bio_to_subtokens(t, ["O"])
    with pytest.raises(ValueError):
        align_bio_to_subtokens(t, ["O", "X"])


def test_bio_spans():
    assert bio_spans(["O", "B", "I", "O", "I", "B"]) == [(1, 2), (4, 4), (5, 5)]
    assert bio_spans(["O", "O"]) == []


def test_ngram_counts():
    vec = ngram_featurize(["a", "b", "a", "b"], (1, 2))
    assert vec == {"a": 2, "b": 2, "a b": 2, "b a": 1}
    assert ngram_featurize(["a"], (2, 2)) == {}
    with pytest.raises(ValueError):
        ngram_featurize(["a"], (0, 1))


def test_front_pad_puts_zeros_first():
    rows = np.arange(12, dtype=np.float32).reshape(3, 4) + 1
    padded = front_pad(rows, 5)
    assert padded.matrix.shape == (5, 4)
    assert padded.valid_from == 2
    assert not padded.matrix[:2].any()
    np.testing.assert_array_equal(padded.unpad(), rows)


def test_front_pad_edges():
    empty = front_pad([], 3, hidden_dim=4)
    assert empty.matrix.shape == (3, 4) and empty.valid_from == 3
    with pytest.raises(ValueError):
        front_pad([], 3)
    with pytest.raises(ValueError):
        front_pad(np.ones((4, 2)), 3)


def test_front_pad_keeps_row_norms():
    rows = np.random.default_rng(3).normal(size=(4, 6)).astype(np.float32)
    padded = front_pad(rows, 9)
    norms = np.linalg.norm(padded.matrix, axis=1)
    np.testing.assert_allclose(norms[padded.valid_from:], np.linalg.norm(rows, axis=1))
    assert not norms[:padded.valid_from].any()


@pytest.mark.parametrize("n_range", [(1, 1), (1, 2), (2, 3)])
def test_ngram_counts_sum_to_window_count(n_range):
    words = "the pill gave me a rash and the rash itched".split()
    vec = ngram_featurize(words, n_range)
    lo, hi = n_range
    assert sum(vec.values()) == sum(len(words) - n + 1 for n in range(lo, hi + 1))


def test_uncased_tokenization_ignores_case(cased_vocab):
    upper = subword_tokenize("Zombified", cased_vocab, cased=False)
    lower = subword_tokenize("zombified", cased_vocab, cased=False)
    assert upper.subtokens == lower.subtokens
    assert upper.words == ("Zombified",)
    assert subword_tokenize("Zombified", cased_vocab, cased=True).subtokens != lower.subtokens


def test_pieceless_word_becomes_unknown(cased_vocab):
    t = subword_tokenize("rash \u200b today", cased_vocab, cased=True)
    assert t.words == ("rash", "\u200b", "today")
    assert all(span is not None for span in t.word_to_subtoken)
    assert t.subtokens[t.word_to_subtoken[1][0]] == cased_vocab.unk_token_id
    aligned = align_bio_to_subtokens(t, ["B", "I", "O"])
    assert [tag for tag in aligned if tag != IGNORE] == ["B", "I", "O"]


WORD_POOL = ("i", "took", "the", "pill", "Zombified", "nausea", "Headache", "so", "dizzy", "!", "side-effects", "rash")


@pytest.mark.parametrize("seed", range(12))
def test_align_then_project_recovers_word_tags(cased_vocab, seed):
    rng = np.random.default_rng(seed)
    words = [str(w) for w in rng.choice(WORD_POOL, size=int(rng.integers(1, 15)))]
    tags = []
    for _ in words:
        tag = str(rng.choice(["B", "I", "O"]))
        tags.append("B" if tag == "I" and (not tags or tags[-1] == "O") else tag)
    t = subword_tokenize(" ".join(words), cased_vocab, cased=bool(seed % 2))
    assert list(t.words) == words and not t.truncated
    assert project_subtoken_predictions_to_words(t, align_bio_to_subtokens(t, tags)) == tags
