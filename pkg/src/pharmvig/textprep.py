"""Tokenization, subword alignment, n-gram features and front padding."""
from __future__ import annotations

import re
import string
import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from transformers import BertTokenizerFast, PreTrainedTokenizerBase

BIO_TAGS = ("B", "I", "O")
# marks subtoken positions that carry no label (special tokens, word continuations)
IGNORE = "IGNORE"
DEFAULT_MAX_SEQ_LEN = 128

_CHUNK = re.compile(r"\S+")


def _is_punct(ch: str) -> bool:
    return ch in string.punctuation or unicodedata.category(ch).startswith("P")


def word_spans(text: str) -> list[tuple[int, int]]:
    """Character offsets of the word tokens of `text`.

    Whitespace separates chunks; punctuation at either end of a chunk is split
    off one character at a time.
    """
    spans = []
    for m in _CHUNK.finditer(text):
        start, end = m.span()
        i = start
        while i < end and _is_punct(text[i]):
            spans.append((i, i + 1))
            i += 1
        j = end
        while j > i and _is_punct(text[j - 1]):
            j -= 1
        if i < j:
            spans.append((i, j))
        spans.extend((k, k + 1) for k in range(j, end))
    return spans


def word_tokenize(text: str) -> list[str]:
    return [text[s:e] for s, e in word_spans(text)]


@dataclass(frozen=True)
class TokenizedText:
    words: tuple[str, ...]
    subtokens: tuple[int, ...]
    # (first subtoken index, piece count) per word; None when truncation dropped it
    word_to_subtoken: tuple[Optional[tuple[int, int]], ...]
    attention_mask: tuple[int, ...]
    truncated: bool


def load_vocab(path: str | Path, cased: bool) -> BertTokenizerFast:
    """Build a WordPiece tokenizer from a one-subtoken-per-line vocab file."""
    return BertTokenizerFast(vocab_file=str(path), do_lower_case=not cased)


def subword_tokenize(
    text: str,
    vocab: PreTrainedTokenizerBase,
    cased: bool,
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN,
) -> TokenizedText:
    if max_seq_len < 2:
        raise ValueError("max_seq_len must leave room for the classification and separator tokens")
    words = tuple(word_tokenize(text))
    model_words = list(words) if cased else [w.lower() for w in words]

    if model_words:
        enc = vocab(model_words, is_split_into_words=True, add_special_tokens=False)
        # words the normalizer erases entirely (zero-width characters) still need a piece
        pieceless = set(range(len(model_words))) - set(enc.word_ids())
        if pieceless:
            model_words = [vocab.unk_token if i in pieceless else w for i, w in enumerate(model_words)]
            enc = vocab(model_words, is_split_into_words=True, add_special_tokens=False)
        piece_ids = list(enc["input_ids"])
        piece_words = enc.word_ids()
    else:
        piece_ids, piece_words = [], []

    budget = max_seq_len - 2
    truncated = len(piece_ids) > budget
    piece_ids, piece_words = piece_ids[:budget], piece_words[:budget]

    spans: list[Optional[tuple[int, int]]] = [None] * len(words)
    for pos, w in enumerate(piece_words):
        if w is None:
            continue
        # +1 for the leading classification token
        if spans[w] is None:
            spans[w] = (pos + 1, 1)
        else:
            first, length = spans[w]
            spans[w] = (first, length + 1)

    subtokens = (vocab.cls_token_id, *piece_ids, vocab.sep_token_id)
    return TokenizedText(
        words=words,
        subtokens=tuple(subtokens),
        word_to_subtoken=tuple(spans),
        attention_mask=(1,) * len(subtokens),
        truncated=truncated,
    )


def align_bio_to_subtokens(t: TokenizedText, tags: Sequence[str]) -> list[str]:
    """Spread word tags onto subtokens: first piece carries the tag, the rest IGNORE."""
    if len(tags) != len(t.words):
        raise ValueError(f"{len(tags)} tags for {len(t.words)} words")
    aligned = [IGNORE] * len(t.subtokens)
    for tag, span in zip(tags, t.word_to_subtoken):
        if tag not in BIO_TAGS:
            raise ValueError(f"unknown tag {tag!r}")
        if span is not None:
            aligned[span[0]] = tag
    return aligned


def project_subtoken_predictions_to_words(t: TokenizedText, subtoken_tags: Sequence[str]) -> list[str]:
    tags = []
    for span in t.word_to_subtoken:
        if span is None or span[0] >= len(subtoken_tags):
            tags.append("O")
            continue
        tag = subtoken_tags[span[0]]
        tags.append(tag if tag in BIO_TAGS else "O")
    return tags


def bio_spans(tags: Sequence[str]) -> list[tuple[int, int]]:
    """Inclusive (first, last) word indices of each mention in a BIO sequence."""
    spans = []
    start = None
    for i, tag in enumerate(tags):
        if tag == "B" or (tag == "I" and start is None):
            if start is not None:
                spans.append((start, i - 1))
            start = i
        elif tag == "O" and start is not None:
            spans.append((start, i - 1))
            start = None
    if start is not None:
        spans.append((start, len(tags) - 1))
    return spans


class NgramVector(Counter):
    """Sparse n-gram counts; keys are space-joined n-grams."""


def ngram_featurize(words: Sequence[str], n_range: tuple[int, int] = (1, 2)) -> NgramVector:
    lo, hi = n_range
    if not 1 <= lo <= hi:
        raise ValueError(f"invalid n_range {n_range}")
    vec = NgramVector()
    for n in range(lo, hi + 1):
        for i in range(len(words) - n + 1):
            vec[" ".join(words[i:i + n])] += 1
    return vec


@dataclass(frozen=True)
class PaddedEmbeddingMatrix:
    matrix: np.ndarray
    valid_from: int

    def unpad(self) -> np.ndarray:
        return self.matrix[self.valid_from:]


def front_pad(token_embeddings, max_len: int, hidden_dim: Optional[int] = None) -> PaddedEmbeddingMatrix:
    """Prepend zero rows so the matrix has exactly `max_len` rows."""
    rows = np.asarray(token_embeddings)
    if rows.size == 0:
        if hidden_dim is None:
            raise ValueError("hidden_dim is required to pad an empty input")
        rows = np.zeros((0, hidden_dim), dtype=np.float32)
    if rows.ndim != 2:
        raise ValueError("token embeddings must be a list of vectors")
    if rows.shape[0] > max_len:
        raise ValueError(f"{rows.shape[0]} rows exceed max_len {max_len}")
    pad = max_len - rows.shape[0]
    matrix = np.concatenate([np.zeros((pad, rows.shape[1]), dtype=rows.dtype), rows], axis=0)
    return PaddedEmbeddingMatrix(matrix=matrix, valid_from=pad)
