"""Deterministic hashing tokenizer and fixed-width input windows.

Text splits on Unicode whitespace, with each maximal punctuation run cut
off as its own token. Token ids come from a 64-bit FNV-1a hash of the
UTF-8 bytes, so identical text maps to identical ids on every platform
without any model assets. Ids 0 and 1 are reserved for padding and the
mention marker.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass
from typing import ClassVar, NamedTuple

import numpy as np

from .kb import Entity

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class Vocabulary:
    """Hashed id space: PAD=0, MENTION_MARK=1, content ids in [2, size)."""

    size: int = 65536

    PAD: ClassVar[int] = 0
    MENTION_MARK: ClassVar[int] = 1

    def __post_init__(self):
        if self.size < 3:
            raise ValueError(f"vocabulary size must be >= 3, got {self.size}")

    def token_id(self, token: str) -> int:
        return 2 + _fnv1a64(token.encode("utf-8")) % (self.size - 2)


@dataclass
class TokenizedDoc:
    """Token ids plus, per token, the character span it covers."""

    ids: np.ndarray  # (n,) int32
    spans: list[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.spans)


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(text: str, vocab: Vocabulary) -> TokenizedDoc:
    ids: list[int] = []
    spans: list[tuple[int, int]] = []
    i, n = 0, len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        j = i
        punct = _is_punct(text[i])
        while j < n and not text[j].isspace() and _is_punct(text[j]) == punct:
            j += 1
        ids.append(vocab.token_id(text[i:j]))
        spans.append((i, j))
        i = j
    return TokenizedDoc(ids=np.asarray(ids, dtype=np.int32), spans=spans)


def entity_body(entity: Entity) -> str:
    """Description text for an entity: the page text when available,
    otherwise the short description."""
    if entity.wiki_text:
        return entity.wiki_text
    return entity.description or ""


def _padded(parts: list[np.ndarray], window: int) -> np.ndarray:
    out = np.full(window, Vocabulary.PAD, dtype=np.int32)
    seq = np.concatenate(parts) if parts else np.empty(0, dtype=np.int32)
    seq = seq[:window]
    out[: len(seq)] = seq
    return out


def compose_description(label: str, body: str, window: int, vocab: Vocabulary) -> np.ndarray:
    """Entity input of exactly `window` ids: the label between two mention
    markers, then body tokens, truncated and right-padded."""
    if window < 3:
        raise ValueError(f"window must be >= 3, got {window}")
    mark = np.asarray([Vocabulary.MENTION_MARK], dtype=np.int32)
    label_ids = tokenize(label, vocab).ids[: window - 2]
    body_ids = tokenize(body, vocab).ids[: window - 2 - len(label_ids)]
    return _padded([mark, label_ids, mark, body_ids], window)


class MentionWindow(NamedTuple):
    ids: np.ndarray  # (window,) int32
    truncated: bool  # closing marker lost to an over-long mention


def extract_mention_window(
    doc: TokenizedDoc, start: int, end: int, window: int, vocab: Vocabulary
) -> MentionWindow:
    """Cut a `window`-id block around a mention span, markers included.

    The mention sits in the middle of the content budget; when the doc
    boundary cuts one side short, the surplus shifts to the other side.
    A mention longer than the budget keeps its first window-2 tokens
    and loses the closing marker, reported via the truncated flag.
    """
    if window < 3:
        raise ValueError(f"window must be >= 3, got {window}")
    tok_start = tok_end = None
    for idx, (a, b) in enumerate(doc.spans):
        if a < end and start < b:
            if tok_start is None:
                tok_start = idx
            tok_end = idx + 1
    if tok_start is None:
        raise ValueError(f"span [{start}, {end}) covers no tokens")

    mark = np.asarray([Vocabulary.MENTION_MARK], dtype=np.int32)
    mention_ids = doc.ids[tok_start:tok_end]
    budget = window - 2
    if len(mention_ids) > budget:
        return MentionWindow(_padded([mark, mention_ids[:budget]], window), True)

    context = budget - len(mention_ids)
    left_want = context // 2
    avail_left = tok_start
    avail_right = len(doc) - tok_end
    total = min(context, avail_left + avail_right)
    left = min(avail_left, max(left_want, total - avail_right))
    right = total - left
    parts = [
        doc.ids[tok_start - left : tok_start],
        mark,
        mention_ids,
        mark,
        doc.ids[tok_end : tok_end + right],
    ]
    return MentionWindow(_padded(parts, window), False)


def pad_tokens(ids: np.ndarray, window: int) -> np.ndarray:
    """Truncate/right-pad a plain id sequence to exactly `window` ids."""
    return _padded([np.asarray(ids, dtype=np.int32)], window)
