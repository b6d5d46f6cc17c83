"""Insert/delete edit distance and similarity-fallback linking.

The fallback linker answers queries the alias table cannot match exactly
(misspellings, inflected forms) by ranking all aliases under the
normalized insert/delete distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aliases import AliasTable, fold_case, link_alias


def indel_distance(s1: str, s2: str) -> int:
    """Minimum number of single-character insertions and deletions
    transforming s1 into s2. Operates on Unicode scalar values."""
    if s1 == s2:
        return 0
    # keep the inner loop over the shorter string
    if len(s2) > len(s1):
        s1, s2 = s2, s1
    prev = list(range(len(s2) + 1))
    for i, ch1 in enumerate(s1, start=1):
        cur = [i] + [0] * len(s2)
        for j, ch2 in enumerate(s2, start=1):
            if ch1 == ch2:
                cur[j] = prev[j - 1]
            else:
                cur[j] = 1 + min(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def normalized_indel(s1: str, s2: str) -> float:
    """indel_distance(s1, s2) / (len(s1) + len(s2)); two empty strings are
    identical, so the distance is defined as 0."""
    total = len(s1) + len(s2)
    if total == 0:
        return 0.0
    return indel_distance(s1, s2) / total


@dataclass(frozen=True)
class SimilarityHit:
    alias: str
    qid: int
    distance: float


def _bulk_lcs(query: str, candidates: list[str]) -> np.ndarray:
    """Length of the longest common subsequence of query with every candidate.

    One DP row per query character, vectorized across all candidates:
    row[j] = max(prev[j], prev[j-1] + eq[j], row[j-1]) collapses to a
    running maximum because rows are non-decreasing.
    """
    n = len(candidates)
    max_len = max((len(c) for c in candidates), default=0)
    if max_len == 0 or not query:
        return np.zeros(n, dtype=np.int32)
    codes = np.full((n, max_len), -1, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    for i, cand in enumerate(candidates):
        codes[i, : len(cand)] = [ord(ch) for ch in cand]
        lengths[i] = len(cand)
    prev = np.zeros((n, max_len + 1), dtype=np.int32)
    for ch in query:
        eq = (codes == ord(ch)).astype(np.int32)
        stepped = np.maximum(prev[:, 1:], prev[:, :-1] + eq)
        cur = np.zeros_like(prev)
        cur[:, 1:] = np.maximum.accumulate(stepped, axis=1)
        prev = cur
    return prev[np.arange(n), lengths]


def rank_aliases(table: AliasTable, query: str) -> list[SimilarityHit]:
    """All aliases ordered by ascending normalized distance to the query;
    distance ties break lexicographically by alias. One hit per alias,
    carrying its top-ranked qid."""
    key = query if table.cased else fold_case(query)
    aliases = list(table.entries)
    lcs = _bulk_lcs(key, aliases)
    hits = []
    for alias, common in zip(aliases, lcs):
        total = len(key) + len(alias)
        distance = (total - 2 * int(common)) / total if total else 0.0
        hits.append(SimilarityHit(alias=alias, qid=table.entries[alias][0][0], distance=distance))
    hits.sort(key=lambda h: (h.distance, h.alias))
    return hits


def link_by_similarity(table: AliasTable, mention: str, k: int) -> list[int]:
    """Rank entities for a mention by string similarity over the alias table.

    An exact alias match short-circuits to the table lookup. Otherwise
    aliases are taken by ascending normalized distance (ties by alias),
    expanding each alias into its stored ranked qids, until k distinct
    qids are gathered.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    key = mention if table.cased else fold_case(mention)
    if key in table.entries:
        return link_alias(table, mention)
    result: list[int] = []
    seen: set[int] = set()
    for hit in rank_aliases(table, mention):
        for qid, _ in table.entries[hit.alias]:
            if qid not in seen:
                seen.add(qid)
                result.append(qid)
                if len(result) == k:
                    return result
    return result
