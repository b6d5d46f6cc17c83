"""Immutable maximum-inner-product index with partitioned search.

Rows are unit vectors, so inner product equals cosine. Partitioning is
coarse k-means with dot-product assignment; probing all partitions
recovers exact brute-force search, which the test suite leans on as
ground truth. The negative-mining query retrieves nearest neighbours,
filters the gold entity, collapses duplicate runs, and samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import load_embeddings, save_embeddings
from .kb import open_text


class InsufficientNegativesError(RuntimeError):
    """The index cannot supply the requested number of distinct negatives."""


@dataclass(frozen=True)
class SearchHit:
    row: int
    qid: int
    score: float


class SearchIndex:
    """Unit-vector rows with qid and token payloads, coarsely partitioned."""

    def __init__(
        self,
        vectors: np.ndarray,
        row_qid: np.ndarray,
        row_tokens: np.ndarray,
        centroids: np.ndarray,
        assignment: np.ndarray,
        default_probes: int,
    ):
        self.vectors = vectors
        self.row_qid = row_qid
        self.row_tokens = row_tokens
        self.centroids = centroids
        self.assignment = assignment
        self.default_probes = default_probes
        self._first_row: dict[int, int] = {}
        for row, qid in enumerate(row_qid):
            self._first_row.setdefault(int(qid), row)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def n_partitions(self) -> int:
        return self.centroids.shape[0]

    def distinct_qids(self) -> set[int]:
        return set(self._first_row)

    def row_for_qid(self, qid: int) -> int | None:
        return self._first_row.get(qid)


def build_index(
    vectors: np.ndarray,
    qids,
    tokens: np.ndarray,
    n_partitions: int = 1,
    seed: int = 0,
    default_probes: int | None = None,
) -> SearchIndex:
    """Partition unit rows by 10 iterations of dot-product k-means.

    Centroids initialize from distinct random rows; the stored
    assignment maps every row to its highest-dot-product centroid, so
    the build is deterministic given the seed.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    qids = np.asarray(qids, dtype=np.int64)
    tokens = np.asarray(tokens, dtype=np.int32)
    n = vectors.shape[0]
    if n == 0:
        raise ValueError("cannot index zero rows")
    if not (1 <= n_partitions <= n):
        raise ValueError(f"n_partitions must be in [1, {n}], got {n_partitions}")
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-5):
        raise ValueError("index rows must be unit-norm")
    if qids.shape[0] != n or tokens.shape[0] != n:
        raise ValueError("vectors, qids, and tokens must align row-for-row")

    rng = np.random.default_rng(seed)
    centroids = vectors[rng.choice(n, size=n_partitions, replace=False)].copy()
    assignment = np.zeros(n, dtype=np.int64)
    for _ in range(10):
        assignment = np.argmax(vectors @ centroids.T, axis=1)
        for p in range(n_partitions):
            members = vectors[assignment == p]
            if len(members) == 0:
                continue  # empty cluster keeps its previous centroid
            mean = members.mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm > 0:
                centroids[p] = mean / norm
    assignment = np.argmax(vectors @ centroids.T, axis=1)

    probes = n_partitions if default_probes is None else default_probes
    probes = min(max(probes, 1), n_partitions)
    return SearchIndex(vectors, qids, tokens, centroids, assignment, probes)


def search(
    index: SearchIndex, query: np.ndarray, k: int, probes: int | None = None
) -> list[SearchHit]:
    """Top-k rows by inner product over the probed partitions.

    Probing every partition is an exact scan. Results sort by
    descending score; ties break by ascending row id.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    query = np.asarray(query, dtype=np.float64)
    probes = index.default_probes if probes is None else probes
    probes = min(max(probes, 1), index.n_partitions)

    if probes >= index.n_partitions:
        rows = np.arange(index.n)
        scores = index.vectors @ query
    else:
        centroid_scores = index.centroids @ query
        chosen = np.argsort(-centroid_scores, kind="stable")[:probes]
        rows = np.flatnonzero(np.isin(index.assignment, chosen))
        if len(rows) == 0:
            return []
        scores = index.vectors[rows] @ query

    order = np.argsort(-scores, kind="stable")[:k]
    return [
        SearchHit(row=int(rows[i]), qid=int(index.row_qid[rows[i]]), score=float(scores[i]))
        for i in order
    ]


def _collapse_runs(hits: list[SearchHit]) -> list[SearchHit]:
    """Keep the first hit of every run of equal qids."""
    out: list[SearchHit] = []
    for hit in hits:
        if not out or out[-1].qid != hit.qid:
            out.append(hit)
    return out


def query_negatives(
    index: SearchIndex,
    query: np.ndarray,
    gold_qid: int,
    neg: int,
    k0: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Mine `neg` hard-negative entities for one query embedding.

    Retrieves the k0 nearest rows, drops the gold entity, collapses
    successive duplicates, and doubles k until enough distinct qids
    survive (capped at the index size). The final neg survivors are
    sampled uniformly without replacement, distinct by qid.

    Returns (qids, token rows) of shape (neg,) and (neg, W).
    """
    if neg < 1:
        raise ValueError(f"neg must be >= 1, got {neg}")
    if k0 < 1:
        raise ValueError(f"k0 must be >= 1, got {k0}")
    if len(index.distinct_qids() - {gold_qid}) < neg:
        raise InsufficientNegativesError(
            f"index holds fewer than {neg} distinct qids besides {gold_qid}"
        )

    k = k0
    while True:
        hits = search(index, query, k=min(k, index.n))
        survivors = _collapse_runs([h for h in hits if h.qid != gold_qid])
        if len({h.qid for h in survivors}) >= neg:
            break
        if k >= index.n:
            raise InsufficientNegativesError(
                f"only {len(survivors)} negatives reachable with the default probes"
            )
        k *= 2

    chosen: list[SearchHit] = []
    seen: set[int] = set()
    for i in rng.permutation(len(survivors)):
        hit = survivors[int(i)]
        if hit.qid in seen:
            continue
        seen.add(hit.qid)
        chosen.append(hit)
        if len(chosen) == neg:
            break
    qids = np.asarray([h.qid for h in chosen], dtype=np.int64)
    tokens = index.row_tokens[[h.row for h in chosen]]
    return qids, tokens


def save_index(index: SearchIndex, emb_path: str | Path, tokens_path: str | Path) -> None:
    """Persist as an embedding file plus a qid -> token sidecar."""
    save_embeddings(emb_path, index.row_qid.tolist(), index.vectors)
    with open_text(tokens_path, "wt") as handle:
        for qid, row in zip(index.row_qid, index.row_tokens):
            handle.write(f"{int(qid)}\t" + " ".join(str(int(t)) for t in row) + "\n")


def load_index(
    emb_path: str | Path,
    tokens_path: str | Path,
    n_partitions: int = 1,
    seed: int = 0,
    default_probes: int | None = None,
) -> SearchIndex:
    vectors, qids = load_embeddings(emb_path)
    tokens: list[list[int]] = []
    with open_text(tokens_path) as handle:
        for line in handle:
            line = line.rstrip("\n")
            if not line:
                continue
            _, _, cell = line.partition("\t")
            tokens.append([int(t) for t in cell.split()])
    if len(tokens) != len(qids):
        raise ValueError(f"{len(tokens)} token rows for {len(qids)} embedding rows")
    return build_index(
        vectors,
        qids,
        np.asarray(tokens, dtype=np.int32),
        n_partitions=n_partitions,
        seed=seed,
        default_probes=default_probes,
    )
