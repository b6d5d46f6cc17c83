"""Recall-at-k computation and end-to-end evaluation.

The index population is selectable: entity descriptions, training
mention contexts standing in for the KB, or both together. Ranked
results are deduplicated by entity before the k cutoff, so duplicate
rows of one entity never consume ranking slots.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .encoder import EncoderParams, embed
from .kb import Mention
from .tokenizer import Vocabulary, compose_description, entity_body, extract_mention_window, tokenize
from .vindex import build_index, search

KB_MODES = ("descriptions", "contexts", "both")


@dataclass
class EvalReport:
    language: str
    kb_mode: str
    n_mentions: int
    kb_size: int
    recalls: dict[int, float]


def _first_k_distinct(qids: Sequence[int], k: int) -> list[int]:
    out: list[int] = []
    seen: set[int] = set()
    for qid in qids:
        if qid in seen:
            continue
        seen.add(qid)
        out.append(qid)
        if len(out) == k:
            break
    return out


def recall_at_k(ranked: Sequence[Sequence[int]], golds: Sequence[int], k: int) -> float:
    """Fraction of mentions whose gold qid is among the first k distinct
    qids of its ranked list."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(ranked) != len(golds):
        raise ValueError(f"{len(ranked)} ranked lists for {len(golds)} golds")
    if not ranked:
        raise ValueError("recall undefined for an empty mention set")
    hits = sum(1 for lst, gold in zip(ranked, golds) if gold in _first_k_distinct(lst, k))
    return hits / len(ranked)


def _mention_windows(
    mentions: Iterable[Mention], vocab: Vocabulary, context_size: int
) -> np.ndarray:
    docs: dict[str, object] = {}
    rows = []
    for m in mentions:
        doc = docs.get(m.doc_id)
        if doc is None:
            doc = tokenize(m.context_text, vocab)
            docs[m.doc_id] = doc
        rows.append(extract_mention_window(doc, m.start, m.end, context_size, vocab).ids)
    return np.stack(rows) if rows else np.empty((0, context_size), dtype=np.int32)


def build_population(
    entities,
    kb_mode: str,
    vocab: Vocabulary,
    context_size: int,
    train_mentions: Sequence[Mention] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Token rows and qids for the chosen index population."""
    if kb_mode not in KB_MODES:
        raise ValueError(f"kb_mode must be one of {KB_MODES}, got {kb_mode!r}")
    token_rows: list[np.ndarray] = []
    qids: list[int] = []
    if kb_mode in ("descriptions", "both"):
        for entity in entities:
            token_rows.append(
                compose_description(entity.label, entity_body(entity), context_size, vocab)
            )
            qids.append(entity.qid)
    if kb_mode in ("contexts", "both"):
        if not train_mentions:
            raise ValueError(f"kb_mode {kb_mode!r} needs training mentions to populate from")
        token_rows.extend(_mention_windows(train_mentions, vocab, context_size))
        qids.extend(m.gold_qid for m in train_mentions)
    if not token_rows:
        raise ValueError("empty index population")
    return np.stack(token_rows).astype(np.int32), np.asarray(qids, dtype=np.int64)


def _ranked_qids(index, query: np.ndarray, want_distinct: int) -> list[int]:
    # over-fetch 4x, doubling while deduplication starves the cutoff
    fetch = min(index.n, 4 * want_distinct)
    while True:
        hits = search(index, query, k=fetch)
        qids = [h.qid for h in hits]
        if len(set(qids)) >= want_distinct or fetch >= index.n:
            return qids
        fetch = min(index.n, fetch * 2)


def evaluate(
    params: EncoderParams,
    entities,
    eval_mentions: Sequence[Mention],
    ks: Sequence[int] = (1, 10),
    kb_mode: str = "descriptions",
    train_mentions: Sequence[Mention] | None = None,
    vocab: Vocabulary | None = None,
    context_size: int = 64,
    n_partitions: int = 1,
    probes: int | None = None,
    seed: int = 0,
    language: str | None = None,
) -> EvalReport:
    """Index the chosen population, embed the evaluation mentions, and
    report recall at each cutoff in `ks`."""
    if not eval_mentions:
        raise ValueError("no evaluation mentions")
    vocab = vocab or Vocabulary(params.vocab_size)
    ks = sorted(set(int(k) for k in ks))

    tokens, qids = build_population(entities, kb_mode, vocab, context_size, train_mentions)
    rows = embed(params, tokens)
    index = build_index(
        rows, qids, tokens, n_partitions=n_partitions, seed=seed, default_probes=probes
    )

    windows = _mention_windows(eval_mentions, vocab, context_size)
    queries = embed(params, windows)
    want = max(ks)
    ranked = [_ranked_qids(index, queries[i], want) for i in range(len(eval_mentions))]
    golds = [m.gold_qid for m in eval_mentions]
    recalls = {k: recall_at_k(ranked, golds, k) for k in ks}
    return EvalReport(
        language=language or eval_mentions[0].language,
        kb_mode=kb_mode,
        n_mentions=len(eval_mentions),
        kb_size=index.n,
        recalls=recalls,
    )


def report_tsv(report: EvalReport) -> str:
    """One line per cutoff: language, kb_mode, K, recall, n_mentions."""
    lines = [
        f"{report.language}\t{report.kb_mode}\t{k}\t{report.recalls[k]:.6f}\t{report.n_mentions}"
        for k in sorted(report.recalls)
    ]
    return "\n".join(lines) + "\n"


def report_from_tsv(text: str) -> EvalReport:
    language = kb_mode = None
    n_mentions = 0
    recalls: dict[int, float] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        language, kb_mode, k, recall, n_mentions = line.split("\t")
        recalls[int(k)] = float(recall)
    if language is None:
        raise ValueError("empty report")
    return EvalReport(
        language=language,
        kb_mode=kb_mode,
        n_mentions=int(n_mentions),
        kb_size=0,
        recalls=recalls,
    )
