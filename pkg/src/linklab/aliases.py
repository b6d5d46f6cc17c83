"""Exact-match alias tables: count-ranked alias -> entity lists."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .kb import open_text


def fold_case(text: str) -> str:
    """Locale-independent case fold.

    Collapses the dotted capital I fold ("i" + combining dot above) to a
    plain "i" so that e.g. Turkish-script aliases match ASCII queries.
    """
    return text.casefold().replace("i̇", "i")


@dataclass
class AliasTable:
    """Map from alias string to a ranked list of (qid, count), at most k long."""

    entries: dict[str, list[tuple[int, int]]]
    k: int
    cased: bool = True

    def __len__(self) -> int:
        return len(self.entries)


def build_alias_table(
    pairs: Iterable[tuple[str, int]], k: int, cased: bool = True
) -> AliasTable:
    """Count (alias, qid) training pairs and keep the top-k qids per alias.

    Ranking is by descending count; count ties break by smaller qid so
    the table is reproducible. Uncased tables fold aliases before
    counting.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    counts: defaultdict[str, Counter] = defaultdict(Counter)
    for alias, qid in pairs:
        if not alias:
            raise ValueError("aliases must be non-empty")
        key = alias if cased else fold_case(alias)
        counts[key][qid] += 1
    entries = {
        alias: sorted(counter.items(), key=lambda qc: (-qc[1], qc[0]))[:k]
        for alias, counter in counts.items()
    }
    return AliasTable(entries=entries, k=k, cased=cased)


def link_alias(table: AliasTable, mention: str) -> list[int]:
    """Ranked qids stored for the mention, or [] when the lookup misses."""
    key = mention if table.cased else fold_case(mention)
    return [qid for qid, _ in table.entries.get(key, [])]


def save_alias_table(table: AliasTable, path: str | Path) -> None:
    """One line per alias: ``alias<TAB>qid:count,qid:count,...`` in rank order."""
    with open_text(path, "wt") as handle:
        for alias, ranked in table.entries.items():
            cell = ",".join(f"{qid}:{count}" for qid, count in ranked)
            handle.write(f"{alias}\t{cell}\n")


def load_alias_table(
    path: str | Path, cased: bool = True, k: int | None = None
) -> AliasTable:
    entries: dict[str, list[tuple[int, int]]] = {}
    with open_text(path) as handle:
        for line in handle:
            line = line.rstrip("\n")
            if not line:
                continue
            alias, _, cell = line.partition("\t")
            ranked = []
            for item in cell.split(","):
                qid, _, count = item.partition(":")
                ranked.append((int(qid), int(count)))
            entries[alias] = ranked
    if k is None:
        k = max((len(r) for r in entries.values()), default=1)
    return AliasTable(entries=entries, k=k, cased=cased)
