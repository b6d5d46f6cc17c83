"""Knowledge-base data model, JSONL ingestion, and coverage analyses.

Entities arrive as JSON Lines dumps (one entity object per line, with
optional ``wiki`` sub-object carrying page text and link annotations).
They are parsed into per-language partitions; links become mentions.
Coverage helpers answer how much of an evaluation set a KB can resolve
at all, which bounds any linker built on top of it.
"""

from __future__ import annotations

import gzip
import json
import logging
import lzma
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, NamedTuple

logger = logging.getLogger(__name__)


def parse_qid(value) -> int:
    """Parse a 'Q'-prefixed identifier (or bare integer) to a positive int."""
    if isinstance(value, int):
        qid = value
    elif isinstance(value, str):
        text = value[1:] if value[:1] in ("Q", "q") else value
        if not text.isdigit():
            raise ValueError(f"malformed qid: {value!r}")
        qid = int(text)
    else:
        raise ValueError(f"malformed qid: {value!r}")
    if qid <= 0:
        raise ValueError(f"qid must be positive: {value!r}")
    return qid


def format_qid(qid: int) -> str:
    return f"Q{qid}"


@dataclass(frozen=True)
class Entity:
    """One knowledge-base record."""

    qid: int
    label: str
    language: str
    description: str | None = None
    wiki_title: str | None = None
    wiki_text: str | None = None

    def __post_init__(self):
        if self.qid <= 0:
            raise ValueError(f"qid must be positive, got {self.qid}")
        if not self.label:
            raise ValueError("label must be non-empty")


@dataclass(frozen=True)
class Mention:
    """A surface span inside a context document, annotated with its gold entity."""

    doc_id: str
    surface: str
    start: int
    end: int
    context_text: str
    gold_qid: int
    language: str

    def __post_init__(self):
        if not (0 <= self.start < self.end <= len(self.context_text)):
            raise ValueError(f"span [{self.start}, {self.end}) out of bounds")
        if self.context_text[self.start : self.end] != self.surface:
            raise ValueError("surface does not match the context slice")
        if not self.surface:
            raise ValueError("surface must be non-empty")


class KnowledgeBase:
    """Per-language partitions of entities. Immutable once loading is done."""

    def __init__(self):
        self.partitions: dict[str, dict[int, Entity]] = {}

    def add_partition(self, language: str, entities: dict[int, Entity]) -> None:
        if language in self.partitions:
            raise ValueError(f"partition {language!r} already present")
        self.partitions[language] = entities

    def qids(self, language: str | None = None) -> set[int]:
        if language is not None:
            return set(self.partitions.get(language, {}))
        out: set[int] = set()
        for part in self.partitions.values():
            out.update(part)
        return out

    def entities(self, language: str) -> list[Entity]:
        return list(self.partitions.get(language, {}).values())


@dataclass
class MentionCounts:
    """Mention frequencies: per (entity, language) and per language totals."""

    per_entity: dict[tuple[int, str], int] = field(default_factory=dict)
    per_language: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_mentions(cls, mentions: Iterable[Mention]) -> "MentionCounts":
        per_entity: Counter = Counter()
        per_language: Counter = Counter()
        for m in mentions:
            per_entity[(m.gold_qid, m.language)] += 1
            per_language[m.language] += 1
        return cls(dict(per_entity), dict(per_language))


def open_text(path: str | Path, mode: str = "rt") -> IO[str]:
    """Open a text file; `.gz` and `.xz` suffixes select the decompressor."""
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode, encoding="utf-8")
    if path.suffix == ".xz":
        return lzma.open(path, mode, encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def _iter_lines(source) -> Iterator[str]:
    if isinstance(source, (str, Path)):
        with open_text(source) as handle:
            yield from handle
    else:
        yield from source


class LoadedPartition(NamedTuple):
    entities: dict[int, Entity]
    skipped: int


class ExtractedMentions(NamedTuple):
    mentions: list[Mention]
    dropped: int


def _parse_line(line: str) -> dict | None:
    line = line.strip()
    if not line:
        return None
    return json.loads(line)


def load_kb(source, language: str) -> LoadedPartition:
    """Load one per-language partition from a JSONL stream or path.

    Lines that fail the schema (missing/invalid qid or label, bad JSON)
    are skipped and counted, never fatal. Duplicate qids keep the first
    record seen.
    """
    entities: dict[int, Entity] = {}
    skipped = 0
    for lineno, line in enumerate(_iter_lines(source), start=1):
        try:
            record = _parse_line(line)
        except json.JSONDecodeError:
            logger.warning("line %d: invalid JSON, skipped", lineno)
            skipped += 1
            continue
        if record is None:
            continue
        try:
            qid = parse_qid(record["qid"])
            label = record["label"]
            if not isinstance(label, str) or not label:
                raise ValueError("label missing or empty")
        except (KeyError, ValueError, TypeError) as exc:
            logger.warning("line %d: %s, skipped", lineno, exc)
            skipped += 1
            continue
        if qid in entities:
            logger.warning("line %d: duplicate qid %s, kept first", lineno, format_qid(qid))
            skipped += 1
            continue
        wiki = record.get("wiki") or {}
        entities[qid] = Entity(
            qid=qid,
            label=label,
            language=language,
            description=record.get("description"),
            wiki_title=wiki.get("title"),
            wiki_text=wiki.get("text"),
        )
    return LoadedPartition(entities, skipped)


def extract_mentions(source, language: str) -> ExtractedMentions:
    """Extract one Mention per wiki link with a non-empty in-bounds span.

    Empty-surface links and out-of-bounds spans are dropped and counted.
    """
    mentions: list[Mention] = []
    dropped = 0
    for lineno, line in enumerate(_iter_lines(source), start=1):
        try:
            record = _parse_line(line)
        except json.JSONDecodeError:
            continue
        if record is None:
            continue
        wiki = record.get("wiki") or {}
        text = wiki.get("text")
        links = wiki.get("links") or []
        if not isinstance(text, str) or not links:
            continue
        try:
            doc_id = format_qid(parse_qid(record["qid"]))
        except (KeyError, ValueError, TypeError):
            doc_id = wiki.get("title") or f"line-{lineno}"
        for link in links:
            try:
                start = int(link["start"])
                end = int(link["end"])
                gold = parse_qid(link["qid"])
            except (KeyError, ValueError, TypeError):
                logger.warning("line %d: malformed link, dropped", lineno)
                dropped += 1
                continue
            if not (0 <= start <= end <= len(text)):
                logger.warning("line %d: link span [%d, %d) out of bounds, dropped", lineno, start, end)
                dropped += 1
                continue
            surface = text[start:end]
            if not surface:
                logger.warning("line %d: empty-surface link at %d, dropped", lineno, start)
                dropped += 1
                continue
            mentions.append(
                Mention(
                    doc_id=doc_id,
                    surface=surface,
                    start=start,
                    end=end,
                    context_text=text,
                    gold_qid=gold,
                    language=language,
                )
            )
    return ExtractedMentions(mentions, dropped)


def entity_to_json(entity: Entity) -> dict:
    record: dict = {"qid": format_qid(entity.qid), "label": entity.label}
    if entity.description is not None:
        record["description"] = entity.description
    wiki = {}
    if entity.wiki_title is not None:
        wiki["title"] = entity.wiki_title
    if entity.wiki_text is not None:
        wiki["text"] = entity.wiki_text
    if wiki:
        record["wiki"] = wiki
    return record


def write_kb(entities: Iterable[Entity], path: str | Path) -> None:
    with open_text(path, "wt") as handle:
        for entity in entities:
            handle.write(json.dumps(entity_to_json(entity), ensure_ascii=False) + "\n")


def save_mentions(mentions: Iterable[Mention], path: str | Path) -> None:
    """Write a mention store, one JSON document group per line.

    Grouping by document keeps the context text stored once per doc.
    """
    by_doc: dict[str, list[Mention]] = {}
    for m in mentions:
        by_doc.setdefault(m.doc_id, []).append(m)
    with open_text(path, "wt") as handle:
        for doc_id, group in by_doc.items():
            record = {
                "doc_id": doc_id,
                "context": group[0].context_text,
                "language": group[0].language,
                "mentions": [
                    {"start": m.start, "end": m.end, "qid": format_qid(m.gold_qid)}
                    for m in group
                ],
            }
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_mentions(path: str | Path) -> list[Mention]:
    mentions: list[Mention] = []
    with open_text(path) as handle:
        for line in handle:
            record = _parse_line(line)
            if record is None:
                continue
            context = record["context"]
            for m in record["mentions"]:
                start, end = int(m["start"]), int(m["end"])
                mentions.append(
                    Mention(
                        doc_id=record["doc_id"],
                        surface=context[start:end],
                        start=start,
                        end=end,
                        context_text=context,
                        gold_qid=parse_qid(m["qid"]),
                        language=record.get("language", "xx"),
                    )
                )
    return mentions


def recall_upper_bound(mentions: Iterable[Mention], kb_qids: set[int]) -> float:
    """Fraction of mention occurrences whose gold entity exists in the KB.

    Counted per occurrence, not per distinct entity: a repeated entity
    weighs as many times as it is mentioned.
    """
    mentions = list(mentions)
    if not mentions:
        raise ValueError("upper bound undefined for an empty mention set")
    covered = sum(1 for m in mentions if m.gold_qid in kb_qids)
    return covered / len(mentions)


def entity_set_intersection(eval_qids: set[int], kb_qids: set[int]) -> float:
    """|eval ∩ kb| / |eval|, computed on entity sets (each entity once)."""
    if not eval_qids:
        raise ValueError("intersection undefined for an empty evaluation set")
    return len(eval_qids & kb_qids) / len(eval_qids)


def select_description_language(
    qid: int, counts: MentionCounts, available: set[str]
) -> str:
    """Pick the description language for an entity.

    Order: most mentions of the entity in that language, then most
    mentions in the language overall, then the lexicographically
    smallest code. Languages absent from the counts count as zero.
    """
    if not available:
        raise ValueError("no candidate languages")
    # max() keeps the first maximal element, so iterate codes in sorted
    # order to make the final tie-break lexicographic.
    return max(
        sorted(available),
        key=lambda lang: (
            counts.per_entity.get((qid, lang), 0),
            counts.per_language.get(lang, 0),
        ),
    )
