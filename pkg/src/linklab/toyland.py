"""Seeded synthetic corpus for desk-scale experiments.

Two hundred entities, each with a 2-3 word label, an intro paragraph of
40-80 words containing the label, and 20 mentions hosted inside other
entities' pages, one mention per 60-120-word paragraph. Ten percent of
mention surfaces are inflected (an apostrophe-joined suffix), so exact
lookups miss them while string and dense linkers can still recover the
stem. Every entity keeps 15 mentions for training and 5 for evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kb import Entity, Mention, format_qid, open_text, save_mentions

LANGUAGE = "xx"

_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"
_SUFFIXES = [
    "da", "de", "den", "nin", "nun", "ye", "te", "ta",
    "lar", "ler", "um", "in", "an", "os",
]


@dataclass
class ToyCorpus:
    entities: list[Entity]
    train_mentions: list[Mention]
    eval_mentions: list[Mention]
    language: str = LANGUAGE
    labels: dict[int, str] = field(default_factory=dict)

    @property
    def all_mentions(self) -> list[Mention]:
        return self.train_mentions + self.eval_mentions

    def inflected(self, mentions: list[Mention]) -> list[Mention]:
        """Mentions whose surface is not the plain entity label."""
        return [m for m in mentions if m.surface != self.labels[m.gold_qid]]


def _word_pool(rng: np.random.Generator, count: int, syllables: tuple[int, int], taken: set[str]) -> list[str]:
    pool: list[str] = []
    while len(pool) < count:
        n = int(rng.integers(syllables[0], syllables[1] + 1))
        word = "".join(
            _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(n)
        )
        if word not in taken:
            taken.add(word)
            pool.append(word)
    return pool


@dataclass
class _Slot:
    target: int  # entity index
    inflected: bool
    is_eval: bool


def generate(
    seed: int = 7,
    n_entities: int = 200,
    mentions_per_entity: int = 20,
    train_per_entity: int = 15,
) -> ToyCorpus:
    """Deterministically build the corpus for a seed."""
    if not 0 < train_per_entity < mentions_per_entity:
        raise ValueError("need at least one training and one evaluation mention per entity")
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    name_pool = [w.capitalize() for w in _word_pool(rng, max(700, 3 * n_entities + 50), (2, 4), taken)]
    topic_pool = _word_pool(rng, 4 * n_entities, (2, 3), taken)
    common_pool = _word_pool(rng, 40, (1, 2), taken)
    desc_filler = _word_pool(rng, 150, (2, 3), taken)
    ctx_filler = _word_pool(rng, 300, (2, 3), taken)

    name_iter = iter(rng.permutation(name_pool))
    labels = []
    topics = []
    for i in range(n_entities):
        n_words = int(rng.integers(2, 4))
        labels.append(" ".join(next(name_iter) for _ in range(n_words)))
        topics.append(topic_pool[4 * i : 4 * (i + 1)])

    def filler(pool: list[str], count: int) -> list[str]:
        words = []
        for _ in range(count):
            source = common_pool if rng.random() < 0.3 else pool
            words.append(source[int(rng.integers(len(source)))])
        return words

    # mention slots: exactly 10% inflected, 15/5 train-eval per entity
    slots: list[_Slot] = []
    for target in range(n_entities):
        order = rng.permutation(mentions_per_entity)
        for j in range(mentions_per_entity):
            slots.append(_Slot(target=target, inflected=False, is_eval=order[j] >= train_per_entity))
    n_inflected = round(0.10 * len(slots))
    for idx in rng.choice(len(slots), size=n_inflected, replace=False):
        slots[int(idx)].inflected = True
    slots = [slots[int(i)] for i in rng.permutation(len(slots))]

    # deal slots onto host pages, avoiding self-mentions
    per_page = len(slots) // n_entities
    pages: list[list[_Slot]] = [
        slots[i * per_page : (i + 1) * per_page] for i in range(n_entities)
    ]
    for host in range(n_entities):
        for pos, slot in enumerate(pages[host]):
            if slot.target != host:
                continue
            other = (host + 1) % n_entities
            while pages[other][pos].target == host:
                other = (other + 1) % n_entities
            pages[host][pos], pages[other][pos] = pages[other][pos], pages[host][pos]

    def surface_for(slot: _Slot) -> str:
        label = labels[slot.target]
        if not slot.inflected:
            return label
        return label + "'" + _SUFFIXES[int(rng.integers(len(_SUFFIXES)))]

    def paragraph(slot: _Slot, first_on_page: bool) -> tuple[str, int, str]:
        """Returns (text, surface char offset, surface)."""
        surface = surface_for(slot)
        surface_words = surface.split(" ")
        length = int(rng.integers(60, 121))
        n_slots = length - len(surface_words)
        words = filler(ctx_filler, n_slots)
        # entity-specific topic words correlate context with entity
        low = 32 if first_on_page else 0
        topic_count = int(rng.integers(3, 7))
        for _ in range(topic_count):
            pos = int(rng.integers(low, n_slots))
            words[pos] = topics[slot.target][int(rng.integers(4))]
        insert_low = 34 if first_on_page else 8
        insert = int(rng.integers(insert_low, n_slots - 8))
        words[insert:insert] = surface_words
        offset = sum(len(w) + 1 for w in words[:insert])
        return " ".join(words), offset, surface

    entities: list[Entity] = []
    train_mentions: list[Mention] = []
    eval_mentions: list[Mention] = []
    for host in range(n_entities):
        qid = host + 1
        label_words = labels[host].split(" ")
        intro_len = int(rng.integers(40, 81))
        intro = label_words + filler(desc_filler, intro_len - len(label_words))
        parts = [" ".join(intro)]
        links = []
        offset = len(parts[0])
        for pos, slot in enumerate(pages[host]):
            text, local, surface = paragraph(slot, first_on_page=pos == 0)
            start = offset + 1 + local  # +1 for the joining newline
            links.append((slot, start, start + len(surface)))
            parts.append(text)
            offset += 1 + len(text)
        page_text = "\n".join(parts)
        entities.append(
            Entity(
                qid=qid,
                label=labels[host],
                language=LANGUAGE,
                description=" ".join(intro[:12]),
                wiki_title=labels[host],
                wiki_text=page_text,
            )
        )
        for slot, start, end in links:
            mention = Mention(
                doc_id=format_qid(qid),
                surface=page_text[start:end],
                start=start,
                end=end,
                context_text=page_text,
                gold_qid=slot.target + 1,
                language=LANGUAGE,
            )
            (eval_mentions if slot.is_eval else train_mentions).append(mention)

    return ToyCorpus(
        entities=entities,
        train_mentions=train_mentions,
        eval_mentions=eval_mentions,
        labels={i + 1: labels[i] for i in range(n_entities)},
    )


def corpus_jsonl_lines(corpus: ToyCorpus):
    """Entity records in the ingestion format, links included."""
    by_doc: dict[str, list[Mention]] = {}
    for m in corpus.all_mentions:
        by_doc.setdefault(m.doc_id, []).append(m)
    for entity in corpus.entities:
        record = {
            "qid": format_qid(entity.qid),
            "label": entity.label,
            "description": entity.description,
            "wiki": {
                "title": entity.wiki_title,
                "text": entity.wiki_text,
                "links": [
                    {"start": m.start, "end": m.end, "qid": format_qid(m.gold_qid)}
                    for m in sorted(by_doc.get(format_qid(entity.qid), []), key=lambda m: m.start)
                ],
            },
        }
        yield json.dumps(record, ensure_ascii=False)


def write_corpus(corpus: ToyCorpus, out_dir: str | Path) -> dict[str, Path]:
    """Write kb.jsonl plus train/eval mention stores; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "kb": out / "kb.jsonl",
        "train": out / "train_mentions.jsonl",
        "eval": out / "eval_mentions.jsonl",
    }
    with open_text(paths["kb"], "wt") as handle:
        for line in corpus_jsonl_lines(corpus):
            handle.write(line + "\n")
    save_mentions(corpus.train_mentions, paths["train"])
    save_mentions(corpus.eval_mentions, paths["eval"])
    return paths
