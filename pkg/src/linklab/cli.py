"""Command-line entry point wiring the library into runnable pipelines.

Subcommands: ingest, table, link, baseline, embed-kb, index, epoch,
train, eval, bound. Exit codes: 0 success, 2 usage/format errors,
3 numeric failures. Every command writes a manifest next to its
outputs recording the resolved configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import aliases, encoder, evaluator, kb, stringsim, tokenizer, trainer, vindex

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


def _data_dir() -> Path:
    return Path(os.environ.get("LINKLAB_DATA_DIR", "."))


def _resolve(path: str | None, default_name: str | None = None) -> Path:
    if path is not None:
        return Path(path)
    if default_name is None:
        raise UsageError("missing required path")
    return _data_dir() / default_name


def _write_manifest(target: Path, command: str, args: argparse.Namespace,
                    config: dict, inputs: list, outputs: list, started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": getattr(args, "seed", None),
        "started": started,
        "finished": time.time(),
    }
    if target.is_dir():
        target = target / "manifest.json"
    else:
        target = target.with_name(target.name + ".manifest.json")
    target.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_train_config(args: argparse.Namespace) -> trainer.TrainConfig:
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.config:
        cfg = trainer.load_config(args.config, overrides)
    else:
        cfg = trainer.parse_config("", overrides)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg.validate()


def _parse_ks(text: str) -> list[int]:
    try:
        ks = sorted({int(part) for part in text.split(",") if part.strip()})
    except ValueError as exc:
        raise UsageError(f"bad --ks value: {text!r}") from exc
    if not ks or ks[0] < 1:
        raise UsageError(f"bad --ks value: {text!r}")
    return ks


def _default_params(args, cfg: trainer.TrainConfig) -> encoder.EncoderParams:
    if getattr(args, "params", None):
        return encoder.load_params(args.params)
    return encoder.EncoderParams.init(cfg.vocab_size, cfg.embed_dim, seed=cfg.seed)


def cmd_ingest(args: argparse.Namespace) -> int:
    started = time.time()
    source = Path(args.kb)
    if not source.exists():
        raise UsageError(f"input not found: {source}")
    entities, skipped = kb.load_kb(source, args.language)
    mentions, dropped = kb.extract_mentions(source, args.language)
    out = _resolve(args.out, "store")
    out.mkdir(parents=True, exist_ok=True)
    entity_path = out / "entities.jsonl"
    mention_path = out / "mentions.jsonl"
    kb.write_kb(entities.values(), entity_path)
    kb.save_mentions(mentions, mention_path)
    print(f"entities\t{len(entities)}")
    print(f"skipped_lines\t{skipped}")
    print(f"mentions\t{len(mentions)}")
    print(f"dropped_links\t{dropped}")
    _write_manifest(out, "ingest", args, {"language": args.language},
                    [source], [entity_path, mention_path], started)
    return EXIT_OK


def _mention_pairs(mentions) -> list[tuple[str, int]]:
    return [(m.surface, m.gold_qid) for m in mentions]


def cmd_table(args: argparse.Namespace) -> int:
    started = time.time()
    mentions = kb.load_mentions(args.mentions)
    table = aliases.build_alias_table(_mention_pairs(mentions), k=args.k, cased=not args.uncased)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    aliases.save_alias_table(table, out)
    print(f"aliases\t{len(table)}")
    _write_manifest(out, "table", args, {"k": args.k, "cased": not args.uncased},
                    [Path(args.mentions)], [out], started)
    return EXIT_OK


def cmd_link(args: argparse.Namespace) -> int:
    table = aliases.load_alias_table(args.table, cased=not args.uncased)
    if args.mode == "alias":
        qids = aliases.link_alias(table, args.mention)
    else:
        qids = stringsim.link_by_similarity(table, args.mention, k=args.k)
    print(" ".join(kb.format_qid(q) for q in qids) if qids else "NIL")
    return EXIT_OK


def _baseline_ranked(args, table, eval_mentions, ks) -> tuple[list[list[int]], int]:
    mode = args.mode
    want = max(ks)
    if mode == "alias":
        return [aliases.link_alias(table, m.surface) for m in eval_mentions], len(table)
    if mode == "string":
        return [stringsim.link_by_similarity(table, m.surface, want) for m in eval_mentions], len(table)
    # dense: rank stored alias embeddings by cosine against the embedded surface
    if not args.embeddings:
        raise UsageError("dense mode needs --embeddings")
    rows, qids = encoder.load_embeddings(args.embeddings)
    cfg = trainer.TrainConfig()
    params = _default_params(args, cfg)
    if params.dim != rows.shape[1]:
        raise UsageError(
            f"embedding file dim {rows.shape[1]} != encoder dim {params.dim}"
        )
    vocab = tokenizer.Vocabulary(params.vocab_size)
    tokens = np.zeros((len(qids), cfg.context_size), dtype=np.int32)
    index = vindex.build_index(rows, qids, tokens,
                               n_partitions=args.partitions, seed=args.seed or 0)
    ranked = []
    for m in eval_mentions:
        ids = tokenizer.pad_tokens(tokenizer.tokenize(m.surface, vocab).ids, cfg.context_size)
        query = encoder.embed(params, ids[None, :])[0]
        hits = vindex.search(index, query, k=min(index.n, 4 * want))
        ranked.append([h.qid for h in hits])
    return ranked, index.n


def cmd_baseline(args: argparse.Namespace) -> int:
    started = time.time()
    ks = _parse_ks(args.ks)
    eval_mentions = kb.load_mentions(args.mentions)
    if not eval_mentions:
        raise UsageError("no evaluation mentions")
    if args.mode in ("alias", "string"):
        if not args.table:
            raise UsageError(f"{args.mode} mode needs --table")
        table = aliases.load_alias_table(args.table, cased=not args.uncased)
    else:
        table = None
    ranked, kb_size = _baseline_ranked(args, table, eval_mentions, ks)
    golds = [m.gold_qid for m in eval_mentions]
    report = evaluator.EvalReport(
        language=eval_mentions[0].language,
        kb_mode=args.mode,
        n_mentions=len(eval_mentions),
        kb_size=kb_size,
        recalls={k: evaluator.recall_at_k(ranked, golds, k) for k in ks},
    )
    text = evaluator.report_tsv(report)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.write_text(text, encoding="utf-8")
        _write_manifest(out, "baseline", args, {"mode": args.mode, "ks": ks},
                        [Path(args.mentions)], [out], started)
    return EXIT_OK


def cmd_embed_kb(args: argparse.Namespace) -> int:
    started = time.time()
    cfg = _load_train_config(args)
    params = _default_params(args, cfg)
    vocab = tokenizer.Vocabulary(params.vocab_size)
    if args.mode == "descriptions":
        if not args.entities:
            raise UsageError("descriptions mode needs --entities")
        entities, _ = kb.load_kb(args.entities, args.language)
        items = [
            (e.qid, tokenizer.compose_description(e.label, tokenizer.entity_body(e),
                                                  cfg.context_size, vocab))
            for e in entities.values()
        ]
        inputs = [Path(args.entities)]
    else:
        if not args.table:
            raise UsageError("aliases mode needs --table")
        table = aliases.load_alias_table(args.table, cased=not args.uncased)
        items = []
        for alias, ranked in table.entries.items():
            ids = tokenizer.pad_tokens(tokenizer.tokenize(alias, vocab).ids, cfg.context_size)
            for qid, _ in ranked:
                items.append((qid, ids))
        inputs = [Path(args.table)]
    if not items:
        raise UsageError("nothing to embed")
    tokens = np.stack([ids for _, ids in items])
    qids = [qid for qid, _ in items]
    rows = encoder.embed(params, tokens)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    encoder.save_embeddings(out, qids, rows)
    outputs = [out]
    if args.tokens_out:
        tokens_path = Path(args.tokens_out)
        index = vindex.build_index(rows, qids, tokens, n_partitions=1, seed=cfg.seed)
        vindex.save_index(index, out, tokens_path)
        outputs.append(tokens_path)
    print(f"rows\t{len(items)}")
    _write_manifest(out, "embed-kb", args, trainer.config_to_dict(cfg), inputs, outputs, started)
    return EXIT_OK


def cmd_index(args: argparse.Namespace) -> int:
    started = time.time()
    index = vindex.load_index(
        args.embeddings, args.tokens,
        n_partitions=args.partitions, seed=args.seed or 0, default_probes=args.probes,
    )
    sizes = np.bincount(index.assignment, minlength=index.n_partitions)
    print(f"rows\t{index.n}")
    print(f"partitions\t{index.n_partitions}")
    print(f"probes\t{index.default_probes}")
    print(f"largest_partition\t{int(sizes.max())}")
    _write_manifest(Path(args.embeddings), "index", args,
                    {"partitions": args.partitions, "probes": index.default_probes},
                    [Path(args.embeddings), Path(args.tokens)], [], started)
    return EXIT_OK


def cmd_epoch(args: argparse.Namespace) -> int:
    started = time.time()
    cfg = _load_train_config(args)
    entities, _ = kb.load_kb(args.entities, args.language)
    mentions = kb.load_mentions(args.mentions)
    params = _default_params(args, cfg)
    vocab = tokenizer.Vocabulary(cfg.vocab_size)
    desc_tokens = np.stack([
        tokenizer.compose_description(e.label, tokenizer.entity_body(e), cfg.context_size, vocab)
        for e in entities.values()
    ])
    qids = np.asarray([e.qid for e in entities.values()], dtype=np.int64)
    rows = encoder.embed(params, desc_tokens)
    index = vindex.build_index(rows, qids, desc_tokens,
                               n_partitions=cfg.n_partitions, seed=cfg.seed,
                               default_probes=cfg.default_probes)
    rng = np.random.default_rng([cfg.seed, 1])
    sampler = trainer._BatchSampler(mentions, rng)
    windower = trainer.MentionWindower(vocab, cfg.context_size)
    steps = args.steps or cfg.steps_round1
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    writer = trainer.EpochWriter(out, cfg.batch_size, cfg.neg, cfg.context_size, steps)
    for _ in range(steps):
        writer.write(trainer.build_batch(
            sampler.next_batch(cfg.batch_size), index, params, cfg, vocab, rng,
            windower=windower, pool=mentions,
        ))
    writer.close()
    print(f"batches\t{steps}")
    _write_manifest(out, "epoch", args, trainer.config_to_dict(cfg),
                    [Path(args.entities), Path(args.mentions)], [out], started)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    started = time.time()
    cfg = _load_train_config(args)
    entities, _ = kb.load_kb(args.entities, args.language)
    train_mentions = kb.load_mentions(args.train_mentions)
    eval_mentions = kb.load_mentions(args.eval_mentions)
    out = _resolve(args.out, "run")
    out.mkdir(parents=True, exist_ok=True)
    result = trainer.run_finetuning(
        list(entities.values()), train_mentions, eval_mentions, cfg,
        out_dir=out, eval_ks=_parse_ks(args.ks),
    )
    final = result.reports[-1]
    for k in sorted(final.recalls):
        print(f"R@{k}\t{final.recalls[k]:.6f}")
    outputs = sorted(p for p in out.iterdir() if p.suffix in (".tsv", ".npz", ".gz"))
    _write_manifest(out, "train", args, trainer.config_to_dict(cfg),
                    [Path(args.entities), Path(args.train_mentions), Path(args.eval_mentions)],
                    outputs, started)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.time()
    cfg = _load_train_config(args)
    entities, _ = kb.load_kb(args.entities, args.language)
    eval_mentions = kb.load_mentions(args.mentions)
    train_mentions = kb.load_mentions(args.train_mentions) if args.train_mentions else None
    params = _default_params(args, cfg)
    report = evaluator.evaluate(
        params, list(entities.values()), eval_mentions,
        ks=_parse_ks(args.ks), kb_mode=args.kb_mode, train_mentions=train_mentions,
        vocab=tokenizer.Vocabulary(params.vocab_size), context_size=cfg.context_size,
        n_partitions=cfg.n_partitions, probes=cfg.default_probes, seed=cfg.seed,
    )
    text = evaluator.report_tsv(report)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.write_text(text, encoding="utf-8")
        _write_manifest(out, "eval", args, trainer.config_to_dict(cfg),
                        [Path(args.entities), Path(args.mentions)], [out], started)
    return EXIT_OK


def cmd_bound(args: argparse.Namespace) -> int:
    entities, _ = kb.load_kb(args.entities, args.language)
    mentions = kb.load_mentions(args.mentions)
    kb_qids = set(entities)
    upper = kb.recall_upper_bound(mentions, kb_qids)
    intersection = kb.entity_set_intersection({m.gold_qid for m in mentions}, kb_qids)
    text = f"recall_upper_bound\t{upper:.6f}\nentity_set_intersection\t{intersection:.6f}\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="linklab", description=__doc__)
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--threads", type=int, default=None, help="cap worker threads")
    parser.add_argument("--config", default=None, help="flat key = value config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key", default=None)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load a JSONL KB dump into entity and mention stores")
    p.add_argument("kb")
    p.add_argument("--language", default="xx")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("table", help="build an alias table from a mention store")
    p.add_argument("--mentions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--uncased", action="store_true")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("link", help="link one mention string against a table")
    p.add_argument("mention")
    p.add_argument("--table", required=True)
    p.add_argument("--mode", choices=("alias", "string"), default="alias")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--uncased", action="store_true")
    p.set_defaults(func=cmd_link)

    p = sub.add_parser("baseline", help="evaluate a mention-only linker")
    p.add_argument("--mode", choices=("alias", "string", "dense"), required=True)
    p.add_argument("--mentions", required=True)
    p.add_argument("--table", default=None)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--params", default=None)
    p.add_argument("--partitions", type=int, default=1)
    p.add_argument("--uncased", action="store_true")
    p.add_argument("--ks", default="1,10")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("embed-kb", help="embed entity descriptions or table aliases")
    p.add_argument("--mode", choices=("descriptions", "aliases"), default="descriptions")
    p.add_argument("--entities", default=None)
    p.add_argument("--table", default=None)
    p.add_argument("--params", default=None)
    p.add_argument("--language", default="xx")
    p.add_argument("--uncased", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--tokens-out", default=None)
    p.set_defaults(func=cmd_embed_kb)

    p = sub.add_parser("index", help="build a search index from persisted files and report stats")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--partitions", type=int, default=1)
    p.add_argument("--probes", type=int, default=None)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("epoch", help="generate one epoch of training batches")
    p.add_argument("--entities", required=True)
    p.add_argument("--mentions", required=True)
    p.add_argument("--params", default=None)
    p.add_argument("--language", default="xx")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_epoch)

    p = sub.add_parser("train", help="run the fine-tuning rounds")
    p.add_argument("--entities", required=True)
    p.add_argument("--train-mentions", required=True)
    p.add_argument("--eval-mentions", required=True)
    p.add_argument("--language", default="xx")
    p.add_argument("--ks", default="1,10")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint end to end")
    p.add_argument("--entities", required=True)
    p.add_argument("--mentions", required=True)
    p.add_argument("--train-mentions", default=None)
    p.add_argument("--params", default=None)
    p.add_argument("--kb-mode", choices=evaluator.KB_MODES, default="descriptions")
    p.add_argument("--language", default="xx")
    p.add_argument("--ks", default="1,10")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bound", help="coverage bounds of a KB over a mention store")
    p.add_argument("--entities", required=True)
    p.add_argument("--mentions", required=True)
    p.add_argument("--language", default="xx")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bound)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(args.threads))
    try:
        return args.func(args)
    except (UsageError, trainer.UnknownConfigKeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError, json.JSONDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (trainer.NumericError, trainer.TrainingDiverged, vindex.InsufficientNegativesError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def console_main() -> None:
    sys.exit(main())
