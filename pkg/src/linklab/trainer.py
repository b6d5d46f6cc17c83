"""Bi-encoder fine-tuning: in-batch sampled softmax over scaled cosine
logits, Adam updates, epoch serialization, and round orchestration.

A training round embeds the KB with the current parameters, rebuilds the
search index, generates an epoch of batches with freshly mined hard
negatives, trains through the epoch, and evaluates. Batches lay out
entities mention-major: the block for mention i occupies columns
[i*(1+neg), (i+1)*(1+neg)), positive first, and the target row for
mention i is one-hot at column i*(1+neg).
"""

from __future__ import annotations

import dataclasses
import gzip
import logging
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .encoder import EncoderParams, embed, embed_backward
from .evaluator import EvalReport, evaluate, report_from_tsv, report_tsv
from .kb import Entity, Mention
from .tokenizer import Vocabulary, compose_description, entity_body, extract_mention_window, tokenize
from .vindex import SearchIndex, build_index, query_negatives

logger = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training math produced a non-finite value."""


class TrainingDiverged(RuntimeError):
    """A round failed; reports up to the failure are preserved."""

    def __init__(self, message: str, reports: list[EvalReport]):
        super().__init__(message)
        self.reports = reports


@dataclass
class TrainConfig:
    batch_size: int = 32
    neg: int = 7
    context_size: int = 64
    logit_multiplier: float = 50.0
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 1.0
    steps_round1: int = 20_000
    steps_later: int = 100_000
    rounds: int = 5
    n_partitions: int = 1
    default_probes: int | None = None
    retrieval_k: int = 100
    vocab_size: int = 65536
    embed_dim: int = 32
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.neg < 1:
            raise ValueError("neg must be >= 1")
        if self.logit_multiplier <= 0:
            raise ValueError("logit_multiplier must be positive")
        if self.context_size < 3:
            raise ValueError("context_size must be >= 3")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.retrieval_k < 1:
            raise ValueError("retrieval_k must be >= 1")
        return self

    @property
    def entity_cols(self) -> int:
        return self.batch_size * (1 + self.neg)

    def steps_for_round(self, round_index: int) -> int:
        return self.steps_round1 if round_index == 1 else self.steps_later

    @classmethod
    def final_round(cls, **overrides) -> "TrainConfig":
        """Preset with per-step learning-rate decay enabled."""
        return cls(decay=0.998, **overrides)


_CONFIG_ALIASES = {
    "a": "logit_multiplier",
    "b": "batch_size",
    "w": "context_size",
    "k": "retrieval_k",
    "k0": "retrieval_k",
    "p": "n_partitions",
    "probes": "default_probes",
}

_PRESETS = {"default": TrainConfig, "final_round": TrainConfig.final_round}


class UnknownConfigKeyError(ValueError):
    def __init__(self, key: str):
        super().__init__(f"unknown config key: {key}")
        self.key = key


def parse_config(text: str, overrides: dict[str, str] | None = None) -> TrainConfig:
    """Parse a flat ``key = value`` config; '#' starts a comment."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    raw: dict[str, str] = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"config line is not 'key = value': {line!r}")
        raw[key.strip()] = value.strip()
    raw.update(overrides or {})

    preset = raw.pop("preset", "default")
    if preset not in _PRESETS:
        raise UnknownConfigKeyError(f"preset={preset}")
    kwargs = {}
    for key, value in raw.items():
        name = _CONFIG_ALIASES.get(key.lower(), key)
        if name not in fields:
            raise UnknownConfigKeyError(key)
        target = fields[name].type
        if name == "default_probes" and value.lower() in ("none", ""):
            kwargs[name] = None
        elif target in ("int", int):
            kwargs[name] = int(float(value))
        elif target in ("float", float):
            kwargs[name] = float(value)
        else:
            kwargs[name] = int(float(value)) if value.replace(".", "").isdigit() else value
    return _PRESETS[preset](**kwargs).validate()


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), overrides)


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


@dataclass
class TrainingBatch:
    """One training example block.

    mention_ids: (b, W); entity_ids: (b*(1+neg), W), mention-major with
    the positive first; targets: (b, b*(1+neg)) one-hot rows.
    """

    mention_ids: np.ndarray
    entity_ids: np.ndarray
    targets: np.ndarray

    @property
    def gold_cols(self) -> np.ndarray:
        return np.argmax(self.targets, axis=1)


def one_hot_targets(batch_size: int, neg: int) -> np.ndarray:
    targets = np.zeros((batch_size, batch_size * (1 + neg)), dtype=np.float64)
    targets[np.arange(batch_size), np.arange(batch_size) * (1 + neg)] = 1.0
    return targets


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    _scratch: np.ndarray | None = dataclasses.field(default=None, repr=False, compare=False)

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "AdamState":
        return cls(m=np.zeros_like(params.table), v=np.zeros_like(params.table), t=0)


class MentionWindower:
    """Extracts mention windows, tokenizing each document only once and
    memoizing the cut windows (they depend only on the span)."""

    def __init__(self, vocab: Vocabulary, context_size: int):
        self.vocab = vocab
        self.context_size = context_size
        self._docs: dict[str, object] = {}
        self._windows: dict[tuple[str, int, int], np.ndarray] = {}

    def window(self, mention: Mention) -> np.ndarray:
        key = (mention.doc_id, mention.start, mention.end)
        ids = self._windows.get(key)
        if ids is None:
            doc = self._docs.get(mention.doc_id)
            if doc is None:
                doc = tokenize(mention.context_text, self.vocab)
                self._docs[mention.doc_id] = doc
            ids = extract_mention_window(
                doc, mention.start, mention.end, self.context_size, self.vocab
            ).ids
            self._windows[key] = ids
        return ids


def build_batch(
    mentions: Sequence[Mention],
    index: SearchIndex,
    params: EncoderParams,
    cfg: TrainConfig,
    vocab: Vocabulary,
    rng: np.random.Generator,
    windower: MentionWindower | None = None,
    pool: Sequence[Mention] | None = None,
) -> TrainingBatch:
    """Assemble one batch: mention windows, each mention's gold entity
    tokens from the index payload, and freshly mined negatives.

    A sampled mention whose gold qid is absent from the index is logged
    and replaced by a resample from `pool`.
    """
    if len(mentions) != cfg.batch_size:
        raise ValueError(f"expected {cfg.batch_size} mentions, got {len(mentions)}")
    windower = windower or MentionWindower(vocab, cfg.context_size)
    resolved: list[Mention] = []
    for mention in mentions:
        while index.row_for_qid(mention.gold_qid) is None:
            if not pool:
                raise ValueError(f"gold qid Q{mention.gold_qid} absent from the index")
            logger.warning("gold qid Q%d absent from index, resampling", mention.gold_qid)
            mention = pool[int(rng.integers(len(pool)))]
        resolved.append(mention)

    mention_ids = np.stack([windower.window(m) for m in resolved])
    mention_embs = embed(params, mention_ids)

    width = 1 + cfg.neg
    entity_ids = np.empty((cfg.batch_size * width, cfg.context_size), dtype=np.int32)
    for i, mention in enumerate(resolved):
        gold_row = index.row_for_qid(mention.gold_qid)
        entity_ids[i * width] = index.row_tokens[gold_row]
        _, neg_tokens = query_negatives(
            index, mention_embs[i], mention.gold_qid, cfg.neg, cfg.retrieval_k, rng
        )
        entity_ids[i * width + 1 : (i + 1) * width] = neg_tokens
    return TrainingBatch(
        mention_ids=mention_ids,
        entity_ids=entity_ids,
        targets=one_hot_targets(cfg.batch_size, cfg.neg),
    )


def similarity_matrix(mention_embs: np.ndarray, entity_embs: np.ndarray) -> np.ndarray:
    """Cosine matrix for unit inputs: entry (i, j) = mention_i . entity_j."""
    mention_embs = np.asarray(mention_embs, dtype=np.float64)
    entity_embs = np.asarray(entity_embs, dtype=np.float64)
    if mention_embs.ndim != 2 or entity_embs.ndim != 2:
        raise ValueError("expected 2-D embedding blocks")
    if mention_embs.shape[1] != entity_embs.shape[1]:
        raise ValueError(
            f"dimension mismatch: {mention_embs.shape[1]} vs {entity_embs.shape[1]}"
        )
    return mention_embs @ entity_embs.T


def scaled_softmax_xent(logits: np.ndarray, gold: int, a: float) -> tuple[float, np.ndarray]:
    """Cross-entropy over softmax(a * logits), stabilized by
    max-subtraction. Returns (loss, probabilities)."""
    if a <= 0:
        raise ValueError(f"logit multiplier must be positive, got {a}")
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValueError("expected a single row of logits")
    if not (0 <= gold < len(logits)):
        raise ValueError(f"gold index {gold} outside [0, {len(logits)})")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    z = a * logits
    z = z - z.max()
    exp = np.exp(z)
    probs = exp / exp.sum()
    return float(-np.log(probs[gold])), probs


def _softmax_rows(logits: np.ndarray, a: float) -> np.ndarray:
    z = a * logits
    z = z - z.max(axis=1, keepdims=True)
    exp = np.exp(z)
    return exp / exp.sum(axis=1, keepdims=True)


def batch_loss_and_grad(
    params: EncoderParams, batch: TrainingBatch, cfg: TrainConfig
) -> tuple[float, np.ndarray]:
    """Row-mean batch loss and its exact gradient w.r.t. the embedding table.

    d(loss)/d(logits) = a * (softmax - target) / b, chained through the
    similarity matrix and the encoder.
    """
    mention_embs = embed(params, batch.mention_ids)
    entity_embs = embed(params, batch.entity_ids)
    logits = similarity_matrix(mention_embs, entity_embs)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    b = logits.shape[0]
    probs = _softmax_rows(logits, cfg.logit_multiplier)
    gold = batch.gold_cols
    loss = float(-np.log(probs[np.arange(b), gold]).mean())
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    d_logits = cfg.logit_multiplier * (probs - batch.targets) / b
    grad = embed_backward(params, batch.mention_ids, d_logits @ entity_embs)
    embed_backward(params, batch.entity_ids, d_logits.T @ mention_embs, out=grad)
    return loss, grad


def train_step(
    params: EncoderParams, adam: AdamState, batch: TrainingBatch, cfg: TrainConfig
) -> float:
    """One Adam update at effective rate lr * decay^t. Mutates params and
    adam in place; a non-finite loss aborts before any mutation."""
    loss, grad = batch_loss_and_grad(params, batch, cfg)
    lr_t = cfg.lr * cfg.decay**adam.t
    adam.t += 1
    if adam._scratch is None or adam._scratch.shape != grad.shape:
        adam._scratch = np.empty_like(grad)
    buf = adam._scratch
    # m <- b1 m + (1 - b1) g ; v <- b2 v + (1 - b2) g^2, all in place
    adam.m *= cfg.beta1
    np.multiply(grad, 1.0 - cfg.beta1, out=buf)
    adam.m += buf
    adam.v *= cfg.beta2
    np.multiply(grad, grad, out=buf)
    buf *= 1.0 - cfg.beta2
    adam.v += buf
    # table -= lr_t * m-hat / (sqrt(v-hat) + eps)
    np.sqrt(adam.v, out=buf)
    buf /= np.sqrt(1.0 - cfg.beta2**adam.t)
    buf += cfg.eps
    np.divide(adam.m, buf, out=buf)
    buf *= lr_t / (1.0 - cfg.beta1**adam.t)
    params.table -= buf
    return loss


# --- epoch files ------------------------------------------------------
# gzip stream of little-endian int32 records: header [b, neg, W,
# n_batches], then per batch the mention ids, entity ids, and gold
# columns. Targets are reconstructed as one-hot on load.


def _write_i32(handle, values: np.ndarray) -> None:
    handle.write(np.ascontiguousarray(values, dtype="<i4").tobytes())


def _read_i32(handle, count: int) -> np.ndarray:
    data = handle.read(4 * count)
    if len(data) != 4 * count:
        raise ValueError("corrupt epoch file: truncated record")
    return np.frombuffer(data, dtype="<i4").copy()


class EpochWriter:
    """Streams batches into a deterministic gzip epoch file."""

    def __init__(self, path: str | Path, batch_size: int, neg: int, context_size: int, n_batches: int):
        self.shape = (batch_size, neg, context_size)
        self._raw = open(path, "wb")
        # fixed mtime, level, and empty name keep the bytes run-independent
        self._gz = gzip.GzipFile(
            filename="", mode="wb", fileobj=self._raw, compresslevel=6, mtime=0
        )
        _write_i32(self._gz, np.asarray([batch_size, neg, context_size, n_batches]))

    def write(self, batch: TrainingBatch) -> None:
        _write_i32(self._gz, batch.mention_ids)
        _write_i32(self._gz, batch.entity_ids)
        _write_i32(self._gz, batch.gold_cols)

    def close(self) -> None:
        self._gz.close()
        self._raw.close()


def save_epoch(batches: Sequence[TrainingBatch], path: str | Path) -> None:
    """Losslessly persist a batch sequence; an empty epoch is a valid file."""
    if not batches:
        writer = EpochWriter(path, 0, 0, 0, 0)
        writer.close()
        return
    b, context_size = batches[0].mention_ids.shape
    neg = batches[0].entity_ids.shape[0] // b - 1
    writer = EpochWriter(path, b, neg, context_size, len(batches))
    for batch in batches:
        writer.write(batch)
    writer.close()


def iter_epoch(path: str | Path) -> Iterator[TrainingBatch]:
    with open(path, "rb") as raw, gzip.GzipFile(fileobj=raw, mode="rb") as gz:
        try:
            b, neg, w, n_batches = (int(x) for x in _read_i32(gz, 4))
            width = 1 + neg
            for _ in range(n_batches):
                mention_ids = _read_i32(gz, b * w).reshape(b, w)
                entity_ids = _read_i32(gz, b * width * w).reshape(b * width, w)
                gold = _read_i32(gz, b)
                targets = np.zeros((b, b * width), dtype=np.float64)
                targets[np.arange(b), gold] = 1.0
                yield TrainingBatch(
                    mention_ids=mention_ids.astype(np.int32),
                    entity_ids=entity_ids.astype(np.int32),
                    targets=targets,
                )
        except (EOFError, OSError) as exc:
            raise ValueError(f"corrupt epoch file: {exc}") from exc


def load_epoch(path: str | Path) -> list[TrainingBatch]:
    return list(iter_epoch(path))


# --- round orchestration ----------------------------------------------


class _BatchSampler:
    """Uniform sampling without replacement within a pass; each pass is
    reshuffled from the given generator."""

    def __init__(self, mentions: Sequence[Mention], rng: np.random.Generator):
        self.mentions = mentions
        self.rng = rng
        self._order: list[int] = []

    def next_batch(self, size: int) -> list[Mention]:
        out: list[Mention] = []
        while len(out) < size:
            if not self._order:
                self._order = list(self.rng.permutation(len(self.mentions)))
            out.append(self.mentions[self._order.pop()])
        return out


@dataclass
class FinetuneResult:
    params: EncoderParams
    reports: list[EvalReport]  # index = round, starting at the untrained round 0


def _checkpoint_path(out_dir: Path, round_index: int) -> Path:
    return out_dir / f"checkpoint_round_{round_index}.npz"


def _report_path(out_dir: Path, round_index: int) -> Path:
    return out_dir / f"report_round_{round_index}.tsv"


def _save_checkpoint(out_dir: Path, round_index: int, params: EncoderParams, adam: AdamState) -> None:
    np.savez(
        _checkpoint_path(out_dir, round_index),
        table=params.table,
        adam_m=adam.m,
        adam_v=adam.v,
        adam_t=np.asarray([adam.t]),
    )


def _resume_state(out_dir: Path, cfg: TrainConfig) -> tuple[int, EncoderParams, AdamState, list[EvalReport]] | None:
    completed = None
    for r in range(cfg.rounds, -1, -1):
        if _checkpoint_path(out_dir, r).exists() and _report_path(out_dir, r).exists():
            completed = r
            break
    if completed is None:
        return None
    with np.load(_checkpoint_path(out_dir, completed)) as data:
        params = EncoderParams(table=data["table"].copy())
        adam = AdamState(m=data["adam_m"].copy(), v=data["adam_v"].copy(), t=int(data["adam_t"][0]))
    reports = [
        report_from_tsv(_report_path(out_dir, r).read_text(encoding="utf-8"))
        for r in range(completed + 1)
    ]
    return completed, params, adam, reports


def run_finetuning(
    entities: Sequence[Entity],
    train_mentions: Sequence[Mention],
    eval_mentions: Sequence[Mention],
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    eval_ks: Sequence[int] = (1, 10),
) -> FinetuneResult:
    """Run the full fine-tuning loop and evaluate after every round.

    Round r: embed all KB descriptions with the current parameters,
    rebuild the index, generate an epoch of batches with mined
    negatives, train through it, evaluate. Round 0 is the untrained
    evaluation. With an output directory the run writes per-round epoch
    files, checkpoints, and reports, and resumes from the last
    completed round when rerun.
    """
    cfg.validate()
    vocab = Vocabulary(cfg.vocab_size)
    windower = MentionWindower(vocab, cfg.context_size)
    desc_tokens = np.stack(
        [
            compose_description(e.label, entity_body(e), cfg.context_size, vocab)
            for e in entities
        ]
    )
    qids = np.asarray([e.qid for e in entities], dtype=np.int64)

    out_path = Path(out_dir) if out_dir is not None else None
    start_round = 0
    params = adam = None
    reports: list[EvalReport] = []
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        resumed = _resume_state(out_path, cfg)
        if resumed is not None:
            start_round, params, adam, reports = resumed
            logger.info("resuming after completed round %d", start_round)
            start_round += 1
    if params is None:
        params = EncoderParams.init(cfg.vocab_size, cfg.embed_dim, seed=cfg.seed)
        adam = AdamState.zeros_like(params)
        start_round = 0

    def _evaluate(round_index: int) -> EvalReport:
        report = evaluate(
            params,
            entities,
            eval_mentions,
            ks=eval_ks,
            kb_mode="descriptions",
            vocab=vocab,
            context_size=cfg.context_size,
            n_partitions=cfg.n_partitions,
            probes=cfg.n_partitions,  # exact search for reproducible reports
            seed=cfg.seed,
        )
        if out_path is not None:
            _report_path(out_path, round_index).write_text(report_tsv(report), encoding="utf-8")
            _save_checkpoint(out_path, round_index, params, adam)
        logger.info(
            "round %d: %s",
            round_index,
            " ".join(f"R@{k}={v:.3f}" for k, v in sorted(report.recalls.items())),
        )
        return report

    if start_round == 0:
        reports.append(_evaluate(0))
        start_round = 1

    for round_index in range(start_round, cfg.rounds + 1):
        embeddings = embed(params, desc_tokens)
        index = build_index(
            embeddings,
            qids,
            desc_tokens,
            n_partitions=cfg.n_partitions,
            seed=cfg.seed + round_index,
            default_probes=cfg.default_probes,
        )
        rng = np.random.default_rng([cfg.seed, round_index])
        sampler = _BatchSampler(train_mentions, rng)
        steps = cfg.steps_for_round(round_index)

        if out_path is not None:
            epoch_path = out_path / f"epoch_round_{round_index}.bin.gz"
        else:
            handle = tempfile.NamedTemporaryFile(suffix=".bin.gz", delete=False)
            handle.close()
            epoch_path = Path(handle.name)
        writer = EpochWriter(epoch_path, cfg.batch_size, cfg.neg, cfg.context_size, steps)
        for _ in range(steps):
            writer.write(
                build_batch(
                    sampler.next_batch(cfg.batch_size),
                    index,
                    params,
                    cfg,
                    vocab,
                    rng,
                    windower=windower,
                    pool=train_mentions,
                )
            )
        writer.close()

        try:
            for batch in iter_epoch(epoch_path):
                train_step(params, adam, batch, cfg)
        except NumericError as exc:
            raise TrainingDiverged(f"round {round_index} failed: {exc}", reports) from exc
        finally:
            if out_path is None:
                epoch_path.unlink(missing_ok=True)

        reports.append(_evaluate(round_index))

    if out_path is not None:
        combined = "".join(
            f"{r}\t{line}\n"
            for r, report in enumerate(reports)
            for line in report_tsv(report).splitlines()
        )
        (out_path / "reports.tsv").write_text(combined, encoding="utf-8")
    return FinetuneResult(params=params, reports=reports)
