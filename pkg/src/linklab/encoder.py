"""Embedding providers.

The trainable encoder is deliberately small: mean-pool token embeddings
over non-pad positions, then L2-normalize. Its gradient is derived
analytically so the whole training stack can be checked against finite
differences. A file-backed provider loads externally produced vectors
into the same unit-norm contract.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kb import open_text
from .tokenizer import Vocabulary


@dataclass
class EncoderParams:
    """Token embedding table, (vocab_size, dim) in double precision."""

    table: np.ndarray

    @classmethod
    def init(cls, vocab_size: int, dim: int = 32, scale: float = 0.05, seed: int = 0) -> "EncoderParams":
        rng = np.random.default_rng(seed)
        return cls(table=rng.uniform(-scale, scale, size=(vocab_size, dim)))

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]


def _check_ids(params: EncoderParams, ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError(f"expected a 2-D id block, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= params.vocab_size):
        raise ValueError("token id outside the embedding table")
    return ids


def _pooled(params: EncoderParams, ids: np.ndarray):
    """Shared forward internals: (mean, norms, counts, mask)."""
    mask = ids != Vocabulary.PAD
    counts = mask.sum(axis=1).astype(np.float64)
    gathered = params.table[ids]  # (m, W, dim), a fresh copy
    np.multiply(gathered, mask[:, :, None], out=gathered)
    sums = gathered.sum(axis=1)
    # an all-pad row degenerates to the pad embedding itself
    empty = counts == 0
    if empty.any():
        sums[empty] = params.table[Vocabulary.PAD]
        counts[empty] = 1.0
    mean = sums / counts[:, None]
    norms = np.linalg.norm(mean, axis=1)
    return mean, norms, counts, mask, empty


def embed(params: EncoderParams, ids: np.ndarray) -> np.ndarray:
    """Embed each row of an (m, W) id block into a unit vector."""
    ids = _check_ids(params, ids)
    mean, norms, _, _, _ = _pooled(params, ids)
    return mean / norms[:, None]


def embed_backward(
    params: EncoderParams,
    ids: np.ndarray,
    upstream: np.ndarray,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """Exact gradient of `embed` w.r.t. the embedding table.

    Per row, the normalization Jacobian (I - yy^T)/|y| is applied to the
    upstream gradient, then 1/count flows back to every contributing
    table row. Pass `out` to accumulate into an existing gradient.
    """
    ids = _check_ids(params, ids)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (ids.shape[0], params.dim):
        raise ValueError(
            f"upstream shape {upstream.shape} does not match ({ids.shape[0]}, {params.dim})"
        )
    mean, norms, counts, mask, empty = _pooled(params, ids)
    unit = mean / norms[:, None]
    g_mean = (upstream - (upstream * unit).sum(axis=1, keepdims=True) * unit) / norms[:, None]
    g_row = g_mean / counts[:, None]

    grad = np.zeros_like(params.table) if out is None else out
    if mask.any():
        per_position = np.broadcast_to(g_row[:, None, :], ids.shape + (params.dim,))
        np.add.at(grad, ids[mask], per_position[mask])
    if empty.any():
        np.add.at(grad, np.full(int(empty.sum()), Vocabulary.PAD), g_row[empty])
    return grad


def save_params(params: EncoderParams, path: str | Path) -> None:
    np.save(path, params.table)


def load_params(path: str | Path) -> EncoderParams:
    table = np.load(path)
    if table.ndim != 2:
        raise ValueError(f"checkpoint is not a 2-D table: shape {table.shape}")
    return EncoderParams(table=np.asarray(table, dtype=np.float64))


def save_embeddings(path: str | Path, qids, rows: np.ndarray) -> None:
    """Write an embedding file: header ``n d``, then ``qid<TAB>v1 v2 ... vd``."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {rows.shape}")
    qids = list(qids)
    if len(qids) != rows.shape[0]:
        raise ValueError(f"{len(qids)} qids for {rows.shape[0]} rows")
    with open_text(path, "wt") as handle:
        handle.write(f"{rows.shape[0]} {rows.shape[1]}\n")
        for qid, row in zip(qids, rows):
            handle.write(f"{qid}\t" + " ".join(format(v, ".17g") for v in row) + "\n")


def load_embeddings(path: str | Path) -> tuple[np.ndarray, list[int]]:
    """Read an embedding file; rows are re-normalized to unit length.

    Returns (rows, qids) with the file's row order preserved.
    """
    with open_text(path) as handle:
        header = handle.readline().split()
        if len(header) != 2:
            raise ValueError("embedding file missing 'n d' header")
        n, dim = int(header[0]), int(header[1])
        rows = np.empty((n, dim), dtype=np.float64)
        qids: list[int] = []
        for i in range(n):
            line = handle.readline()
            if not line:
                raise ValueError(f"embedding file ends early at row {i}")
            qid_text, _, vector = line.rstrip("\n").partition("\t")
            values = vector.split()
            if len(values) != dim:
                raise ValueError(f"row {i}: expected {dim} values, got {len(values)}")
            rows[i] = [float(v) for v in values]
            qids.append(int(qid_text))
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0):
        raise ValueError("embedding file contains a zero row")
    return rows / norms[:, None], qids
