"""Exact cosine top-k retrieval over a corpus embedding matrix.

Three modes share one scoring path:

* baseline:  ``cos(E(q), E(c))``
* adr:       ``cos(Tr(E(q)), E(c))``
* adr_full:  ``cos(Tr(E(q)), Tr'(E(c)))``

Ties are broken by ascending corpus id, so results do not depend on the order
in which documents were inserted.
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path

import numpy as np

from . import adapter as adapter_mod
from .errors import (
    CorpusIndexError,
    DegenerateVectorError,
    NoNegativeError,
    ShapeError,
    StaleIndexError,
)
from .numerics import DTYPE, as_vector, row_norms
from .utils import atomic_write_bytes

_SNAPSHOT_MAGIC = b"ADRINDX1"
_CHUNK_ROWS = 4096


@dataclasses.dataclass(frozen=True)
class RankedList:
    query_id: str | None
    k: int
    entries: tuple  # ((corpus_id, score), ...)

    @property
    def ids(self):
        return [cid for cid, _ in self.entries]

    @property
    def scores(self):
        return [s for _, s in self.entries]

    def __len__(self):
        return len(self.entries)

    def truncate(self, k):
        return RankedList(self.query_id, k, self.entries[:k])


def _freeze(a):
    a = np.array(a, dtype=DTYPE, copy=True)
    a.setflags(write=False)
    return a


class CorpusIndex:
    """Corpus ids with raw (and optionally adapted) embedding rows.

    Instances are immutable; :meth:`refreshed` returns a new index.
    """

    def __init__(self, ids, raw_embeddings, adapted_embeddings=None, adapted_fingerprint=None):
        ids = [str(i) for i in ids]
        raw = np.asarray(raw_embeddings, dtype=DTYPE)
        if raw.ndim != 2 or raw.shape[0] != len(ids):
            raise ShapeError(f"{len(ids)} ids but embedding matrix of shape {raw.shape}")
        if len(set(ids)) != len(ids):
            raise CorpusIndexError("corpus ids must be unique")
        if not np.all(np.isfinite(raw)):
            raise CorpusIndexError("corpus embeddings contain non-finite values")
        self.ids = ids
        self.raw = _freeze(raw)
        self._raw_norms = row_norms(self.raw)
        if np.any(self._raw_norms == 0.0):
            bad = [ids[i] for i in np.flatnonzero(self._raw_norms == 0.0)[:5]]
            raise DegenerateVectorError(f"zero-norm corpus embeddings: {bad}")
        self.adapted = None if adapted_embeddings is None else _freeze(adapted_embeddings)
        self.adapted_fingerprint = adapted_fingerprint
        self._adapted_norms = None if self.adapted is None else row_norms(self.adapted)
        # rank of each row's id in ascending id order, used as the tie-break key
        order = sorted(range(len(ids)), key=ids.__getitem__)
        self._id_rank = np.empty(len(ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(ids))
        self._row_of = {cid: i for i, cid in enumerate(ids)}

    def __len__(self):
        return len(self.ids)

    @property
    def d(self):
        return self.raw.shape[1]

    def row(self, corpus_id):
        return self._row_of[corpus_id]

    def rows(self, corpus_ids):
        return [self._row_of[c] for c in corpus_ids]

    def refreshed(self, corpus_params):
        """New index whose adapted rows are ``Tr'(raw)`` under ``corpus_params``."""
        adapted = adapter_mod.transform(self.raw, corpus_params)
        return CorpusIndex(self.ids, self.raw, adapted, corpus_params.fingerprint())

    def corpus_matrix(self, corpus_params=None, allow_recompute=True):
        """Rows and norms to score against; raw when ``corpus_params`` is None."""
        if corpus_params is None:
            return self.raw, self._raw_norms
        fp = corpus_params.fingerprint()
        if self.adapted is not None and self.adapted_fingerprint == fp:
            return self.adapted, self._adapted_norms
        if not allow_recompute:
            raise StaleIndexError("adapted corpus embeddings were built with different parameters")
        adapted = adapter_mod.transform(self.raw, corpus_params)
        return adapted, row_norms(adapted)

    def scores(self, q_vec, corpus_params=None, allow_recompute=True):
        """Cosine of one (already transformed) query vector against every row."""
        q = as_vector(q_vec, "query embedding")
        if q.shape[0] != self.d:
            raise ShapeError(f"query has length {q.shape[0]}, index has d={self.d}")
        qn = np.sqrt((q * q).sum())
        if qn == 0.0:
            raise DegenerateVectorError("query embedding has zero norm")
        C, norms = self.corpus_matrix(corpus_params, allow_recompute)
        dots = np.empty(len(self), dtype=DTYPE)
        for start in range(0, len(self), _CHUNK_ROWS):
            block = C[start : start + _CHUNK_ROWS]
            dots[start : start + len(block)] = (block * q).sum(axis=1)
        return dots / (norms * qn)

    def top_k(self, scores, k, query_id=None):
        if len(self) == 0:
            raise CorpusIndexError("empty corpus index")
        if k < 1:
            raise ValueError("k must be >= 1")
        order = np.lexsort((self._id_rank, -scores))[: min(k, len(self))]
        return RankedList(query_id, k, tuple((self.ids[i], float(scores[i])) for i in order))

    # -- snapshot ---------------------------------------------------------

    def save(self, path):
        """Binary snapshot: magic, uint64 count, uint64 d, ids block, little-endian float64 rows."""
        id_blob = "\n".join(self.ids).encode("utf-8")
        parts = [
            _SNAPSHOT_MAGIC,
            struct.pack("<QQQ", len(self), self.d, len(id_blob)),
            id_blob,
            np.ascontiguousarray(self.raw, dtype="<f8").tobytes(),
        ]
        atomic_write_bytes(Path(path), b"".join(parts))
        return Path(path)

    @classmethod
    def load(cls, path):
        data = Path(path).read_bytes()
        if data[:8] != _SNAPSHOT_MAGIC:
            raise CorpusIndexError(f"{path} is not an index snapshot")
        n, d, id_len = struct.unpack_from("<QQQ", data, 8)
        off = 8 + 24
        ids = data[off : off + id_len].decode("utf-8").split("\n") if n else []
        off += id_len
        raw = np.frombuffer(data, dtype="<f8", count=n * d, offset=off).reshape(n, d)
        return cls(ids, raw.astype(DTYPE))


def _query_vector(q_emb, query_params):
    q = as_vector(q_emb, "query embedding")
    if query_params is None:
        return q
    return adapter_mod.transform(q, query_params)


def retrieve_baseline(q_emb, index, k, query_id=None):
    if len(index) == 0:
        raise CorpusIndexError("empty corpus index")
    return index.top_k(index.scores(q_emb), k, query_id)


def retrieve_adr(q_emb, query_params, index, k, query_id=None):
    return retrieve_baseline(_query_vector(q_emb, query_params), index, k, query_id)


def retrieve_adr_full(q_emb, query_params, corpus_params, index, k, query_id=None, allow_recompute=True):
    if len(index) == 0:
        raise CorpusIndexError("empty corpus index")
    q = _query_vector(q_emb, query_params)
    return index.top_k(index.scores(q, corpus_params, allow_recompute), k, query_id)


def retrieve(q_emb, index, k, mode="baseline", query_params=None, corpus_params=None, query_id=None,
             allow_recompute=True):
    if mode == "baseline":
        return retrieve_baseline(q_emb, index, k, query_id)
    if mode == "adr":
        return retrieve_adr(q_emb, query_params, index, k, query_id)
    if mode == "adr_full":
        return retrieve_adr_full(q_emb, query_params, corpus_params, index, k, query_id, allow_recompute)
    raise ValueError(f"unknown retrieval mode {mode!r}")


def refresh_adapted(index, corpus_params):
    return index.refreshed(corpus_params)


def hard_negative(q_emb, positives, query_params, corpus_params, index):
    """Highest-scoring corpus id outside ``positives`` under the current adapters.

    ``query_params``/``corpus_params`` may be None for the identity transform.
    """
    positives = set(positives)
    unknown = positives.difference(index.ids)
    if unknown:
        raise CorpusIndexError(f"positives not in index: {sorted(unknown)[:5]}")
    if len(positives) >= len(index):
        raise NoNegativeError("every corpus element is a positive; no negative exists")
    scores = index.scores(_query_vector(q_emb, query_params), corpus_params)
    scores = scores.copy()
    scores[index.rows(positives)] = -np.inf
    best = np.lexsort((index._id_rank, -scores))[0]
    return index.ids[best]


def hard_negatives_batch(Q_adapted, positive_rows, C_adapted):
    """Vectorised hard negatives for training.

    ``Q_adapted`` holds transformed query rows, ``C_adapted`` the (possibly
    transformed) corpus rows, ``positive_rows[i]`` the corpus rows to exclude for
    query ``i``. Returns one corpus row index per query, ties to the lowest row.
    Uses a BLAS product; the callers keep corpus rows in ascending-id order so
    the lowest row is also the lowest id.
    """
    Qn = Q_adapted / row_norms(Q_adapted)[:, None]
    Cn = C_adapted / row_norms(C_adapted)[:, None]
    S = Qn @ Cn.T
    for i, rows in enumerate(positive_rows):
        S[i, list(rows)] = -np.inf
    if np.any(np.all(np.isneginf(S), axis=1)):
        raise NoNegativeError("a training query has every corpus element as a positive")
    return np.argmax(S, axis=1)
